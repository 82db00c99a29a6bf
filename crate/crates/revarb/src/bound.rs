//! Evaluation of the variational lower bound on the log-marginal likelihood,
//! its analytic gradients, and the closed-form posterior over inducing
//! outputs that the bound eliminates.
//!
//! Each GP layer contributes a sparse-variational data-fit block evaluated on
//! uncertain regressors through the Ψ statistics:
//!
//! ```text
//! F_l = −(n/2)·log(2πσ²) − (oᵀo + Σλ + Ψ0 − tr(K_z⁻¹Ψ2)) / (2σ²)
//!       + ½log|K_z| − ½log|K_z + σ⁻²Ψ2|
//!       + oᵀΨ1 (K_z + σ⁻²Ψ2)⁻¹ Ψ1ᵀo / (2σ⁴)
//! ```
//!
//! with `o` the observed outputs for the top layer and the variational means
//! for hidden layers (whose Σλ term comes from the expected square). Hidden
//! layers add the Gaussian entropies of their latent posteriors and the
//! cross-entropies of the first `L` posteriors against their trainable
//! priors, which together form the initial-state KL penalty.
//!
//! All solves go through Cholesky factorizations; the summation order is
//! fixed so repeated evaluations are bit-identical.

use crate::error::{Error, Result};
use crate::kernel::{gram, gram_backward, GramMatrix};
use crate::linalg::{chol_inverse, chol_logdet, chol_solve_mat, chol_solve_vec, cholesky};
use crate::model::{
    assemble_regressors, regressor_source, RegressorSource, RevarbState, StateGrads,
};
use crate::psi::{compute_psi, psi_backward, PsiStats};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};

/// Per-term decomposition of the bound. `total` is the sum of all component
/// vectors.
#[derive(Debug, Clone)]
pub struct BoundBreakdown<T> {
    pub total: T,
    /// Per GP layer: noise constant, squared-data block and the quadratic
    /// data term.
    pub fit_terms: Vec<T>,
    /// Per GP layer: +tr(K_z⁻¹Ψ2)/(2σ²).
    pub trace_terms: Vec<T>,
    /// Per GP layer: ½log|K_z| − ½log|K_z + σ⁻²Ψ2|.
    pub logdet_terms: Vec<T>,
    /// Per hidden layer: Σ_i ½log(2πeλ_i) over the whole sequence.
    pub entropy_terms: Vec<T>,
    /// Per hidden layer: Σ_{i<L} ∫ q(x_i) log p(x_i).
    pub cross_entropy_terms: Vec<T>,
}

impl<T: Scalar> BoundBreakdown<T> {
    /// Recompute the total from the stored components.
    pub fn component_sum(&self) -> T {
        self.fit_terms.iter().copied().sum::<T>()
            + self.trace_terms.iter().copied().sum::<T>()
            + self.logdet_terms.iter().copied().sum::<T>()
            + self.entropy_terms.iter().copied().sum::<T>()
            + self.cross_entropy_terms.iter().copied().sum::<T>()
    }
}

/// Gaussian entropy ½·log(2πeλ).
pub fn gaussian_entropy<T: Scalar>(variance: T) -> T {
    let half = T::cast(0.5);
    half * (T::cast(2.0) * T::PI() * T::E() * variance).ln()
}

/// ∫ N(x|μ,λ) log N(x|μ0,λ0) dx.
pub fn gaussian_cross_entropy<T: Scalar>(mu: T, lambda: T, mu0: T, lambda0: T) -> T {
    let half = T::cast(0.5);
    let diff = mu - mu0;
    -half * (T::cast(2.0) * T::PI() * lambda0).ln() - (lambda + diff * diff) / (T::cast(2.0) * lambda0)
}

/// Everything the bound computes for one GP layer that gradients and
/// prediction reuse.
struct LayerEval<T> {
    psi: PsiStats<T>,
    kz: GramMatrix<T>,
    chol_a: Array2<T>,
    /// Ψ1ᵀ o
    c: Array1<T>,
    /// A⁻¹ Ψ1ᵀ o
    a: Array1<T>,
    o: Array1<T>,
    s_lambda: T,
    beta: T,
    tr_term: T,
}

fn eval_layer<T: Scalar>(
    state: &RevarbState<T>,
    u: &Array1<T>,
    y: &Array1<T>,
    l: usize,
) -> Result<(LayerEval<T>, T, T, T)> {
    let cfg = &state.config;
    let r0 = cfg.first_row();
    let n_rows = state.n - r0;
    let params = &state.layers[l];
    let hidden = l < cfg.hidden_layers;

    let q = assemble_regressors(state, u, l)?;
    let kz = gram(
        &params.inducing.pseudo_inputs,
        &params.kernel,
        T::cast(cfg.jitter),
    )
    .map_err(|e| rename_chol(e, "K_z", l))?;
    let psi = compute_psi(&q, &params.inducing.pseudo_inputs, &params.kernel)?;

    let sigma2 = params.noise_variance;
    let beta = T::one() / sigma2;
    let o: Array1<T> = if hidden {
        state.variational[l]
            .means
            .slice(ndarray::s![r0..])
            .to_owned()
    } else {
        y.slice(ndarray::s![r0..]).to_owned()
    };
    let s_lambda = if hidden {
        state.variational[l]
            .variances
            .slice(ndarray::s![r0..])
            .iter()
            .copied()
            .sum()
    } else {
        T::zero()
    };

    let mut a_mat = &kz.values + &(psi.psi2.mapv(|v| v * beta));
    crate::linalg::symmetrize(&mut a_mat);
    let chol_a = cholesky(&a_mat)
        .filter(|c| {
            crate::linalg::chol_diag_ratio(c)
                >= T::cast(crate::kernel::MIN_CHOL_DIAG_RATIO)
        })
        .ok_or_else(|| Error::Cholesky {
            matrix: format!("K_z + σ⁻²Ψ2 (layer {l})"),
            jitter: kz.jitter_applied.to_f64_lossy(),
        })?;

    let c = psi.psi1.t().dot(&o);
    let a = chol_solve_vec(&chol_a, &c);

    let solved = chol_solve_mat(kz.cholesky(), &psi.psi2);
    let tr_term = (0..solved.nrows()).map(|i| solved[(i, i)]).sum::<T>();
    // Ψ0 − tr(K_z⁻¹Ψ2) is nonnegative in exact arithmetic; a clearly
    // negative value means the solves are no longer trustworthy.
    if psi.psi0 - tr_term < -T::cast(1e-6) * psi.psi0.max(T::one()) {
        return Err(Error::Cholesky {
            matrix: format!("K_z⁻¹Ψ2 trace (layer {l})"),
            jitter: kz.jitter_applied.to_f64_lossy(),
        });
    }

    let half = T::cast(0.5);
    let two_pi = T::cast(2.0) * T::PI();
    let oo = o.dot(&o);
    let fit = -T::cast(n_rows as f64) * half * (two_pi * sigma2).ln()
        - half * beta * (oo + s_lambda + psi.psi0)
        + half * beta * beta * c.dot(&a);
    let trace = half * beta * tr_term;
    let logdet = half * chol_logdet(kz.cholesky()) - half * chol_logdet(&chol_a);

    Ok((
        LayerEval {
            psi,
            kz,
            chol_a,
            c,
            a,
            o,
            s_lambda,
            beta,
            tr_term,
        },
        fit,
        trace,
        logdet,
    ))
}

fn rename_chol(e: Error, name: &str, layer: usize) -> Error {
    match e {
        Error::Cholesky { jitter, .. } => Error::Cholesky {
            matrix: format!("{name} (layer {layer})"),
            jitter,
        },
        other => other,
    }
}

fn evaluate<T: Scalar>(
    state: &RevarbState<T>,
    u: &Array1<T>,
    y: &Array1<T>,
    want_grads: bool,
) -> Result<(BoundBreakdown<T>, Option<StateGrads<T>>)> {
    state.validate()?;
    if y.len() != state.n || u.len() != state.n {
        return Err(Error::Shape(format!(
            "sequences must have length n = {}, got u: {}, y: {}",
            state.n,
            u.len(),
            y.len()
        )));
    }
    let cfg = &state.config;
    let h = cfg.hidden_layers;
    let r0 = cfg.first_row();
    let n_rows = state.n - r0;
    let half = T::cast(0.5);

    let mut fit_terms = Vec::with_capacity(h + 1);
    let mut trace_terms = Vec::with_capacity(h + 1);
    let mut logdet_terms = Vec::with_capacity(h + 1);
    let mut evals = Vec::with_capacity(h + 1);
    for l in 0..cfg.num_layers() {
        let (ev, fit, trace, logdet) = eval_layer(state, u, y, l)?;
        fit_terms.push(fit);
        trace_terms.push(trace);
        logdet_terms.push(logdet);
        evals.push(ev);
    }

    let mut entropy_terms = Vec::with_capacity(h);
    let mut cross_entropy_terms = Vec::with_capacity(h);
    for v in &state.variational {
        let ent: T = v.variances.iter().map(|l| gaussian_entropy(*l)).sum();
        entropy_terms.push(ent);
        let mut cross = T::zero();
        for i in 0..cfg.lag {
            cross += gaussian_cross_entropy(
                v.means[i],
                v.variances[i],
                v.prior_means[i],
                v.prior_variances[i],
            );
        }
        cross_entropy_terms.push(cross);
    }

    let total = fit_terms.iter().copied().sum::<T>()
        + trace_terms.iter().copied().sum::<T>()
        + logdet_terms.iter().copied().sum::<T>()
        + entropy_terms.iter().copied().sum::<T>()
        + cross_entropy_terms.iter().copied().sum::<T>();

    let breakdown = BoundBreakdown {
        total,
        fit_terms,
        trace_terms,
        logdet_terms,
        entropy_terms,
        cross_entropy_terms,
    };

    if !want_grads {
        return Ok((breakdown, None));
    }

    let mut grads = StateGrads::zeros_like(state);

    for l in 0..cfg.num_layers() {
        let ev = &evals[l];
        let params = &state.layers[l];
        let hidden = l < h;
        let beta = ev.beta;
        let sigma2 = params.noise_variance;
        let m = cfg.num_inducing;

        let kz_inv = chol_inverse(ev.kz.cholesky());
        let a_inv = chol_inverse(&ev.chol_a);

        // ∂F/∂Ψ0, ∂F/∂Ψ1, ∂F/∂Ψ2
        let d_psi0 = -half * beta;
        let mut d_psi1 = Array2::<T>::zeros(ev.psi.psi1.dim());
        for i in 0..n_rows {
            for j in 0..m {
                d_psi1[(i, j)] = beta * beta * ev.o[i] * ev.a[j];
            }
        }
        let mut d_psi2 = Array2::<T>::zeros((m, m));
        let b3 = beta * beta * beta;
        for i in 0..m {
            for j in 0..m {
                d_psi2[(i, j)] = half * beta * kz_inv[(i, j)]
                    - half * beta * a_inv[(i, j)]
                    - half * b3 * ev.a[i] * ev.a[j];
            }
        }

        // ∂F/∂K_z
        let kz_psi2_kz = kz_inv.dot(&ev.psi.psi2).dot(&kz_inv);
        let mut d_kz = Array2::<T>::zeros((m, m));
        let b2 = beta * beta;
        for i in 0..m {
            for j in 0..m {
                d_kz[(i, j)] = half * kz_inv[(i, j)]
                    - half * a_inv[(i, j)]
                    - half * beta * kz_psi2_kz[(i, j)]
                    - half * b2 * ev.a[i] * ev.a[j];
            }
        }

        // noise variance (direct dependence only; Ψ and K_z are inputs here)
        let oo = ev.o.dot(&ev.o);
        let tr_a_psi2 = (&a_inv * &ev.psi.psi2).sum();
        let ca = ev.c.dot(&ev.a);
        let a_psi2_a = ev.a.dot(&ev.psi.psi2.dot(&ev.a));
        let d_sigma2 = -T::cast(n_rows as f64) * half * beta
            + half * b2 * (oo + ev.s_lambda + ev.psi.psi0 - ev.tr_term)
            + half * b2 * tr_a_psi2
            - b3 * ca
            + half * b2 * b2 * a_psi2_a;
        grads.layers[l].d_noise_variance += d_sigma2;

        // data vector o and the Σλ term
        if hidden {
            let dd = ev.psi.psi1.dot(&ev.a);
            for k in 0..n_rows {
                grads.variational[l].d_means[r0 + k] += -beta * ev.o[k] + b2 * dd[k];
                grads.variational[l].d_variances[r0 + k] += -half * beta;
            }
        }

        // chain through the Ψ statistics into regressors and kernel params
        let q = assemble_regressors(state, u, l)?;
        let pg = psi_backward(
            &q,
            &params.inducing.pseudo_inputs,
            &params.kernel,
            d_psi0,
            &d_psi1,
            &d_psi2,
        )?;
        grads.layers[l].d_signal_variance += pg.d_signal_variance;
        grads.layers[l].d_ard_weights =
            &grads.layers[l].d_ard_weights + &pg.d_ard_weights;
        grads.layers[l].d_inducing = &grads.layers[l].d_inducing + &pg.d_inducing;
        let dim = cfg.layer_dim(l);
        for r in r0..state.n {
            for d in 0..dim {
                if let RegressorSource::Latent { layer, index } =
                    regressor_source(cfg, l, r, d)
                {
                    grads.variational[layer].d_means[index] += pg.d_means[(r - r0, d)];
                    grads.variational[layer].d_variances[index] +=
                        pg.d_variances[(r - r0, d)];
                }
            }
        }

        // chain through K_z into kernel params and inducing inputs
        let rel_jitter = ev.kz.jitter_applied / params.kernel.signal_variance;
        let kg = gram_backward(
            &params.inducing.pseudo_inputs,
            &params.kernel,
            rel_jitter,
            &d_kz,
        );
        grads.layers[l].d_signal_variance += kg.d_signal_variance;
        grads.layers[l].d_ard_weights =
            &grads.layers[l].d_ard_weights + &kg.d_ard_weights;
        grads.layers[l].d_inducing = &grads.layers[l].d_inducing + &kg.d_inputs;

        let _ = sigma2;
    }

    // entropy and initial-prior cross-entropy
    for (l, v) in state.variational.iter().enumerate() {
        for i in 0..state.n {
            grads.variational[l].d_variances[i] += half / v.variances[i];
        }
        for i in 0..cfg.lag {
            let lam0 = v.prior_variances[i];
            let diff = v.means[i] - v.prior_means[i];
            grads.variational[l].d_variances[i] -= half / lam0;
            grads.variational[l].d_means[i] -= diff / lam0;
            grads.variational[l].d_prior_means[i] += diff / lam0;
            grads.variational[l].d_prior_variances[i] +=
                -half / lam0 + (v.variances[i] + diff * diff) / (T::cast(2.0) * lam0 * lam0);
        }
    }

    Ok((breakdown, Some(grads)))
}

/// Evaluate the lower bound with its per-term breakdown.
pub fn lower_bound<T: Scalar>(
    state: &RevarbState<T>,
    u: &Array1<T>,
    y: &Array1<T>,
) -> Result<BoundBreakdown<T>> {
    Ok(evaluate(state, u, y, false)?.0)
}

/// Evaluate the bound together with gradients w.r.t. every free parameter.
pub fn bound_grads<T: Scalar>(
    state: &RevarbState<T>,
    u: &Array1<T>,
    y: &Array1<T>,
) -> Result<(BoundBreakdown<T>, StateGrads<T>)> {
    let (b, g) = evaluate(state, u, y, true)?;
    Ok((b, g.expect("gradients requested")))
}

/// Optimal posterior over one layer's inducing outputs, cached for
/// prediction.
#[derive(Debug, Clone)]
pub struct LayerQz<T> {
    /// B = σ⁻²(K_z + σ⁻²Ψ2)⁻¹Ψ1ᵀo; the predictive mean is Ψ1*·B.
    pub b: Array1<T>,
    /// Posterior mean over the inducing outputs, K_z·B.
    pub mean: Array1<T>,
    /// Posterior covariance K_z(K_z + σ⁻²Ψ2)⁻¹K_z.
    pub covariance: Array2<T>,
    /// K_z⁻¹ − (K_z + σ⁻²Ψ2)⁻¹, the weight of the predictive trace
    /// correction.
    pub correction: Array2<T>,
}

/// Optimal q(z) statistics for every layer.
#[derive(Debug, Clone)]
pub struct OptimalQz<T> {
    pub layers: Vec<LayerQz<T>>,
}

/// Reconstruct the optimally eliminated inducing-output posteriors.
pub fn recover_qz<T: Scalar>(
    state: &RevarbState<T>,
    u: &Array1<T>,
    y: &Array1<T>,
) -> Result<OptimalQz<T>> {
    state.validate()?;
    let mut layers = Vec::with_capacity(state.config.num_layers());
    for l in 0..state.config.num_layers() {
        let (ev, _, _, _) = eval_layer(state, u, y, l)?;
        let b = ev.a.mapv(|v| v * ev.beta);
        let mean = ev.kz.values.dot(&b);
        let a_inv_kz = chol_solve_mat(&ev.chol_a, &ev.kz.values);
        let mut covariance = ev.kz.values.dot(&a_inv_kz);
        crate::linalg::symmetrize(&mut covariance);
        let kz_inv = chol_inverse(ev.kz.cholesky());
        let a_inv = chol_inverse(&ev.chol_a);
        let correction = &kz_inv - &a_inv;
        layers.push(LayerQz {
            b,
            mean,
            covariance,
            correction,
        });
    }
    Ok(OptimalQz { layers })
}
