//! Full-GP NARX baseline: autoregression on observed outputs, evidence
//! maximization, and mean-feedback free simulation.
//!
//! This model deliberately feeds back point predictions without propagating
//! uncertainty, which is the behavior the latent-state model is compared
//! against.

use crate::error::{Error, Result};
use crate::kernel::{cross_gram, kern, KernelParams};
use crate::linalg::{chol_inverse, chol_logdet, chol_solve_vec, cholesky};
use crate::optimize::{maximize, LbfgsOptions};
use crate::predict::StepMoments;
use crate::scalar::Scalar;
use crate::trainer::{TrainOptions, TrainTrace};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Trained GP-NARX regression model.
#[derive(Debug, Clone)]
pub struct GpNarxModel<T> {
    pub kernel: KernelParams<T>,
    pub noise_variance: T,
    pub lag: usize,
    pub input_lag: usize,
    /// Window matrix built from observed outputs and inputs.
    pub regressors: Array2<T>,
    pub targets: Array1<T>,
    chol: Array2<T>,
    alpha: Array1<T>,
}

/// Regressor rows `[y_{t-1}..y_{t-L}, u_{t-1}..u_{t-Lu}]` and targets `y_t`
/// for `t in max(L, Lu)..n`.
pub fn build_narx_regressors<T: Scalar>(
    u: &Array1<T>,
    y: &Array1<T>,
    lag: usize,
    input_lag: usize,
) -> Result<(Array2<T>, Array1<T>)> {
    if u.len() != y.len() {
        return Err(Error::Shape(format!(
            "input/output lengths disagree: {} vs {}",
            u.len(),
            y.len()
        )));
    }
    if lag == 0 || input_lag == 0 {
        return Err(Error::Invalid("lags must be >= 1".into()));
    }
    let n = y.len();
    let t0 = lag.max(input_lag);
    if n <= t0 + 1 {
        return Err(Error::Shape(format!(
            "need more than {} samples for lags ({lag}, {input_lag})",
            t0 + 1
        )));
    }
    let rows = n - t0;
    let dim = lag + input_lag;
    let mut x = Array2::<T>::zeros((rows, dim));
    let mut t_vec = Array1::<T>::zeros(rows);
    for t in t0..n {
        for d in 0..lag {
            x[(t - t0, d)] = y[t - 1 - d];
        }
        for d in 0..input_lag {
            x[(t - t0, lag + d)] = u[t - 1 - d];
        }
        t_vec[t - t0] = y[t];
    }
    Ok((x, t_vec))
}

/// Marginal log-likelihood log N(y | 0, K + σ²I) and its gradients w.r.t.
/// σ_f², each w_d², and σ² (raw space).
pub fn log_evidence<T: Scalar>(
    kernel: &KernelParams<T>,
    noise_variance: T,
    x: &Array2<T>,
    y: &Array1<T>,
) -> Result<(T, T, Array1<T>, T)> {
    kernel.validate()?;
    if !(noise_variance > T::zero()) {
        return Err(Error::Invalid("noise variance must be positive".into()));
    }
    let n = x.nrows();
    let dim = x.ncols();
    let half = T::cast(0.5);
    let mut kn = cross_gram(x, x, kernel)?;
    for i in 0..n {
        kn[(i, i)] += noise_variance;
    }
    let chol = cholesky(&kn).ok_or(Error::Cholesky {
        matrix: "K + σ²I".into(),
        jitter: noise_variance.to_f64_lossy(),
    })?;
    let alpha = chol_solve_vec(&chol, y);
    let value = -half * y.dot(&alpha)
        - half * chol_logdet(&chol)
        - T::cast(n as f64) * half * (T::cast(2.0) * T::PI()).ln();

    // S = ααᵀ − K_n⁻¹; dL/dθ = ½ tr(S · ∂K_n/∂θ)
    let kn_inv = chol_inverse(&chol);
    let mut d_sf2 = T::zero();
    let mut d_w = Array1::<T>::zeros(dim);
    let mut d_noise = T::zero();
    for i in 0..n {
        for j in 0..n {
            let s = alpha[i] * alpha[j] - kn_inv[(i, j)];
            let k = if i == j {
                kernel.signal_variance
            } else {
                crate::kernel::kern_unchecked(x.row(i), x.row(j), kernel)
            };
            d_sf2 += half * s * k / kernel.signal_variance;
            for d in 0..dim {
                let delta = x[(i, d)] - x[(j, d)];
                d_w[d] += half * s * k * (-half * delta * delta);
            }
            if i == j {
                d_noise += half * s;
            }
        }
    }
    Ok((value, d_sf2, d_w, d_noise))
}

fn refit_cache<T: Scalar>(
    kernel: &KernelParams<T>,
    noise_variance: T,
    x: &Array2<T>,
    y: &Array1<T>,
) -> Result<(Array2<T>, Array1<T>)> {
    let n = x.nrows();
    let mut kn = cross_gram(x, x, kernel)?;
    for i in 0..n {
        kn[(i, i)] += noise_variance;
    }
    let chol = cholesky(&kn).ok_or(Error::Cholesky {
        matrix: "K + σ²I".into(),
        jitter: noise_variance.to_f64_lossy(),
    })?;
    let alpha = chol_solve_vec(&chol, y);
    Ok((chol, alpha))
}

/// Fit from explicit initial hyperparameters (single optimizer run).
pub fn fit_gpnarx_with_init<T: Scalar>(
    u: &Array1<T>,
    y: &Array1<T>,
    lag: usize,
    input_lag: usize,
    init_kernel: KernelParams<T>,
    init_noise: T,
    opts: &TrainOptions,
) -> Result<(GpNarxModel<T>, TrainTrace<T>)> {
    let (x, t) = build_narx_regressors(u, y, lag, input_lag)?;
    let dim = x.ncols();
    let mut p0 = Vec::with_capacity(dim + 2);
    p0.push(init_kernel.signal_variance.ln());
    p0.extend(init_kernel.ard_weights.iter().map(|w| w.ln()));
    p0.push(crate::model::encode_floored(
        init_noise,
        crate::model::NOISE_VARIANCE_FLOOR,
    ));
    let p0 = Array1::from_vec(p0);

    let objective = |p: &Array1<T>| -> Result<(T, Array1<T>)> {
        let kernel = KernelParams {
            signal_variance: p[0].exp(),
            ard_weights: p.slice(ndarray::s![1..1 + dim]).mapv(|v| v.exp()),
        };
        let noise =
            crate::model::decode_floored(p[1 + dim], crate::model::NOISE_VARIANCE_FLOOR);
        let (value, d_sf2, d_w, d_noise) = log_evidence(&kernel, noise, &x, &t)?;
        let mut g = Vec::with_capacity(dim + 2);
        g.push(d_sf2 * kernel.signal_variance);
        g.extend(
            d_w.iter()
                .zip(kernel.ard_weights.iter())
                .map(|(g, w)| *g * *w),
        );
        g.push(d_noise * (noise - T::cast(crate::model::NOISE_VARIANCE_FLOOR)));
        Ok((value, Array1::from_vec(g)))
    };

    let out = maximize(
        objective,
        p0,
        None,
        &LbfgsOptions {
            max_evals: opts.max_evals,
            grad_tol: opts.convergence_tol,
            ..Default::default()
        },
        0,
    )?;

    let kernel = KernelParams {
        signal_variance: out.x[0].exp(),
        ard_weights: out.x.slice(ndarray::s![1..1 + dim]).mapv(|v| v.exp()),
    };
    let noise_variance =
        crate::model::decode_floored(out.x[1 + dim], crate::model::NOISE_VARIANCE_FLOOR);
    let (chol, alpha) = refit_cache(&kernel, noise_variance, &x, &t)?;
    Ok((
        GpNarxModel {
            kernel,
            noise_variance,
            lag,
            input_lag,
            regressors: x,
            targets: t,
            chol,
            alpha,
        },
        TrainTrace { records: out.trace },
    ))
}

/// Fit by evidence maximization with seeded multistarts over the
/// hyperparameters; the restart with the best evidence wins.
pub fn fit_gpnarx<T: Scalar>(
    u: &Array1<T>,
    y: &Array1<T>,
    lag: usize,
    input_lag: usize,
    opts: &TrainOptions,
) -> Result<(GpNarxModel<T>, TrainTrace<T>)> {
    opts.validate()?;
    let dim = lag + input_lag;
    let mut best: Option<(GpNarxModel<T>, TrainTrace<T>)> = None;
    let mut failures = Vec::new();
    for r in 0..opts.restarts {
        let mut kernel =
            KernelParams::isotropic(T::cast(1.0), T::cast(1.0 / dim as f64), dim)?;
        let mut noise = T::cast(0.1);
        if r > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(r as u64));
            let s: f64 = rng.gen_range(-1.0..1.0);
            kernel.signal_variance *= T::cast(s.exp());
            for w in kernel.ard_weights.iter_mut() {
                let s: f64 = rng.gen_range(-1.0..1.0);
                *w *= T::cast(s.exp());
            }
            let s: f64 = rng.gen_range(-1.0..1.0);
            noise *= T::cast(s.exp());
        }
        match fit_gpnarx_with_init(u, y, lag, input_lag, kernel, noise, opts) {
            Ok((model, trace)) => {
                let v = trace.final_bound().unwrap_or(T::neg_infinity());
                let better = match &best {
                    Some((_, t)) => v > t.final_bound().unwrap_or(T::neg_infinity()),
                    None => true,
                };
                if better {
                    best = Some((model, trace));
                }
            }
            Err(e) => failures.push(format!("restart {r}: {e}")),
        }
    }
    best.ok_or_else(|| Error::Training(format!("all restarts failed: {}", failures.join("; "))))
}

impl<T: Scalar> GpNarxModel<T> {
    /// Construct with fixed hyperparameters (no optimization).
    pub fn with_params(
        u: &Array1<T>,
        y: &Array1<T>,
        lag: usize,
        input_lag: usize,
        kernel: KernelParams<T>,
        noise_variance: T,
    ) -> Result<Self> {
        let (x, t) = build_narx_regressors(u, y, lag, input_lag)?;
        let (chol, alpha) = refit_cache(&kernel, noise_variance, &x, &t)?;
        Ok(Self {
            kernel,
            noise_variance,
            lag,
            input_lag,
            regressors: x,
            targets: t,
            chol,
            alpha,
        })
    }

    /// Latent predictive mean and variance at a regressor row.
    pub fn predict(&self, x_star: &Array1<T>) -> Result<StepMoments<T>> {
        if x_star.len() != self.regressors.ncols() {
            return Err(Error::Shape(format!(
                "regressor has {} dims, model expects {}",
                x_star.len(),
                self.regressors.ncols()
            )));
        }
        let n = self.regressors.nrows();
        let mut k_star = Array1::<T>::zeros(n);
        for i in 0..n {
            k_star[i] = kern(self.regressors.row(i), x_star.view(), &self.kernel)?;
        }
        let mean = k_star.dot(&self.alpha);
        let v = chol_solve_vec(&self.chol, &k_star);
        let variance = (self.kernel.signal_variance - k_star.dot(&v)).max(T::zero());
        Ok(StepMoments { mean, variance })
    }

    /// Predictive moments of the observed output (noise added).
    pub fn predict_observed(&self, x_star: &Array1<T>) -> Result<StepMoments<T>> {
        let m = self.predict(x_star)?;
        Ok(StepMoments {
            mean: m.mean,
            variance: m.variance + self.noise_variance,
        })
    }

    /// Free simulation over `u_test`, feeding predicted means back into the
    /// autoregressive window. `seed_window` must hold the first
    /// `max(L, Lu)` true outputs of the test sequence.
    pub fn simulate(&self, u_test: &Array1<T>, seed_window: &[T]) -> Result<Vec<StepMoments<T>>> {
        let t0 = self.lag.max(self.input_lag);
        let n = u_test.len();
        if seed_window.len() != t0 {
            return Err(Error::Shape(format!(
                "seed window needs {} values, got {}",
                t0,
                seed_window.len()
            )));
        }
        if n <= t0 {
            return Err(Error::Shape(format!(
                "test sequence length {n} does not exceed max lag {t0}"
            )));
        }
        let mut y_hat: Vec<T> = seed_window.to_vec();
        let mut out = Vec::with_capacity(n - t0);
        for t in t0..n {
            let mut row = Array1::<T>::zeros(self.lag + self.input_lag);
            for d in 0..self.lag {
                row[d] = y_hat[t - 1 - d];
            }
            for d in 0..self.input_lag {
                row[self.lag + d] = u_test[t - 1 - d];
            }
            let m = self.predict_observed(&row)?;
            y_hat.push(m.mean);
            out.push(m);
        }
        Ok(out)
    }
}
