//! Shared oracles for the integration and acceptance suites.
//!
//! Everything here deliberately avoids the library's computational paths:
//! expectations are done by Monte Carlo or one-dimensional quadrature,
//! matrix inversion by Gauss-Jordan elimination, so that agreement with the
//! library is evidence rather than tautology.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use revarb::kernel::KernelParams;
use revarb::model::RevarbState;
use revarb::psi::UncertainInputSet;
use revarb::scalar::Scalar;

// ---------------------------------------------------------------------------
// naive linear algebra (Gauss-Jordan with partial pivoting)
// ---------------------------------------------------------------------------

/// Inverse and log|A| via Gauss-Jordan elimination.
pub fn gauss_jordan_inverse(a: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = Array2::<f64>::eye(n);
    let mut logdet = 0.0f64;
    let mut sign = 1.0f64;
    for col in 0..n {
        // partial pivot
        let mut pivot_row = col;
        for r in (col + 1)..n {
            if m[(r, col)].abs() > m[(pivot_row, col)].abs() {
                pivot_row = r;
            }
        }
        if pivot_row != col {
            sign = -sign;
            for c in 0..n {
                m.swap((col, c), (pivot_row, c));
                inv.swap((col, c), (pivot_row, c));
            }
        }
        let p = m[(col, col)];
        assert!(p != 0.0, "singular matrix in naive inverse");
        logdet += p.abs().ln();
        if p < 0.0 {
            sign = -sign;
        }
        for c in 0..n {
            m[(col, c)] /= p;
            inv[(col, c)] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[(r, col)];
                if f != 0.0 {
                    for c in 0..n {
                        m[(r, c)] -= f * m[(col, c)];
                        inv[(r, c)] -= f * inv[(col, c)];
                    }
                }
            }
        }
    }
    assert!(sign > 0.0, "negative determinant for a supposedly PD matrix");
    (inv, logdet)
}

// ---------------------------------------------------------------------------
// quadrature Ψ statistics
// ---------------------------------------------------------------------------

/// ∫ f(x) N(x | mean, var) dx by composite Simpson over ±12σ.
/// Collapses to a point evaluation for (near-)zero variance.
pub fn gauss_expect<F: Fn(f64) -> f64>(f: F, mean: f64, var: f64) -> f64 {
    if var < 1e-300 {
        return f(mean);
    }
    let sd = var.sqrt();
    let lo = mean - 12.0 * sd;
    let hi = mean + 12.0 * sd;
    let segments = 16_384usize; // even
    let h = (hi - lo) / segments as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
    let dens = |x: f64| norm * (-(x - mean) * (x - mean) / (2.0 * var)).exp();
    let mut acc = f(lo) * dens(lo) + f(hi) * dens(hi);
    for k in 1..segments {
        let x = lo + h * k as f64;
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(x) * dens(x);
    }
    acc * h / 3.0
}

/// Ψ1 entry ⟨k(x, ζ_m)⟩ by per-dimension quadrature (the expectation
/// factorizes over independent dimensions).
pub fn psi1_entry_quadrature(
    mean: &[f64],
    var: &[f64],
    zeta: &[f64],
    sf2: f64,
    w: &[f64],
) -> f64 {
    let mut prod = sf2;
    for d in 0..mean.len() {
        let (zd, wd) = (zeta[d], w[d]);
        prod *= gauss_expect(
            |x| (-0.5 * wd * (x - zd) * (x - zd)).exp(),
            mean[d],
            var[d],
        );
    }
    prod
}

/// Ψ2 per-row term ⟨k(x, ζ_m) k(x, ζ_m')⟩ by per-dimension quadrature.
pub fn psi2_entry_quadrature(
    mean: &[f64],
    var: &[f64],
    zeta_a: &[f64],
    zeta_b: &[f64],
    sf2: f64,
    w: &[f64],
) -> f64 {
    let mut prod = sf2 * sf2;
    for d in 0..mean.len() {
        let (za, zb, wd) = (zeta_a[d], zeta_b[d], w[d]);
        prod *= gauss_expect(
            |x| (-0.5 * wd * ((x - za) * (x - za) + (x - zb) * (x - zb))).exp(),
            mean[d],
            var[d],
        );
    }
    prod
}

// ---------------------------------------------------------------------------
// naive bound transcription (one hidden layer)
// ---------------------------------------------------------------------------

/// Independent evaluation of the full bound for an H = 1 model: regressor
/// windows sliced directly, Ψ statistics by quadrature, inverses and log
/// determinants by Gauss-Jordan.
pub fn naive_bound_h1(state: &RevarbState<f64>, u: &Array1<f64>, y: &Array1<f64>) -> f64 {
    assert_eq!(state.config.hidden_layers, 1, "naive oracle covers H = 1");
    let lag = state.config.lag;
    let lag_u = state.config.input_lag;
    let n = state.n;
    let r0 = lag.max(lag_u);
    let rows = n - r0;
    let m = state.config.num_inducing;
    let v0 = &state.variational[0];

    let mut total = 0.0f64;
    for layer in 0..2usize {
        let params = &state.layers[layer];
        let sf2 = params.kernel.signal_variance;
        let w: Vec<f64> = params.kernel.ard_weights.to_vec();
        let sigma2 = params.noise_variance;
        let zeta = &params.inducing.pseudo_inputs;
        let dim = if layer == 0 { lag + lag_u } else { lag };

        // regressor windows straight from the definition
        let mut means = vec![vec![0.0f64; dim]; rows];
        let mut vars = vec![vec![0.0f64; dim]; rows];
        for (row, t) in (r0..n).enumerate() {
            if layer == 0 {
                for d in 0..lag {
                    means[row][d] = v0.means[t - 1 - d];
                    vars[row][d] = v0.variances[t - 1 - d];
                }
                for d in 0..lag_u {
                    means[row][lag + d] = u[t - 1 - d];
                    vars[row][lag + d] = 0.0;
                }
            } else {
                for d in 0..lag {
                    means[row][d] = v0.means[t - d];
                    vars[row][d] = v0.variances[t - d];
                }
            }
        }

        // K_z with the same relative jitter policy
        let mut kz = Array2::<f64>::zeros((m, m));
        for a in 0..m {
            for b in 0..m {
                let mut s = 0.0;
                for d in 0..dim {
                    let delta = zeta[(a, d)] - zeta[(b, d)];
                    s += w[d] * delta * delta;
                }
                kz[(a, b)] = sf2 * (-0.5 * s).exp();
            }
            kz[(a, a)] += state.config.jitter * sf2;
        }

        // Ψ statistics by quadrature
        let psi0 = rows as f64 * sf2;
        let mut psi1 = Array2::<f64>::zeros((rows, m));
        for i in 0..rows {
            for a in 0..m {
                psi1[(i, a)] = psi1_entry_quadrature(
                    &means[i],
                    &vars[i],
                    &zeta.row(a).to_vec(),
                    sf2,
                    &w,
                );
            }
        }
        let mut psi2 = Array2::<f64>::zeros((m, m));
        for a in 0..m {
            for b in 0..m {
                let mut s = 0.0;
                for i in 0..rows {
                    s += psi2_entry_quadrature(
                        &means[i],
                        &vars[i],
                        &zeta.row(a).to_vec(),
                        &zeta.row(b).to_vec(),
                        sf2,
                        &w,
                    );
                }
                psi2[(a, b)] = s;
            }
        }

        let o: Vec<f64> = if layer == 0 {
            (r0..n).map(|t| v0.means[t]).collect()
        } else {
            (r0..n).map(|t| y[t]).collect()
        };
        let s_lambda: f64 = if layer == 0 {
            (r0..n).map(|t| v0.variances[t]).sum()
        } else {
            0.0
        };

        let (kz_inv, kz_logdet) = gauss_jordan_inverse(&kz);
        let mut a_mat = kz.clone();
        for aa in 0..m {
            for bb in 0..m {
                a_mat[(aa, bb)] += psi2[(aa, bb)] / sigma2;
            }
        }
        let (a_inv, a_logdet) = gauss_jordan_inverse(&a_mat);

        let mut tr = 0.0;
        for aa in 0..m {
            for bb in 0..m {
                tr += kz_inv[(aa, bb)] * psi2[(bb, aa)];
            }
        }
        let oo: f64 = o.iter().map(|v| v * v).sum();
        // c = Ψ1ᵀ o, then quad = cᵀ A⁻¹ c / (2σ⁴)
        let mut c = vec![0.0f64; m];
        for aa in 0..m {
            for i in 0..rows {
                c[aa] += psi1[(i, aa)] * o[i];
            }
        }
        let mut quad = 0.0;
        for aa in 0..m {
            for bb in 0..m {
                quad += c[aa] * a_inv[(aa, bb)] * c[bb];
            }
        }

        total += -(rows as f64) / 2.0 * (2.0 * std::f64::consts::PI * sigma2).ln()
            - (oo + s_lambda + psi0 - tr) / (2.0 * sigma2)
            + 0.5 * kz_logdet
            - 0.5 * a_logdet
            + quad / (2.0 * sigma2 * sigma2);
    }

    // entropies over the whole latent sequence
    for t in 0..n {
        total += 0.5
            * (2.0 * std::f64::consts::PI * std::f64::consts::E * v0.variances[t]).ln();
    }
    // initial-state cross-entropies against the trainable priors
    for i in 0..lag {
        let diff = v0.means[i] - v0.prior_means[i];
        total += -0.5 * (2.0 * std::f64::consts::PI * v0.prior_variances[i]).ln()
            - (v0.variances[i] + diff * diff) / (2.0 * v0.prior_variances[i]);
    }
    total
}

// ---------------------------------------------------------------------------
// Monte-Carlo Ψ oracle
// ---------------------------------------------------------------------------

pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Monte-Carlo estimates of Ψ1 and Ψ2 with per-entry standard errors,
/// sampling each row's diagonal Gaussian directly from the defining
/// expectations.
pub fn mc_psi(
    q: &UncertainInputSet<f64>,
    z: &Array2<f64>,
    params: &KernelParams<f64>,
    samples: usize,
    seed: u64,
) -> (Vec<Vec<McEstimate>>, Vec<Vec<McEstimate>>) {
    let n = q.len();
    let m = z.nrows();
    let dim = q.dim();
    let sf2 = params.signal_variance;
    let w = &params.ard_weights;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // accumulators: per (i, m) for Ψ1; per (i, m, m') for Ψ2 row terms
    let mut s1 = vec![vec![0.0f64; m]; n];
    let mut s1sq = vec![vec![0.0f64; m]; n];
    let mut s2 = vec![vec![vec![0.0f64; m]; m]; n];
    let mut s2sq = vec![vec![vec![0.0f64; m]; m]; n];

    let mut x = vec![0.0f64; dim];
    let mut k = vec![0.0f64; m];
    for _ in 0..samples {
        for i in 0..n {
            for d in 0..dim {
                let sd = q.variances[(i, d)].sqrt();
                x[d] = q.means[(i, d)] + sd * f64::standard_normal(&mut rng);
            }
            for a in 0..m {
                let mut s = 0.0;
                for d in 0..dim {
                    let delta = x[d] - z[(a, d)];
                    s += w[d] * delta * delta;
                }
                k[a] = sf2 * (-0.5 * s).exp();
            }
            for a in 0..m {
                s1[i][a] += k[a];
                s1sq[i][a] += k[a] * k[a];
                for b in 0..m {
                    let prod = k[a] * k[b];
                    s2[i][a][b] += prod;
                    s2sq[i][a][b] += prod * prod;
                }
            }
        }
    }

    let sn = samples as f64;
    let psi1_mc: Vec<Vec<McEstimate>> = (0..n)
        .map(|i| {
            (0..m)
                .map(|a| {
                    let mean = s1[i][a] / sn;
                    let var = (s1sq[i][a] / sn - mean * mean).max(0.0);
                    McEstimate {
                        value: mean,
                        std_error: (var / sn).sqrt(),
                    }
                })
                .collect()
        })
        .collect();
    // Ψ2[m, m'] sums row-wise independent estimates
    let psi2_mc: Vec<Vec<McEstimate>> = (0..m)
        .map(|a| {
            (0..m)
                .map(|b| {
                    let mut total = 0.0;
                    let mut var_total = 0.0;
                    for i in 0..n {
                        let mean = s2[i][a][b] / sn;
                        let var = (s2sq[i][a][b] / sn - mean * mean).max(0.0);
                        total += mean;
                        var_total += var / sn;
                    }
                    McEstimate {
                        value: total,
                        std_error: var_total.sqrt(),
                    }
                })
                .collect()
        })
        .collect();
    (psi1_mc, psi2_mc)
}

// ---------------------------------------------------------------------------
// Monte-Carlo predictive-moment oracle
// ---------------------------------------------------------------------------

/// Batch-mean Monte-Carlo estimate of the predictive mean and variance of a
/// sparse GP layer under a Gaussian input: sample the input, evaluate the
/// deterministic posterior, and combine the mixture moments.
pub fn mc_predict_moments(
    state: &RevarbState<f64>,
    qz: &revarb::bound::OptimalQz<f64>,
    layer: usize,
    mean_row: &Array1<f64>,
    var_row: &Array1<f64>,
    samples: usize,
    batches: usize,
    seed: u64,
) -> (McEstimate, McEstimate) {
    let params = &state.layers[layer];
    let z = &params.inducing.pseudo_inputs;
    let m = z.nrows();
    let dim = mean_row.len();
    let w = &params.kernel.ard_weights;
    let sf2 = params.kernel.signal_variance;
    let lq = &qz.layers[layer];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let per_batch = samples / batches;
    let mut batch_means = Vec::with_capacity(batches);
    let mut batch_vars = Vec::with_capacity(batches);
    let mut x = vec![0.0f64; dim];
    let mut k = Array1::<f64>::zeros(m);
    for _ in 0..batches {
        let mut sum_m = 0.0;
        let mut sum_m2 = 0.0;
        let mut sum_v = 0.0;
        for _ in 0..per_batch {
            for d in 0..dim {
                x[d] = mean_row[d] + var_row[d].sqrt() * f64::standard_normal(&mut rng);
            }
            for a in 0..m {
                let mut s = 0.0;
                for d in 0..dim {
                    let delta = x[d] - z[(a, d)];
                    s += w[d] * delta * delta;
                }
                k[a] = sf2 * (-0.5 * s).exp();
            }
            let mu = k.dot(&lq.b);
            let var = sf2 - k.dot(&lq.correction.dot(&k));
            sum_m += mu;
            sum_m2 += mu * mu;
            sum_v += var;
        }
        let pb = per_batch as f64;
        let mean_b = sum_m / pb;
        let var_b = (sum_m2 / pb - mean_b * mean_b).max(0.0) + sum_v / pb;
        batch_means.push(mean_b);
        batch_vars.push(var_b);
    }
    let est = |vals: &[f64]| {
        let nb = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / nb;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nb - 1.0);
        McEstimate {
            value: mean,
            std_error: (var / nb).sqrt(),
        }
    };
    (est(&batch_means), est(&batch_vars))
}

// ---------------------------------------------------------------------------
// prior-sampling evidence estimator (one hidden layer)
// ---------------------------------------------------------------------------

/// Estimate log p(y) for an H = 1 model by ancestral sampling from the
/// model's own priors: inducing outputs from N(0, K_z), initial latents from
/// the trainable priors, latents through the sequential conditionals, and a
/// closed-form Gaussian marginal for the observation layer.
///
/// Returns (log estimate, standard error on the log scale).
pub fn importance_log_evidence(
    state: &RevarbState<f64>,
    u: &Array1<f64>,
    y: &Array1<f64>,
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    assert_eq!(state.config.hidden_layers, 1);
    let cfg = &state.config;
    let lag = cfg.lag;
    let r0 = cfg.first_row();
    let n = state.n;
    let rows = n - r0;
    let m = cfg.num_inducing;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // layer caches
    let p0 = &state.layers[0];
    let p1 = &state.layers[1];
    let kz0 = revarb::kernel::gram(&p0.inducing.pseudo_inputs, &p0.kernel, cfg.jitter).unwrap();
    let kz1 = revarb::kernel::gram(&p1.inducing.pseudo_inputs, &p1.kernel, cfg.jitter).unwrap();
    let kz0_chol = kz0.cholesky().clone();
    let kz1_inv = revarb::linalg::chol_inverse(kz1.cholesky());
    let v0 = &state.variational[0];
    let y_obs: Vec<f64> = (r0..n).map(|t| y[t]).collect();

    let mut log_weights = Vec::with_capacity(samples);
    let mut xs = vec![0.0f64; n];
    for _ in 0..samples {
        // z ~ N(0, K_z) for the transition layer
        let xi = Array1::from_shape_fn(m, |_| f64::standard_normal(&mut rng));
        let z0 = kz0_chol.dot(&xi);
        let alpha0 = revarb::linalg::chol_solve_vec(&kz0_chol, &z0);

        // initial latents from the trainable priors
        for i in 0..lag {
            xs[i] = v0.prior_means[i]
                + v0.prior_variances[i].sqrt() * f64::standard_normal(&mut rng);
        }
        // sequential transitions
        for t in r0..n {
            let dim = cfg.layer_dim(0);
            let mut row = Array1::<f64>::zeros(dim);
            for d in 0..lag {
                row[d] = xs[t - 1 - d];
            }
            for d in 0..cfg.input_lag {
                row[lag + d] = u[t - 1 - d];
            }
            let rowm = row.insert_axis(ndarray::Axis(0));
            let kx = revarb::kernel::cross_gram(&rowm, &p0.inducing.pseudo_inputs, &p0.kernel)
                .unwrap();
            let krow = kx.row(0).to_owned();
            let mean_f = krow.dot(&alpha0);
            let sol = revarb::linalg::chol_solve_vec(&kz0_chol, &krow);
            let var_f = (p0.kernel.signal_variance - krow.dot(&sol)).max(0.0);
            let f = mean_f + var_f.sqrt() * f64::standard_normal(&mut rng);
            xs[t] = f + p0.noise_variance.sqrt() * f64::standard_normal(&mut rng);
        }

        // p(y | x) marginalizing the observation layer's inducing outputs
        let dim1 = cfg.layer_dim(1);
        let mut x1 = Array2::<f64>::zeros((rows, dim1));
        for (row, t) in (r0..n).enumerate() {
            for d in 0..lag {
                x1[(row, d)] = xs[t - d];
            }
        }
        let kfz = revarb::kernel::cross_gram(&x1, &p1.inducing.pseudo_inputs, &p1.kernel)
            .unwrap();
        // cov = Q + diag(σ_f² − q_ii) + σ²I with Q = K_fz K_z⁻¹ K_fzᵀ
        let mut cov = kfz.dot(&kz1_inv).dot(&kfz.t());
        for i in 0..rows {
            let qii = cov[(i, i)];
            cov[(i, i)] = qii
                + (p1.kernel.signal_variance - qii).max(0.0)
                + p1.noise_variance;
        }
        revarb::linalg::symmetrize(&mut cov);
        let chol = revarb::linalg::cholesky(&cov).expect("FITC covariance PD");
        let yv = Array1::from_vec(y_obs.clone());
        let alpha = revarb::linalg::chol_solve_vec(&chol, &yv);
        let logpdf = -0.5 * yv.dot(&alpha)
            - 0.5 * revarb::linalg::chol_logdet(&chol)
            - rows as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln();
        log_weights.push(logpdf);
    }

    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / samples as f64;
    let var = scaled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / samples as f64;
    let log_est = max + mean.ln();
    let se_log = (var / samples as f64).sqrt() / mean;
    (log_est, se_log)
}

// ---------------------------------------------------------------------------
// data helpers
// ---------------------------------------------------------------------------

pub fn smooth_series(n: usize, noise: f64, seed: u64) -> (Array1<f64>, Array1<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Array1::from_shape_fn(n, |i| (i as f64 * 0.3).sin());
    let mut y = Array1::<f64>::zeros(n);
    for i in 1..n {
        y[i] = 0.8 * y[i - 1] + 0.4 * u[i - 1] + noise * rng.gen_range(-1.0..1.0);
    }
    (u, y)
}
