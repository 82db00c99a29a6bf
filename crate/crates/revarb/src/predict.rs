//! Iterative multi-layer prediction with moment-based uncertainty
//! propagation, free simulation, and RMSE scoring.
//!
//! Each layer's predictive moments at a Gaussian regressor row are
//!
//! ```text
//! μ* = Ψ1*·B
//! λ* = Bᵀ(Ψ2* − Ψ1*ᵀΨ1*)B + Ψ0* − tr((K_z⁻¹ − (K_z + σ⁻²Ψ2)⁻¹)·Ψ2*)
//! ```
//!
//! and free simulation feeds `(μ*, λ*)` of every layer back into the next
//! step's regressor windows. No sampling is involved, so a trained state
//! simulates deterministically.

use crate::bound::OptimalQz;
use crate::error::{Error, Result};
use crate::model::{regressor_source, RegressorSource, RevarbState};
use crate::psi::{compute_psi, UncertainInputSet};
use crate::scalar::Scalar;
use ndarray::Array1;
use std::io::Write;

/// Predictive mean and variance of one layer at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMoments<T> {
    pub mean: T,
    pub variance: T,
}

/// One free-simulation step: per-layer moments plus the observed-output
/// prediction (variance includes the observation noise).
#[derive(Debug, Clone)]
pub struct SimStep<T> {
    /// Time index within the test sequence.
    pub index: usize,
    pub layer_moments: Vec<StepMoments<T>>,
    pub output_mean: T,
    pub output_variance: T,
}

/// Free-simulation result with the count of negative-variance clips.
#[derive(Debug, Clone)]
pub struct Simulation<T> {
    pub steps: Vec<SimStep<T>>,
    pub clip_events: usize,
}

/// Sparse predictive moments of layer `l` at one uncertain input row.
///
/// Returns the moments and whether the variance had to be clipped at zero.
pub fn predict_layer<T: Scalar>(
    state: &RevarbState<T>,
    qz: &OptimalQz<T>,
    l: usize,
    mean_row: &Array1<T>,
    var_row: &Array1<T>,
) -> Result<(StepMoments<T>, bool)> {
    let params = &state.layers[l];
    let dim = state.config.layer_dim(l);
    if mean_row.len() != dim || var_row.len() != dim {
        return Err(Error::Shape(format!(
            "predict_layer: layer {l} expects {dim} dims, got {}/{}",
            mean_row.len(),
            var_row.len()
        )));
    }
    let means = mean_row.clone().insert_axis(ndarray::Axis(0));
    let vars = var_row.clone().insert_axis(ndarray::Axis(0));
    let q = UncertainInputSet::new(means, vars)?;
    let psi = compute_psi(&q, &params.inducing.pseudo_inputs, &params.kernel)?;
    let lq = &qz.layers[l];

    let psi1 = psi.psi1.row(0).to_owned();
    let mean = psi1.dot(&lq.b);

    // Bᵀ(Ψ2* − Ψ1*ᵀΨ1*)B
    let b_psi2_b = lq.b.dot(&psi.psi2.dot(&lq.b));
    let psi1_b = psi1.dot(&lq.b);
    let spread = b_psi2_b - psi1_b * psi1_b;
    // tr(correction · Ψ2*)
    let trace = (&lq.correction * &psi.psi2).sum();
    let mut variance = spread + psi.psi0 - trace;
    let mut clipped = false;
    if variance < T::zero() {
        variance = T::zero();
        clipped = true;
    }
    Ok((StepMoments { mean, variance }, clipped))
}

/// All layers' moments at explicitly supplied per-layer rows.
pub fn predict_step<T: Scalar>(
    state: &RevarbState<T>,
    qz: &OptimalQz<T>,
    rows: &[(Array1<T>, Array1<T>)],
) -> Result<Vec<StepMoments<T>>> {
    if rows.len() != state.config.num_layers() {
        return Err(Error::Shape(format!(
            "predict_step: expected one row per layer ({}), got {}",
            state.config.num_layers(),
            rows.len()
        )));
    }
    rows.iter()
        .enumerate()
        .map(|(l, (m, v))| predict_layer(state, qz, l, m, v).map(|(s, _)| s))
        .collect()
}

/// Free simulation over a test input sequence.
///
/// `seeds` supplies the `L` initial latent moments per hidden layer for the
/// window positions immediately before the first predicted step; by default
/// they come from the trained initial-state priors. When
/// `propagate_uncertainty` is false the recursion feeds back means with zero
/// variance (moment propagation collapses to plain mean feedback).
pub fn free_simulate_with_mode<T: Scalar>(
    state: &RevarbState<T>,
    qz: &OptimalQz<T>,
    u_test: &Array1<T>,
    seeds: Option<&[Vec<(T, T)>]>,
    propagate_uncertainty: bool,
) -> Result<Simulation<T>> {
    let cfg = &state.config;
    let h = cfg.hidden_layers;
    let lag = cfg.lag;
    let t0 = cfg.first_row();
    let n = u_test.len();
    if n <= t0 {
        return Err(Error::Shape(format!(
            "test sequence length {n} does not exceed max lag {t0}"
        )));
    }
    if let Some(s) = seeds {
        if s.len() != h || s.iter().any(|v| v.len() != lag) {
            return Err(Error::Shape(format!(
                "seeds must provide {lag} values for each of {h} hidden layers"
            )));
        }
    }

    // hist[l][t] holds layer l's latent moments at absolute test time t;
    // positions t0-L..t0-1 are seeded, earlier positions stay unused.
    let mut hist: Vec<Vec<Option<(T, T)>>> = vec![vec![None; n]; h];
    for l in 0..h {
        for k in 0..lag {
            let (m, v) = match seeds {
                Some(s) => s[l][k],
                None => (
                    state.variational[l].prior_means[k],
                    state.variational[l].prior_variances[k],
                ),
            };
            hist[l][t0 - lag + k] = Some((m, v));
        }
    }

    let mut steps = Vec::with_capacity(n - t0);
    let mut clip_events = 0usize;
    for t in t0..n {
        let mut layer_moments = Vec::with_capacity(cfg.num_layers());
        for l in 0..cfg.num_layers() {
            let dim = cfg.layer_dim(l);
            let mut mean_row = Array1::<T>::zeros(dim);
            let mut var_row = Array1::<T>::zeros(dim);
            for d in 0..dim {
                let (m, v) = match regressor_source(cfg, l, t, d) {
                    RegressorSource::Latent { layer, index } => hist[layer][index]
                        .ok_or_else(|| {
                            Error::Shape(format!(
                                "free simulation: latent ({layer}, {index}) missing at step {t}"
                            ))
                        })?,
                    RegressorSource::Input { index } => (u_test[index], T::zero()),
                };
                mean_row[d] = m;
                var_row[d] = if propagate_uncertainty { v } else { T::zero() };
            }
            let (mut moments, clipped) = predict_layer(state, qz, l, &mean_row, &var_row)?;
            if clipped {
                clip_events += 1;
            }
            if !propagate_uncertainty {
                moments.variance = T::zero();
            }
            if l < h {
                hist[l][t] = Some((moments.mean, moments.variance));
            }
            layer_moments.push(moments);
        }
        let out = layer_moments[cfg.num_layers() - 1];
        steps.push(SimStep {
            index: t,
            layer_moments,
            output_mean: out.mean,
            output_variance: out.variance + state.layers[cfg.num_layers() - 1].noise_variance,
        });
    }
    Ok(Simulation { steps, clip_events })
}

/// Free simulation with uncertainty propagation (the standard mode).
pub fn free_simulate<T: Scalar>(
    state: &RevarbState<T>,
    qz: &OptimalQz<T>,
    u_test: &Array1<T>,
    seeds: Option<&[Vec<(T, T)>]>,
) -> Result<Simulation<T>> {
    free_simulate_with_mode(state, qz, u_test, seeds, true)
}

/// One-step-ahead predictions of the observed output on the training
/// sequence, with regressor windows teacher-forced from the trained
/// posterior instead of fed back recursively.
pub fn posterior_one_step<T: Scalar>(
    state: &RevarbState<T>,
    qz: &OptimalQz<T>,
    u: &Array1<T>,
) -> Result<Vec<StepMoments<T>>> {
    let l_out = state.config.num_layers() - 1;
    let q = crate::model::assemble_regressors(state, u, l_out)?;
    let noise = state.layers[l_out].noise_variance;
    let mut out = Vec::with_capacity(q.len());
    for r in 0..q.len() {
        let (mut m, _) = predict_layer(
            state,
            qz,
            l_out,
            &q.means.row(r).to_owned(),
            &q.variances.row(r).to_owned(),
        )?;
        m.variance += noise;
        out.push(m);
    }
    Ok(out)
}

/// Root mean squared error between two equally long sequences.
pub fn rmse<T: Scalar>(predicted: &[T], truth: &[T]) -> Result<T> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "rmse: lengths {} and {} disagree",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Shape("rmse needs at least one sample".into()));
    }
    let n = T::cast(predicted.len() as f64);
    let sse: T = predicted
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (*p - *t) * (*p - *t))
        .sum();
    Ok((sse / n).sqrt())
}

/// CSV emission: `step,mean,variance,truth` (truth column empty when not
/// provided).
pub fn write_predictions_csv<T: Scalar, W: Write>(
    w: W,
    steps: &[SimStep<T>],
    truth: Option<&[T]>,
) -> Result<()> {
    if let Some(t) = truth {
        if t.len() != steps.len() {
            return Err(Error::Shape(format!(
                "prediction csv: {} steps vs {} truth values",
                steps.len(),
                t.len()
            )));
        }
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["step", "mean", "variance", "truth"])?;
    for (k, s) in steps.iter().enumerate() {
        let truth_cell = truth
            .map(|t| format!("{:.17e}", t[k].to_f64_lossy()))
            .unwrap_or_default();
        wtr.write_record([
            s.index.to_string(),
            format!("{:.17e}", s.output_mean.to_f64_lossy()),
            format!("{:.17e}", s.output_variance.to_f64_lossy()),
            truth_cell,
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bound::recover_qz;
    use crate::kernel::cross_gram;
    use crate::model::ModelConfig;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained_tiny(
        h: usize,
        n: usize,
        seed: u64,
    ) -> (RevarbState<f64>, OptimalQz<f64>, Array1<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Array1::from_shape_fn(n, |i| (i as f64 * 0.4).sin());
        let mut y = Array1::zeros(n);
        for i in 1..n {
            y[i] = 0.7 * y[i - 1] + 0.4 * u[i - 1] + 0.03 * rng.gen_range(-1.0..1.0);
        }
        let config = ModelConfig::new(h, 2, 2, 4).unwrap();
        let opts = crate::trainer::TrainOptions {
            max_evals: 80,
            restarts: 1,
            seed,
            ..Default::default()
        };
        let (state, _) = crate::trainer::fit(&config, &u, &y, &opts).unwrap();
        let qz = recover_qz(&state, &u, &y).unwrap();
        (state, qz, u, y)
    }

    #[test]
    fn zero_variance_row_reduces_to_sparse_gp() {
        let (state, qz, _, _) = trained_tiny(1, 20, 1);
        for l in 0..state.config.num_layers() {
            let dim = state.config.layer_dim(l);
            let x = Array1::from_shape_fn(dim, |d| 0.3 * d as f64 - 0.2);
            let zero = Array1::zeros(dim);
            let (m, _) = predict_layer(&state, &qz, l, &x, &zero).unwrap();
            // deterministic sparse posterior at the same point
            let params = &state.layers[l];
            let xm = x.clone().insert_axis(ndarray::Axis(0));
            let kxz = cross_gram(&xm, &params.inducing.pseudo_inputs, &params.kernel).unwrap();
            let krow = kxz.row(0).to_owned();
            let mean_ref = krow.dot(&qz.layers[l].b);
            let var_ref = params.kernel.signal_variance
                - krow.dot(&qz.layers[l].correction.dot(&krow));
            assert_relative_eq!(m.mean, mean_ref, max_relative = 1e-10, epsilon = 1e-12);
            assert_relative_eq!(m.variance, var_ref, max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn far_input_reverts_to_prior() {
        let (state, qz, _, _) = trained_tiny(1, 20, 2);
        let l = state.config.num_layers() - 1;
        let dim = state.config.layer_dim(l);
        let far = Array1::from_elem(dim, 250.0);
        let zero = Array1::zeros(dim);
        let (m, _) = predict_layer(&state, &qz, l, &far, &zero).unwrap();
        let sf2 = state.layers[l].kernel.signal_variance;
        assert!(m.mean.abs() < 1e-6);
        assert_relative_eq!(m.variance, sf2, max_relative = 1e-6);
    }

    #[test]
    fn mean_only_mode_matches_hand_rolled_recursion() {
        let (state, qz, _, _) = trained_tiny(1, 24, 3);
        let n_test = 14;
        let u_test = Array1::from_shape_fn(n_test, |i| (i as f64 * 0.3).cos());
        let sim = free_simulate_with_mode(&state, &qz, &u_test, None, false).unwrap();

        // hand recursion with deterministic feedback
        let cfg = &state.config;
        let t0 = cfg.first_row();
        let mut lat = vec![0.0f64; n_test];
        for k in 0..cfg.lag {
            lat[t0 - cfg.lag + k] = state.variational[0].prior_means[k];
        }
        let mut outs = Vec::new();
        for t in t0..n_test {
            // layer 0
            let dim0 = cfg.layer_dim(0);
            let mut row = Array1::zeros(dim0);
            for d in 0..dim0 {
                row[d] = match regressor_source(cfg, 0, t, d) {
                    RegressorSource::Latent { index, .. } => lat[index],
                    RegressorSource::Input { index } => u_test[index],
                };
            }
            let (m0, _) =
                predict_layer(&state, &qz, 0, &row, &Array1::zeros(dim0)).unwrap();
            lat[t] = m0.mean;
            // output layer
            let dim1 = cfg.layer_dim(1);
            let mut row = Array1::zeros(dim1);
            for d in 0..dim1 {
                row[d] = match regressor_source(cfg, 1, t, d) {
                    RegressorSource::Latent { index, .. } => lat[index],
                    RegressorSource::Input { index } => u_test[index],
                };
            }
            let (m1, _) =
                predict_layer(&state, &qz, 1, &row, &Array1::zeros(dim1)).unwrap();
            outs.push(m1.mean);
        }
        assert_eq!(sim.steps.len(), outs.len());
        for (s, o) in sim.steps.iter().zip(outs.iter()) {
            assert_abs_diff_eq!(s.output_mean, *o, epsilon = 1e-12);
        }
    }

    #[test]
    fn windows_contain_previous_step_moments() {
        let (state, qz, _, _) = trained_tiny(2, 24, 4);
        let n_test = 12;
        let u_test = Array1::from_shape_fn(n_test, |i| (i as f64 * 0.5).sin());
        let sim = free_simulate(&state, &qz, &u_test, None).unwrap();
        // replay one interior step from the recorded moments
        let cfg = &state.config;
        let t0 = cfg.first_row();
        let probe = t0 + 4;
        let mut hist: Vec<Vec<(f64, f64)>> = vec![vec![(f64::NAN, f64::NAN); n_test]; 2];
        for l in 0..2 {
            for k in 0..cfg.lag {
                hist[l][t0 - cfg.lag + k] = (
                    state.variational[l].prior_means[k],
                    state.variational[l].prior_variances[k],
                );
            }
        }
        for s in &sim.steps {
            for l in 0..2 {
                hist[l][s.index] = (s.layer_moments[l].mean, s.layer_moments[l].variance);
            }
        }
        for l in 0..cfg.num_layers() {
            let dim = cfg.layer_dim(l);
            let mut mean_row = Array1::zeros(dim);
            let mut var_row = Array1::zeros(dim);
            for d in 0..dim {
                let (m, v) = match regressor_source(cfg, l, probe, d) {
                    RegressorSource::Latent { layer, index } => hist[layer][index],
                    RegressorSource::Input { index } => (u_test[index], 0.0),
                };
                assert!(m.is_finite(), "window pulled an unset moment");
                mean_row[d] = m;
                var_row[d] = v;
            }
            let (m, _) = predict_layer(&state, &qz, l, &mean_row, &var_row).unwrap();
            let recorded = sim.steps[probe - t0].layer_moments[l];
            assert_abs_diff_eq!(m.mean, recorded.mean, epsilon = 1e-12);
            assert_abs_diff_eq!(m.variance, recorded.variance, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_step_beats_free_simulation_on_training_data() {
        let (state, qz, u, y) = trained_tiny(1, 40, 5);
        let r0 = state.config.first_row();
        let truth: Vec<f64> = y.iter().skip(r0).copied().collect();
        let one_step = posterior_one_step(&state, &qz, &u).unwrap();
        let one_step_means: Vec<f64> = one_step.iter().map(|m| m.mean).collect();
        let sim = free_simulate(&state, &qz, &u, None).unwrap();
        let sim_means: Vec<f64> = sim.steps.iter().map(|s| s.output_mean).collect();
        let e_one = rmse(&one_step_means, &truth).unwrap();
        let e_free = rmse(&sim_means, &truth).unwrap();
        assert!(
            e_one < e_free,
            "one-step RMSE {e_one} should beat free-run RMSE {e_free}"
        );
    }

    #[test]
    fn simulation_is_deterministic() {
        let (state, qz, _, _) = trained_tiny(1, 20, 6);
        let u_test = Array1::from_shape_fn(10, |i| (i as f64 * 0.7).sin());
        let a = free_simulate(&state, &qz, &u_test, None).unwrap();
        let b = free_simulate(&state, &qz, &u_test, None).unwrap();
        for (sa, sb) in a.steps.iter().zip(b.steps.iter()) {
            assert_eq!(sa.output_mean, sb.output_mean);
            assert_eq!(sa.output_variance, sb.output_variance);
        }
    }

    #[test]
    fn rmse_basics() {
        let a = [1.0, 2.0, 3.0];
        assert_abs_diff_eq!(rmse(&a, &a).unwrap(), 0.0, epsilon = 1e-15);
        let b = [1.5, 2.5, 3.5];
        assert_abs_diff_eq!(rmse(&a, &b).unwrap(), 0.5, epsilon = 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let direct = (p
            .iter()
            .zip(t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 20.0)
            .sqrt();
        assert_abs_diff_eq!(rmse(&p, &t).unwrap(), direct, epsilon = 1e-15);
        assert!(rmse(&p[..3], &t).is_err());
    }

    #[test]
    fn output_variance_includes_noise() {
        let (state, qz, _, _) = trained_tiny(1, 20, 7);
        let u_test = Array1::from_shape_fn(10, |i| (i as f64 * 0.3).sin());
        let sim = free_simulate(&state, &qz, &u_test, None).unwrap();
        let noise = state.layers[state.config.num_layers() - 1].noise_variance;
        for s in &sim.steps {
            let latent = s.layer_moments[state.config.num_layers() - 1].variance;
            assert_abs_diff_eq!(s.output_variance, latent + noise, epsilon = 1e-15);
            assert!(s.output_variance >= noise - 1e-12);
        }
    }
}
