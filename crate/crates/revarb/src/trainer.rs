//! Gradient-based maximization of the bound with restarts, a two-phase
//! schedule and a finite-difference audit.

use crate::bound::{bound_grads, lower_bound};
use crate::error::{Error, Result};
use crate::model::{init_model, pack, packed_len, unpack, ModelConfig, RevarbState};
use crate::optimize::{maximize, LbfgsOptions, TracePoint};
use crate::scalar::Scalar;
use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Objective-evaluation budget per restart.
    pub max_evals: usize,
    /// Gradient-norm convergence threshold.
    pub convergence_tol: f64,
    /// Number of seeded restarts; the best final bound wins.
    pub restarts: usize,
    pub seed: u64,
    /// Evaluations of the initial phase with variational variances frozen.
    /// `None` uses 10% of the budget.
    pub fixed_variances_phase: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_evals: 500,
            convergence_tol: 1e-3,
            restarts: 1,
            seed: 0,
            fixed_variances_phase: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_evals == 0 {
            return Err(Error::Invalid("max_evals must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Invalid("restarts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn phase_one_evals(&self) -> usize {
        self.fixed_variances_phase
            .unwrap_or(self.max_evals / 10)
            .min(self.max_evals)
    }
}

/// Accepted-step record of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace<T> {
    pub records: Vec<TracePoint<T>>,
}

impl<T: Scalar> TrainTrace<T> {
    /// CSV with columns `evaluation,bound,grad_norm`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["evaluation", "bound", "grad_norm"])?;
        for r in &self.records {
            wtr.write_record([
                r.eval.to_string(),
                format!("{:.17e}", r.value.to_f64_lossy()),
                format!("{:.17e}", r.grad_norm.to_f64_lossy()),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn final_bound(&self) -> Option<T> {
        self.records.last().map(|r| r.value)
    }
}

/// Coordinate mask freezing the log-λ blocks of the packed vector.
fn variance_mask(config: &ModelConfig, n: usize) -> Vec<bool> {
    let mut mask = vec![true; packed_len(config, n)];
    let mut offset = 0usize;
    for _ in 0..config.hidden_layers {
        // [μ (n), log λ (n), μ0 (L), log λ0 (L)]
        for k in 0..n {
            mask[offset + n + k] = false;
        }
        offset += 2 * n + 2 * config.lag;
    }
    mask
}

/// Randomize a restart: rescale kernel hyperparameters and redraw the
/// inducing subset. Latent means stay at their deterministic initialization.
fn perturb_restart<T: Scalar>(
    config: &ModelConfig,
    u: &Array1<T>,
    y: &Array1<T>,
    base_seed: u64,
    restart: usize,
) -> Result<RevarbState<T>> {
    let seed = base_seed.wrapping_add(restart as u64);
    let mut state = init_model(config, u, y, seed)?;
    if restart > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        for p in &mut state.layers {
            let scale: f64 = rng.gen_range(-0.5..0.5);
            p.kernel.signal_variance *= T::cast(scale.exp());
            for w in p.kernel.ard_weights.iter_mut() {
                let s: f64 = rng.gen_range(-0.5..0.5);
                *w *= T::cast(s.exp());
            }
            let s: f64 = rng.gen_range(-0.5..0.5);
            p.noise_variance *= T::cast(s.exp());
        }
    }
    Ok(state)
}

fn run_single<T: Scalar>(
    state0: RevarbState<T>,
    u: &Array1<T>,
    y: &Array1<T>,
    opts: &TrainOptions,
) -> Result<(RevarbState<T>, TrainTrace<T>)> {
    let config = state0.config.clone();
    let n = state0.n;
    let objective = |x: &Array1<T>| -> Result<(T, Array1<T>)> {
        let st = unpack(x, &config, n)?;
        let (b, g) = bound_grads(&st, u, y)?;
        Ok((b.total, g.pack_log_space(&st)))
    };

    let phase1 = opts.phase_one_evals();
    let mut records = Vec::new();
    let mut x = pack(&state0);

    if phase1 > 0 {
        let mask = variance_mask(&config, n);
        let out = maximize(
            objective,
            x,
            Some(&mask),
            &LbfgsOptions {
                max_evals: phase1,
                grad_tol: opts.convergence_tol,
                ..Default::default()
            },
            0,
        )?;
        records.extend(out.trace);
        x = out.x;
    }

    let used = records.last().map(|r| r.eval).unwrap_or(0);
    if used < opts.max_evals {
        let out = maximize(
            objective,
            x,
            None,
            &LbfgsOptions {
                max_evals: opts.max_evals - used,
                grad_tol: opts.convergence_tol,
                ..Default::default()
            },
            used,
        )?;
        // the first record of phase two re-evaluates the phase-one endpoint
        let skip = usize::from(!records.is_empty());
        records.extend(out.trace.into_iter().skip(skip));
        x = out.x;
    }

    let state = unpack(&x, &config, n)?;
    Ok((state, TrainTrace { records }))
}

/// Fit the model: seeded restarts, two-phase schedule, monotone accepted
/// steps. Returns the restart with the best final bound.
pub fn fit<T: Scalar>(
    config: &ModelConfig,
    u: &Array1<T>,
    y: &Array1<T>,
    opts: &TrainOptions,
) -> Result<(RevarbState<T>, TrainTrace<T>)> {
    opts.validate()?;
    let mut best: Option<(RevarbState<T>, TrainTrace<T>)> = None;
    let mut failures = Vec::new();
    for r in 0..opts.restarts {
        let state0 = perturb_restart(config, u, y, opts.seed, r)?;
        match run_single(state0, u, y, opts) {
            Ok((state, trace)) => {
                let value = trace.final_bound().unwrap_or(T::neg_infinity());
                let better = match &best {
                    Some((_, t)) => value > t.final_bound().unwrap_or(T::neg_infinity()),
                    None => true,
                };
                if better {
                    best = Some((state, trace));
                }
            }
            Err(e) => failures.push(format!("restart {r}: {e}")),
        }
    }
    best.ok_or_else(|| Error::Training(format!("all restarts failed: {}", failures.join("; "))))
}

/// Budget of cheap supervised evaluations for net distillation.
const DISTILL_EVALS: usize = 6000;

/// Fit the recognition-constrained model: means come from per-layer nets,
/// weights are trained jointly with the remaining free parameters.
///
/// Each restart runs a three-stage schedule against one shared evaluation
/// budget: an unconstrained teacher fit, a cheap supervised distillation of
/// the nets onto the teacher's mean trajectories, and the constrained
/// optimization itself (first with weights frozen around the distilled
/// recursion, then jointly over everything). The recorded trace covers the
/// constrained stages, offset by the teacher's consumption.
///
/// Returns the materialized state (means filled by the final nets), the nets
/// themselves and the trace of the winning restart.
pub fn fit_with_recognition<T: Scalar>(
    config: &ModelConfig,
    rec: &crate::recognition::RecognitionConfig,
    u: &Array1<T>,
    y: &Array1<T>,
    opts: &TrainOptions,
) -> Result<(
    RevarbState<T>,
    Vec<crate::recognition::RecognitionNet<T>>,
    TrainTrace<T>,
)> {
    use crate::recognition::{
        flat_len, rec_pack, rec_pack_grads, rec_unpack, recognition_forward,
        recognition_grads, RecognitionNet,
    };
    opts.validate()?;
    rec.validate()?;
    let n = y.len();
    let window = rec.window;

    // budget split: teacher 45%, frozen-weights 20%, joint the rest
    let teacher_evals = (opts.max_evals * 9 / 20).max(1);
    let frozen_evals = (opts.max_evals / 5).max(1);

    let mut best: Option<(RevarbState<T>, Vec<RecognitionNet<T>>, TrainTrace<T>)> = None;
    let mut failures = Vec::new();
    for r in 0..opts.restarts {
        let run = (|| -> Result<(RevarbState<T>, Vec<RecognitionNet<T>>, TrainTrace<T>)> {
            // stage 1: unconstrained teacher
            let state0 = perturb_restart(config, u, y, opts.seed, r)?;
            let teacher_opts = TrainOptions {
                max_evals: teacher_evals,
                ..opts.clone()
            };
            let (teacher, teacher_trace) = run_single(state0, u, y, &teacher_opts)?;
            let teacher_used = teacher_trace.records.last().map(|r| r.eval).unwrap_or(0);

            // stage 2: distill the nets onto the teacher's mean trajectories
            let mut rng =
                ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(r as u64) ^ 0x52454347);
            let nets0: Vec<RecognitionNet<T>> = (0..config.hidden_layers)
                .map(|l| RecognitionNet::init(config.layer_dim(l), rec, &mut rng))
                .collect();
            let teacher_means: Vec<Array1<T>> = teacher
                .variational
                .iter()
                .map(|v| v.means.clone())
                .collect();
            let nets0 = crate::recognition::distill_nets(
                config,
                rec,
                u,
                &teacher_means,
                nets0,
                DISTILL_EVALS,
            )?;

            // stage 3: constrained optimization from the transplanted state
            let objective = |x: &Array1<T>| -> Result<(T, Array1<T>)> {
                let (template, nets) = rec_unpack(x, config, n, rec)?;
                let (b, sg, ng) = recognition_grads(&template, &nets, window, u, y)?;
                Ok((b.total, rec_pack_grads(&template, &sg, &ng, window)))
            };
            let mut x = rec_pack(&teacher, &nets0, window);
            let weight_len: usize = (0..config.hidden_layers)
                .map(|l| flat_len(config.layer_dim(l), rec.depth, rec.width))
                .sum();
            let mut weight_mask = vec![true; x.len()];
            for k in (x.len() - weight_len)..x.len() {
                weight_mask[k] = false;
            }
            let mut records = Vec::new();
            let out = maximize(
                &objective,
                x,
                Some(&weight_mask),
                &LbfgsOptions {
                    max_evals: frozen_evals,
                    grad_tol: opts.convergence_tol,
                    ..Default::default()
                },
                teacher_used,
            )?;
            records.extend(out.trace);
            x = out.x;
            let used = records.last().map(|r| r.eval).unwrap_or(teacher_used);
            if used < opts.max_evals {
                let out = maximize(
                    &objective,
                    x,
                    None,
                    &LbfgsOptions {
                        max_evals: opts.max_evals - used,
                        grad_tol: opts.convergence_tol,
                        ..Default::default()
                    },
                    used,
                )?;
                let skip = usize::from(!records.is_empty());
                records.extend(out.trace.into_iter().skip(skip));
                x = out.x;
            }
            let (template, nets) = rec_unpack(&x, config, n, rec)?;
            let state = recognition_forward(&template, &nets, window, u)?;
            Ok((state, nets, TrainTrace { records }))
        })();
        match run {
            Ok((state, nets, trace)) => {
                let value = trace.final_bound().unwrap_or(T::neg_infinity());
                let better = match &best {
                    Some((_, _, t)) => value > t.final_bound().unwrap_or(T::neg_infinity()),
                    None => true,
                };
                if better {
                    best = Some((state, nets, trace));
                }
            }
            Err(e) => failures.push(format!("restart {r}: {e}")),
        }
    }
    best.ok_or_else(|| Error::Training(format!("all restarts failed: {}", failures.join("; "))))
}

/// Worst relative error of one gradient block.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub worst_rel_err: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Finite-difference audit of the bound gradient, grouped per parameter
/// block.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    /// Names of blocks whose worst relative error exceeds the tolerance.
    pub fn flagged(&self) -> Vec<String> {
        self.blocks
            .iter()
            .filter(|b| b.worst_rel_err > self.tolerance)
            .map(|b| b.name.clone())
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.worst_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Block labels aligned with the packed layout.
fn block_labels(config: &ModelConfig, n: usize) -> Vec<(String, usize)> {
    let mut blocks = Vec::new();
    for l in 0..config.hidden_layers {
        blocks.push((format!("mu[{l}]"), n));
        blocks.push((format!("lambda[{l}]"), n));
        blocks.push((format!("mu0[{l}]"), config.lag));
        blocks.push((format!("lambda0[{l}]"), config.lag));
    }
    for l in 0..config.num_layers() {
        let d = config.layer_dim(l);
        blocks.push((format!("signal_variance[{l}]"), 1));
        blocks.push((format!("ard_weights[{l}]"), d));
        blocks.push((format!("noise_variance[{l}]"), 1));
        blocks.push((format!("inducing[{l}]"), config.num_inducing * d));
    }
    blocks
}

/// Compare analytic bound gradients to central finite differences taken on
/// the packed (log-transformed) parameter vector.
pub fn grad_check<T: Scalar>(
    state: &RevarbState<T>,
    u: &Array1<T>,
    y: &Array1<T>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = bound_grads(state, u, y)?;
    let analytic = grads.pack_log_space(state);
    let x0 = pack(state);
    let config = &state.config;
    let h = T::cast(step);

    let mut report = GradCheckReport {
        blocks: Vec::new(),
        tolerance,
    };
    let mut offset = 0usize;
    for (name, len) in block_labels(config, state.n) {
        let mut worst = BlockReport {
            name: name.clone(),
            worst_rel_err: 0.0,
            worst_coordinate: offset,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in offset..offset + len {
            let mut xp = x0.clone();
            xp[k] += h;
            let mut xm = x0.clone();
            xm[k] -= h;
            let fp = lower_bound(&unpack(&xp, config, state.n)?, u, y)?.total;
            let fm = lower_bound(&unpack(&xm, config, state.n)?, u, y)?.total;
            let fd = ((fp - fm) / (T::cast(2.0) * h)).to_f64_lossy();
            let an = analytic[k].to_f64_lossy();
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            if rel > worst.worst_rel_err {
                worst.worst_rel_err = rel;
                worst.worst_coordinate = k;
                worst.analytic = an;
                worst.numeric = fd;
            }
        }
        report.blocks.push(worst);
        offset += len;
    }
    Ok(report)
}
