//! L-BFGS maximizer with backtracking line search.
//!
//! The objective callback returns the value and gradient together (they share
//! almost all their work in this crate). Failed evaluations (`Err` or
//! non-finite values) are treated as line-search rejections, which is how
//! transient Cholesky failures during aggressive steps are absorbed.
//! Accepted iterates never decrease the objective.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::Array1;
use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    /// History pairs kept for the two-loop recursion.
    pub memory: usize,
    /// Budget of objective evaluations.
    pub max_evals: usize,
    /// Terminate when the (masked) gradient norm drops below this.
    pub grad_tol: f64,
    /// Armijo sufficient-increase constant.
    pub armijo_c1: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 20,
            max_evals: 500,
            grad_tol: 1e-3,
            armijo_c1: 1e-4,
        }
    }
}

/// One accepted iterate: evaluation counter, objective value, gradient norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint<T> {
    pub eval: usize,
    pub value: T,
    pub grad_norm: T,
}

#[derive(Debug, Clone)]
pub struct OptimOutcome<T> {
    pub x: Array1<T>,
    pub value: T,
    pub grad_norm: T,
    pub evals: usize,
    pub converged: bool,
    pub trace: Vec<TracePoint<T>>,
}

fn norm<T: Scalar>(v: &Array1<T>) -> T {
    v.iter().map(|x| *x * *x).sum::<T>().sqrt()
}

fn apply_mask<T: Scalar>(g: &mut Array1<T>, mask: Option<&[bool]>) {
    if let Some(mask) = mask {
        for (gi, keep) in g.iter_mut().zip(mask.iter()) {
            if !keep {
                *gi = T::zero();
            }
        }
    }
}

/// Maximize `f` starting from `x0`.
///
/// `mask[i] = false` freezes coordinate `i`. `eval_offset` shifts the
/// evaluation counter recorded in the trace so that phased runs share one
/// budget axis.
pub fn maximize<T, F>(
    mut f: F,
    x0: Array1<T>,
    mask: Option<&[bool]>,
    opts: &LbfgsOptions,
    eval_offset: usize,
) -> Result<OptimOutcome<T>>
where
    T: Scalar,
    F: FnMut(&Array1<T>) -> Result<(T, Array1<T>)>,
{
    if let Some(m) = mask {
        if m.len() != x0.len() {
            return Err(Error::Shape("mask length must match parameter count".into()));
        }
    }
    let mut evals = 0usize;
    let mut eval = |x: &Array1<T>, evals: &mut usize| -> Result<(T, Array1<T>)> {
        *evals += 1;
        let (v, mut g) = f(x)?;
        apply_mask(&mut g, mask);
        Ok((v, g))
    };

    let mut x = x0;
    let (mut value, mut grad) = eval(&x, &mut evals)?;
    if !value.is_finite() {
        return Err(Error::Training("objective not finite at the start".into()));
    }
    let mut trace = vec![TracePoint {
        eval: eval_offset + evals,
        value,
        grad_norm: norm(&grad),
    }];

    let mut hist: VecDeque<(Array1<T>, Array1<T>, T)> = VecDeque::new();
    let c1 = T::cast(opts.armijo_c1);
    let mut converged = norm(&grad).to_f64_lossy() < opts.grad_tol;
    let mut steepest_retry = false;

    while !converged && evals < opts.max_evals {
        // two-loop recursion for the ascent direction H·g
        let mut dir = grad.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, yv, rho) in hist.iter().rev() {
            let a = *rho * s.dot(&dir);
            dir = dir - yv.mapv(|v| v * a);
            alphas.push(a);
        }
        if let Some((s, yv, _)) = hist.back() {
            let gamma = s.dot(yv) / yv.dot(yv);
            if gamma.is_finite() && gamma > T::zero() {
                dir = dir.mapv(|v| v * gamma);
            }
        }
        for ((s, yv, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = *rho * yv.dot(&dir);
            dir = dir + s.mapv(|v| v * (*a - b));
        }

        let mut slope = grad.dot(&dir);
        if !(slope > T::zero()) || !slope.is_finite() {
            // stale curvature; fall back to normalized steepest ascent
            hist.clear();
            let gnorm = norm(&grad).max(T::one());
            dir = grad.mapv(|v| v / gnorm);
            slope = grad.dot(&dir);
            if !(slope > T::zero()) {
                break;
            }
        }

        // backtracking Armijo line search with expansion on first-try hits
        let mut step = T::one();
        let mut accepted = None;
        let mut backtracked = false;
        while evals < opts.max_evals {
            let cand = &x + &dir.mapv(|v| v * step);
            match eval(&cand, &mut evals) {
                Ok((v, g)) if v.is_finite() && v >= value + c1 * step * slope => {
                    accepted = Some((cand, v, g));
                    break;
                }
                _ => {
                    backtracked = true;
                    step *= T::cast(0.5);
                    if step.to_f64_lossy() < 1e-18 {
                        break;
                    }
                }
            }
        }
        if let Some((_, v0, _)) = &accepted {
            if !backtracked {
                // the unit step was already good; probe longer steps while
                // they keep improving
                let mut best_v = *v0;
                for _ in 0..5 {
                    if evals >= opts.max_evals {
                        break;
                    }
                    let longer = step * T::cast(2.0);
                    let cand = &x + &dir.mapv(|v| v * longer);
                    match eval(&cand, &mut evals) {
                        Ok((v, g)) if v.is_finite() && v > best_v => {
                            best_v = v;
                            step = longer;
                            accepted = Some((cand, v, g));
                        }
                        _ => break,
                    }
                }
            }
        }

        match accepted {
            Some((xn, vn, gn)) => {
                let s = &xn - &x;
                let yv = &gn - &grad;
                let sy = s.dot(&yv);
                let floor = T::cast(1e-12) * norm(&s) * norm(&yv);
                // maximizing: curvature pairs need sᵀ(∇new − ∇old) < 0
                if sy < -floor {
                    if hist.len() >= opts.memory {
                        hist.pop_front();
                    }
                    let rho = T::one() / sy;
                    hist.push_back((s, yv, rho));
                }
                x = xn;
                value = vn;
                grad = gn;
                let gnorm = norm(&grad);
                trace.push(TracePoint {
                    eval: eval_offset + evals,
                    value,
                    grad_norm: gnorm,
                });
                converged = gnorm.to_f64_lossy() < opts.grad_tol;
                steepest_retry = false;
            }
            None => {
                if steepest_retry || hist.is_empty() {
                    break; // line search failed along steepest ascent too
                }
                hist.clear();
                steepest_retry = true;
            }
        }
    }

    Ok(OptimOutcome {
        grad_norm: norm(&grad),
        x,
        value,
        evals,
        converged,
        trace,
    })
}
