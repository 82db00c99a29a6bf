//! Expectations Ψ0, Ψ1, Ψ2 of kernel quantities under diagonal-Gaussian
//! uncertain inputs, in closed form, plus the adjoint backward pass used by
//! the bound gradients.
//!
//! For the exponentiated quadratic kernel the per-row expectations factorize
//! over dimensions; with `t_d = 1 + w_d λ_d` and `r_d = 1 + 2 w_d λ_d`:
//!
//! ```text
//! Ψ0        = N σ_f²
//! Ψ1[i,m]   = σ_f²  Π_d t_d^{-1/2} exp(−½ w_d (μ_d − ζ_{m,d})² / t_d)
//! Ψ2[m,m']  = σ_f⁴ Σ_i Π_d r_d^{-1/2} exp(−¼ w_d (ζ_{m,d} − ζ_{m',d})²
//!                                          − w_d (μ_d − c_d)² / r_d)
//! ```
//!
//! where `c = (ζ_m + ζ_{m'})/2`. Dimensions with zero variance reduce exactly
//! to plain kernel evaluations, which is how observed inputs are carried
//! through the same code path.

use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};

/// Rows of per-dimension Gaussian means and variances. Zero-variance entries
/// mark deterministic dimensions.
#[derive(Debug, Clone)]
pub struct UncertainInputSet<T> {
    pub means: Array2<T>,
    pub variances: Array2<T>,
}

impl<T: Scalar> UncertainInputSet<T> {
    pub fn new(means: Array2<T>, variances: Array2<T>) -> Result<Self> {
        if means.dim() != variances.dim() {
            return Err(Error::Shape(format!(
                "uncertain inputs: means {:?} vs variances {:?}",
                means.dim(),
                variances.dim()
            )));
        }
        if variances.iter().any(|v| *v < T::zero() || !v.is_finite()) {
            return Err(Error::Invalid(
                "uncertain input variances must be nonnegative and finite".into(),
            ));
        }
        Ok(Self { means, variances })
    }

    /// Point inputs: all variances zero.
    pub fn deterministic(means: Array2<T>) -> Self {
        let variances = Array2::zeros(means.dim());
        Self { means, variances }
    }

    pub fn len(&self) -> usize {
        self.means.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.means.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }
}

/// The Ψ triple for one layer.
#[derive(Debug, Clone)]
pub struct PsiStats<T> {
    pub psi0: T,
    pub psi1: Array2<T>,
    pub psi2: Array2<T>,
}

fn check_dims<T: Scalar>(
    q: &UncertainInputSet<T>,
    z: &Array2<T>,
    params: &KernelParams<T>,
) -> Result<()> {
    params.validate()?;
    if q.dim() != z.ncols() || q.dim() != params.dim() {
        return Err(Error::Shape(format!(
            "psi: input dim {}, inducing dim {}, kernel dim {}",
            q.dim(),
            z.ncols(),
            params.dim()
        )));
    }
    Ok(())
}

/// Closed-form Ψ statistics.
pub fn compute_psi<T: Scalar>(
    q: &UncertainInputSet<T>,
    z: &Array2<T>,
    params: &KernelParams<T>,
) -> Result<PsiStats<T>> {
    check_dims(q, z, params)?;
    let (n, m, dim) = (q.len(), z.nrows(), q.dim());
    let sf2 = params.signal_variance;
    let w = &params.ard_weights;
    let half = T::cast(0.5);
    let quarter = T::cast(0.25);

    let psi0 = T::cast(n as f64) * sf2;

    let mut psi1 = Array2::<T>::zeros((n, m));
    for i in 0..n {
        for mm in 0..m {
            let mut log_term = T::zero();
            for d in 0..dim {
                let t = T::one() + w[d] * q.variances[(i, d)];
                let delta = q.means[(i, d)] - z[(mm, d)];
                log_term -= half * t.ln() + half * w[d] * delta * delta / t;
            }
            psi1[(i, mm)] = sf2 * log_term.exp();
        }
    }

    let sf4 = sf2 * sf2;
    let mut psi2 = Array2::<T>::zeros((m, m));
    for ma in 0..m {
        for mb in ma..m {
            let mut total = T::zero();
            for i in 0..n {
                let mut log_term = T::zero();
                for d in 0..dim {
                    let r = T::one() + T::cast(2.0) * w[d] * q.variances[(i, d)];
                    let dz = z[(ma, d)] - z[(mb, d)];
                    let c = half * (z[(ma, d)] + z[(mb, d)]);
                    let dm = q.means[(i, d)] - c;
                    log_term -= half * r.ln() + quarter * w[d] * dz * dz + w[d] * dm * dm / r;
                }
                total += log_term.exp();
            }
            let v = sf4 * total;
            psi2[(ma, mb)] = v;
            psi2[(mb, ma)] = v;
        }
    }

    Ok(PsiStats { psi0, psi1, psi2 })
}

/// Gradients produced by [`psi_backward`].
#[derive(Debug, Clone)]
pub struct PsiGrads<T> {
    pub d_means: Array2<T>,
    pub d_variances: Array2<T>,
    pub d_inducing: Array2<T>,
    pub d_signal_variance: T,
    pub d_ard_weights: Array1<T>,
}

/// Adjoint backward pass: accumulate gradients of
/// `adj0·Ψ0 + Σ adj1∘Ψ1 + Σ adj2∘Ψ2` w.r.t. means, variances, inducing
/// inputs and kernel parameters.
pub fn psi_backward<T: Scalar>(
    q: &UncertainInputSet<T>,
    z: &Array2<T>,
    params: &KernelParams<T>,
    adj0: T,
    adj1: &Array2<T>,
    adj2: &Array2<T>,
) -> Result<PsiGrads<T>> {
    check_dims(q, z, params)?;
    let (n, m, dim) = (q.len(), z.nrows(), q.dim());
    if adj1.dim() != (n, m) || adj2.dim() != (m, m) {
        return Err(Error::Shape("psi_backward: adjoint shapes disagree".into()));
    }
    let sf2 = params.signal_variance;
    let w = &params.ard_weights;
    let half = T::cast(0.5);
    let quarter = T::cast(0.25);
    let two = T::cast(2.0);

    let mut d_means = Array2::<T>::zeros((n, dim));
    let mut d_vars = Array2::<T>::zeros((n, dim));
    let mut d_z = Array2::<T>::zeros((m, dim));
    let mut d_w = Array1::<T>::zeros(dim);
    let mut d_sf2 = adj0 * T::cast(n as f64);

    // Ψ1 block
    for i in 0..n {
        for mm in 0..m {
            if adj1[(i, mm)] == T::zero() {
                continue;
            }
            let mut log_term = T::zero();
            for d in 0..dim {
                let t = T::one() + w[d] * q.variances[(i, d)];
                let delta = q.means[(i, d)] - z[(mm, d)];
                log_term -= half * t.ln() + half * w[d] * delta * delta / t;
            }
            let val = sf2 * log_term.exp();
            let g = adj1[(i, mm)] * val;
            d_sf2 += g / sf2;
            for d in 0..dim {
                let v = q.variances[(i, d)];
                let t = T::one() + w[d] * v;
                let t2 = t * t;
                let delta = q.means[(i, d)] - z[(mm, d)];
                d_w[d] += g * (-(v * t + delta * delta) / (two * t2));
                let slope = g * w[d] * delta / t;
                d_means[(i, d)] -= slope;
                d_z[(mm, d)] += slope;
                d_vars[(i, d)] += g * w[d] * (w[d] * delta * delta - t) / (two * t2);
            }
        }
    }

    // Ψ2 block; ordered pairs so both halves of the adjoint are honored.
    for ma in 0..m {
        for mb in 0..m {
            let a = adj2[(ma, mb)];
            if a == T::zero() {
                continue;
            }
            for i in 0..n {
                let mut log_term = T::zero();
                for d in 0..dim {
                    let r = T::one() + two * w[d] * q.variances[(i, d)];
                    let dz = z[(ma, d)] - z[(mb, d)];
                    let c = half * (z[(ma, d)] + z[(mb, d)]);
                    let dm = q.means[(i, d)] - c;
                    log_term -= half * r.ln() + quarter * w[d] * dz * dz + w[d] * dm * dm / r;
                }
                let term = sf2 * sf2 * log_term.exp();
                let g = a * term;
                d_sf2 += two * g / sf2;
                for d in 0..dim {
                    let v = q.variances[(i, d)];
                    let r = T::one() + two * w[d] * v;
                    let r2 = r * r;
                    let dz = z[(ma, d)] - z[(mb, d)];
                    let c = half * (z[(ma, d)] + z[(mb, d)]);
                    let dm = q.means[(i, d)] - c;
                    d_w[d] += g * (-(v / r) - quarter * dz * dz - dm * dm / r2);
                    d_vars[(i, d)] += g * w[d] * (two * w[d] * dm * dm - r) / r2;
                    d_means[(i, d)] -= g * two * w[d] * dm / r;
                    let shared = g * w[d] * dm / r;
                    d_z[(ma, d)] += -g * half * w[d] * dz + shared;
                    d_z[(mb, d)] += g * half * w[d] * dz + shared;
                }
            }
        }
    }

    Ok(PsiGrads {
        d_means,
        d_variances: d_vars,
        d_inducing: d_z,
        d_signal_variance: d_sf2,
        d_ard_weights: d_w,
    })
}
