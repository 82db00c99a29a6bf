//! ARD exponentiated quadratic covariance and its parameter gradients.
//!
//! `k(x, x') = σ_f² · exp(−½ Σ_d w_d² (x_d − x'_d)²)` with one weight per
//! input dimension. Weights are stored in squared form and optimized in log
//! space by the trainer.

use crate::error::{Error, Result};
use crate::linalg::cholesky;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1};

/// Hyperparameters of the exponentiated quadratic kernel.
#[derive(Debug, Clone)]
pub struct KernelParams<T> {
    /// Signal variance σ_f².
    pub signal_variance: T,
    /// Per-dimension squared ARD weights w_d².
    pub ard_weights: Array1<T>,
}

impl<T: Scalar> KernelParams<T> {
    pub fn new(signal_variance: T, ard_weights: Array1<T>) -> Result<Self> {
        let p = Self {
            signal_variance,
            ard_weights,
        };
        p.validate()?;
        Ok(p)
    }

    /// Constant weights across all `dim` input dimensions.
    pub fn isotropic(signal_variance: T, weight: T, dim: usize) -> Result<Self> {
        Self::new(signal_variance, Array1::from_elem(dim, weight))
    }

    pub fn dim(&self) -> usize {
        self.ard_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > T::zero()) || !self.signal_variance.is_finite() {
            return Err(Error::Invalid(format!(
                "signal variance must be positive and finite, got {}",
                self.signal_variance
            )));
        }
        if self.ard_weights.iter().any(|w| !(*w > T::zero()) || !w.is_finite()) {
            return Err(Error::Invalid("ard weights must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Symmetric kernel matrix with the diagonal boost that made it factorizable.
#[derive(Debug, Clone)]
pub struct GramMatrix<T> {
    /// Kernel matrix including `jitter_applied` on the diagonal.
    pub values: Array2<T>,
    /// Absolute jitter actually added to the diagonal (0 when none requested).
    pub jitter_applied: T,
    chol: Array2<T>,
}

impl<T: Scalar> GramMatrix<T> {
    /// Lower Cholesky factor of `values`.
    pub fn cholesky(&self) -> &Array2<T> {
        &self.chol
    }
}

#[inline]
fn sq_dist<T: Scalar>(x: ArrayView1<T>, x2: ArrayView1<T>, w: &Array1<T>) -> T {
    let mut s = T::zero();
    for d in 0..w.len() {
        let delta = x[d] - x2[d];
        s += w[d] * delta * delta;
    }
    s
}

pub(crate) fn kern_unchecked<T: Scalar>(
    x: ArrayView1<T>,
    x2: ArrayView1<T>,
    params: &KernelParams<T>,
) -> T {
    let half = T::cast(0.5);
    params.signal_variance * (-half * sq_dist(x, x2, &params.ard_weights)).exp()
}

/// Kernel value between two points.
pub fn kern<T: Scalar>(
    x: ArrayView1<T>,
    x2: ArrayView1<T>,
    params: &KernelParams<T>,
) -> Result<T> {
    params.validate()?;
    if x.len() != x2.len() || x.len() != params.dim() {
        return Err(Error::Shape(format!(
            "kern expects matching dimensions, got {} / {} / {} weights",
            x.len(),
            x2.len(),
            params.dim()
        )));
    }
    Ok(kern_unchecked(x, x2, params))
}

/// Relative jitter escalation ceiling (fraction of σ_f²).
pub const MAX_RELATIVE_JITTER: f64 = 1e-2;

/// Minimum acceptable Cholesky diagonal ratio; below this the factorization
/// counts as failed and the jitter ladder escalates.
pub const MIN_CHOL_DIAG_RATIO: f64 = 1e-7;

/// Kernel matrix of `x` against itself with jitter escalation.
///
/// `jitter` is a fraction of the signal variance; when the Cholesky
/// factorization fails it is escalated tenfold up to `1e-2·σ_f²` before an
/// error is raised. `jitter = 0` requests a single unjittered attempt.
pub fn gram<T: Scalar>(x: &Array2<T>, params: &KernelParams<T>, jitter: T) -> Result<GramMatrix<T>> {
    params.validate()?;
    if x.ncols() != params.dim() {
        return Err(Error::Shape(format!(
            "gram: input has {} columns but kernel expects {}",
            x.ncols(),
            params.dim()
        )));
    }
    if jitter < T::zero() {
        return Err(Error::Invalid("jitter must be nonnegative".into()));
    }
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Shape("gram needs at least one row".into()));
    }
    let mut values = Array2::<T>::zeros((n, n));
    for i in 0..n {
        values[(i, i)] = params.signal_variance;
        for j in (i + 1)..n {
            let v = kern_unchecked(x.row(i), x.row(j), params);
            values[(i, j)] = v;
            values[(j, i)] = v;
        }
    }
    let ceiling = T::cast(MAX_RELATIVE_JITTER) * params.signal_variance;
    let mut rel = jitter;
    loop {
        let abs = rel * params.signal_variance;
        let mut attempt = values.clone();
        for i in 0..n {
            attempt[(i, i)] += abs;
        }
        if let Some(chol) = cholesky(&attempt) {
            if crate::linalg::chol_diag_ratio(&chol) >= T::cast(MIN_CHOL_DIAG_RATIO) {
                return Ok(GramMatrix {
                    values: attempt,
                    jitter_applied: abs,
                    chol,
                });
            }
        }
        if rel == T::zero() || rel * params.signal_variance >= ceiling {
            return Err(Error::Cholesky {
                matrix: "gram".into(),
                jitter: abs.to_f64_lossy(),
            });
        }
        rel = (rel * T::cast(10.0)).min(T::cast(MAX_RELATIVE_JITTER));
    }
}

/// Cross-covariance matrix between two sets of points.
pub fn cross_gram<T: Scalar>(
    x: &Array2<T>,
    z: &Array2<T>,
    params: &KernelParams<T>,
) -> Result<Array2<T>> {
    params.validate()?;
    if x.ncols() != z.ncols() || x.ncols() != params.dim() {
        return Err(Error::Shape(format!(
            "cross_gram: column counts {} / {} / {} weights disagree",
            x.ncols(),
            z.ncols(),
            params.dim()
        )));
    }
    let (n, m) = (x.nrows(), z.nrows());
    let mut out = Array2::<T>::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            out[(i, j)] = kern_unchecked(x.row(i), z.row(j), params);
        }
    }
    Ok(out)
}

/// Gradients accumulated by the adjoint-form backward passes.
#[derive(Debug, Clone)]
pub struct KernelGrads<T> {
    pub d_signal_variance: T,
    pub d_ard_weights: Array1<T>,
    /// Gradient w.r.t. the (inducing) input rows.
    pub d_inputs: Array2<T>,
}

/// Backward pass of [`gram`]: given `adj[i][j] = ∂F/∂K[i][j]`, accumulate
/// gradients of F w.r.t. σ_f², each w_d² and each input entry.
///
/// `jitter_applied` must be the relative jitter reported by the forward call
/// divided by σ_f²; it contributes `rel·Σ adj_ii` to the σ_f² gradient since
/// the diagonal boost scales with the signal variance.
pub fn gram_backward<T: Scalar>(
    x: &Array2<T>,
    params: &KernelParams<T>,
    relative_jitter: T,
    adj: &Array2<T>,
) -> KernelGrads<T> {
    let n = x.nrows();
    let dim = params.dim();
    let half = T::cast(0.5);
    let mut d_sf2 = T::zero();
    let mut d_w = Array1::<T>::zeros(dim);
    let mut d_x = Array2::<T>::zeros((n, dim));
    for i in 0..n {
        // diagonal: k = σ_f² (+ jitter), no weight or input dependence
        d_sf2 += adj[(i, i)] * (T::one() + relative_jitter);
        for j in (i + 1)..n {
            let k = kern_unchecked(x.row(i), x.row(j), params);
            let a = adj[(i, j)] + adj[(j, i)];
            d_sf2 += a * k / params.signal_variance;
            for d in 0..dim {
                let delta = x[(i, d)] - x[(j, d)];
                d_w[d] += a * k * (-half * delta * delta);
                let g = a * k * (-params.ard_weights[d] * delta);
                d_x[(i, d)] += g;
                d_x[(j, d)] -= g;
            }
        }
    }
    KernelGrads {
        d_signal_variance: d_sf2,
        d_ard_weights: d_w,
        d_inputs: d_x,
    }
}

/// Backward pass of [`cross_gram`] w.r.t. σ_f², w_d² and the second argument.
pub fn cross_gram_backward<T: Scalar>(
    x: &Array2<T>,
    z: &Array2<T>,
    params: &KernelParams<T>,
    adj: &Array2<T>,
) -> KernelGrads<T> {
    let (n, m) = (x.nrows(), z.nrows());
    let dim = params.dim();
    let half = T::cast(0.5);
    let mut d_sf2 = T::zero();
    let mut d_w = Array1::<T>::zeros(dim);
    let mut d_z = Array2::<T>::zeros((m, dim));
    for i in 0..n {
        for j in 0..m {
            let k = kern_unchecked(x.row(i), z.row(j), params);
            let a = adj[(i, j)];
            d_sf2 += a * k / params.signal_variance;
            for d in 0..dim {
                let delta = x[(i, d)] - z[(j, d)];
                d_w[d] += a * k * (-half * delta * delta);
                d_z[(j, d)] += a * k * (params.ard_weights[d] * delta);
            }
        }
    }
    KernelGrads {
        d_signal_variance: d_sf2,
        d_ard_weights: d_w,
        d_inputs: d_z,
    }
}
