//! Model configuration, parameter containers, regressor assembly and the
//! flat parameter vector used by the optimizer.
//!
//! Layer indexing is zero-based: layers `0..H` are hidden transition layers,
//! layer `H` is the observation layer, so a model has `H + 1` GP layers in
//! total. Time indices are zero-based; likelihood rows exist for
//! `r in first_row()..n` where `first_row = max(L, L_u)`.

use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::psi::UncertainInputSet;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Initial variational variance for every latent state.
pub const INIT_LATENT_VARIANCE: f64 = 0.01;
/// Initial variance of the trainable initial-condition priors.
pub const INIT_PRIOR_VARIANCE: f64 = 1.0;
/// Initial signal variance per layer.
pub const INIT_SIGNAL_VARIANCE: f64 = 1.0;
/// Initial noise variance per layer.
pub const INIT_NOISE_VARIANCE: f64 = 0.1;

/// Numerical floor on noise variances. The bound multiplies cancellation
/// residuals by 1/σ², so σ² must stay away from the rounding regime; the
/// floor is far below any statistically meaningful noise level on
/// normalized data.
pub const NOISE_VARIANCE_FLOOR: f64 = 1e-5;

/// Log-space encoding of a floored positive parameter.
pub(crate) fn encode_floored<T: Scalar>(value: T, floor: f64) -> T {
    (value - T::cast(floor)).max(T::cast(1e-300)).ln()
}

/// Inverse of [`encode_floored`].
pub(crate) fn decode_floored<T: Scalar>(raw: T, floor: f64) -> T {
    raw.exp() + T::cast(floor)
}

/// Structural hyperparameters of the deep recurrent GP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of hidden transition layers H.
    pub hidden_layers: usize,
    /// Latent autoregressive lag L.
    pub lag: usize,
    /// Exogenous input lag L_u.
    pub input_lag: usize,
    /// Inducing points per layer M.
    pub num_inducing: usize,
    /// Base diagonal jitter as a fraction of the signal variance.
    pub jitter: f64,
}

impl ModelConfig {
    pub fn new(
        hidden_layers: usize,
        lag: usize,
        input_lag: usize,
        num_inducing: usize,
    ) -> Result<Self> {
        let c = Self {
            hidden_layers,
            lag,
            input_lag,
            num_inducing,
            jitter: 1e-6,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 {
            return Err(Error::Invalid("hidden_layers must be >= 1".into()));
        }
        if self.lag == 0 || self.input_lag == 0 {
            return Err(Error::Invalid("lag and input_lag must be >= 1".into()));
        }
        if self.num_inducing == 0 {
            return Err(Error::Invalid("num_inducing must be >= 1".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Invalid("jitter must be nonnegative".into()));
        }
        Ok(())
    }

    /// Total GP layers: hidden layers plus the observation layer.
    pub fn num_layers(&self) -> usize {
        self.hidden_layers + 1
    }

    /// Regressor dimension of layer `l`.
    pub fn layer_dim(&self, l: usize) -> usize {
        let h = self.hidden_layers;
        if l == 0 {
            self.lag + self.input_lag
        } else if l < h {
            2 * self.lag
        } else {
            self.lag
        }
    }

    /// First time index with a likelihood row.
    pub fn first_row(&self) -> usize {
        self.lag.max(self.input_lag)
    }
}

/// Where one regressor dimension takes its value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressorSource {
    /// Latent state `index` of hidden layer `layer`.
    Latent { layer: usize, index: usize },
    /// Observed exogenous input at `index` (zero variance).
    Input { index: usize },
}

/// Source of dimension `d` of the regressor row at time `r` for layer `l`.
///
/// Encodes the case analysis of the latent autoregressive structure:
/// layer 0 sees its own lagged states plus lagged inputs, deeper hidden
/// layers see their own lagged states plus the current window of the layer
/// below, and the observation layer sees the top hidden layer's window.
pub fn regressor_source(config: &ModelConfig, l: usize, r: usize, d: usize) -> RegressorSource {
    let lag = config.lag;
    let h = config.hidden_layers;
    if l == 0 {
        if d < lag {
            RegressorSource::Latent {
                layer: 0,
                index: r - 1 - d,
            }
        } else {
            RegressorSource::Input {
                index: r - 1 - (d - lag),
            }
        }
    } else if l < h {
        if d < lag {
            RegressorSource::Latent {
                layer: l,
                index: r - 1 - d,
            }
        } else {
            RegressorSource::Latent {
                layer: l - 1,
                index: r - (d - lag),
            }
        }
    } else {
        RegressorSource::Latent {
            layer: h - 1,
            index: r - d,
        }
    }
}

/// Diagonal-Gaussian posterior over one hidden layer's latent sequence plus
/// the trainable priors over its first `L` states.
#[derive(Debug, Clone)]
pub struct VariationalLayer<T> {
    pub means: Array1<T>,
    pub variances: Array1<T>,
    pub prior_means: Array1<T>,
    pub prior_variances: Array1<T>,
}

impl<T: Scalar> VariationalLayer<T> {
    pub fn validate(&self, n: usize, lag: usize) -> Result<()> {
        if self.means.len() != n || self.variances.len() != n {
            return Err(Error::Shape(format!(
                "variational layer expects {} states, got {}/{}",
                n,
                self.means.len(),
                self.variances.len()
            )));
        }
        if self.prior_means.len() != lag || self.prior_variances.len() != lag {
            return Err(Error::Shape(format!(
                "initial priors expect {} entries, got {}/{}",
                lag,
                self.prior_means.len(),
                self.prior_variances.len()
            )));
        }
        if self.variances.iter().any(|v| !(*v > T::zero())) {
            return Err(Error::Invalid("variational variances must be positive".into()));
        }
        if self.prior_variances.iter().any(|v| !(*v > T::zero())) {
            return Err(Error::Invalid("prior variances must be positive".into()));
        }
        Ok(())
    }
}

/// Pseudo-inputs of one layer.
#[derive(Debug, Clone)]
pub struct InducingSet<T> {
    pub pseudo_inputs: Array2<T>,
}

/// Kernel, noise and inducing inputs of one GP layer.
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub kernel: KernelParams<T>,
    pub noise_variance: T,
    pub inducing: InducingSet<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn validate(&self, dim: usize, num_inducing: usize) -> Result<()> {
        self.kernel.validate()?;
        if self.kernel.dim() != dim {
            return Err(Error::Shape(format!(
                "kernel expects {} dims, layer has {}",
                self.kernel.dim(),
                dim
            )));
        }
        if !(self.noise_variance > T::zero()) {
            return Err(Error::Invalid("noise variance must be positive".into()));
        }
        if self.inducing.pseudo_inputs.dim() != (num_inducing, dim) {
            return Err(Error::Shape(format!(
                "inducing inputs expect {:?}, got {:?}",
                (num_inducing, dim),
                self.inducing.pseudo_inputs.dim()
            )));
        }
        Ok(())
    }
}

/// Full trainable parameter state of the model.
#[derive(Debug, Clone)]
pub struct RevarbState<T> {
    pub config: ModelConfig,
    /// Training sequence length N.
    pub n: usize,
    /// One entry per hidden layer.
    pub variational: Vec<VariationalLayer<T>>,
    /// One entry per GP layer (hidden layers then the observation layer).
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> RevarbState<T> {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.variational.len() != self.config.hidden_layers {
            return Err(Error::Shape("one variational layer per hidden layer".into()));
        }
        if self.layers.len() != self.config.num_layers() {
            return Err(Error::Shape("one parameter set per GP layer".into()));
        }
        if self.n <= self.config.first_row() {
            return Err(Error::Shape(format!(
                "no trainable rows: n = {} with lags ({}, {})",
                self.n, self.config.lag, self.config.input_lag
            )));
        }
        for v in &self.variational {
            v.validate(self.n, self.config.lag)?;
        }
        for (l, p) in self.layers.iter().enumerate() {
            p.validate(self.config.layer_dim(l), self.config.num_inducing)?;
        }
        Ok(())
    }

    /// Likelihood rows `first_row()..n`.
    pub fn num_rows(&self) -> usize {
        self.n - self.config.first_row()
    }
}

/// Uncertain regressor rows of layer `l` for times `first_row()..n`.
///
/// Every latent reference draws mean and variance from the variational
/// posterior; observed inputs enter as zero-variance dimensions.
pub fn assemble_regressors<T: Scalar>(
    state: &RevarbState<T>,
    u: &Array1<T>,
    l: usize,
) -> Result<UncertainInputSet<T>> {
    if u.len() != state.n {
        return Err(Error::Shape(format!(
            "input sequence length {} does not match n = {}",
            u.len(),
            state.n
        )));
    }
    if l >= state.config.num_layers() {
        return Err(Error::Shape(format!("layer {} out of range", l)));
    }
    let r0 = state.config.first_row();
    if state.n <= r0 {
        return Err(Error::Shape("no trainable rows".into()));
    }
    let rows = state.n - r0;
    let dim = state.config.layer_dim(l);
    let mut means = Array2::<T>::zeros((rows, dim));
    let mut vars = Array2::<T>::zeros((rows, dim));
    for r in r0..state.n {
        for d in 0..dim {
            let (m, v) = match regressor_source(&state.config, l, r, d) {
                RegressorSource::Latent { layer, index } => {
                    let vl = &state.variational[layer];
                    (vl.means[index], vl.variances[index])
                }
                RegressorSource::Input { index } => (u[index], T::zero()),
            };
            means[(r - r0, d)] = m;
            vars[(r - r0, d)] = v;
        }
    }
    UncertainInputSet::new(means, vars)
}

/// Initialize a full parameter state from normalized training data.
///
/// Latent means start at the observed output sequence, variances at a small
/// constant, initial-condition priors at the matching outputs with unit
/// variance, and inducing inputs as a seeded random subset of the initial
/// regressor rows.
pub fn init_model<T: Scalar>(
    config: &ModelConfig,
    u: &Array1<T>,
    y: &Array1<T>,
    seed: u64,
) -> Result<RevarbState<T>> {
    config.validate()?;
    let n = y.len();
    if u.len() != n {
        return Err(Error::Shape(format!(
            "input/output lengths disagree: {} vs {}",
            u.len(),
            n
        )));
    }
    if n <= config.first_row() {
        return Err(Error::Shape(format!(
            "no trainable rows: n = {} with lags ({}, {})",
            n, config.lag, config.input_lag
        )));
    }
    let rows = n - config.first_row();
    if config.num_inducing > rows {
        return Err(Error::Invalid(format!(
            "num_inducing = {} exceeds the {} available regressor rows",
            config.num_inducing, rows
        )));
    }

    let h = config.hidden_layers;
    let variational: Vec<VariationalLayer<T>> = (0..h)
        .map(|_| VariationalLayer {
            means: y.clone(),
            variances: Array1::from_elem(n, T::cast(INIT_LATENT_VARIANCE)),
            prior_means: y.slice(ndarray::s![..config.lag]).to_owned(),
            prior_variances: Array1::from_elem(config.lag, T::cast(INIT_PRIOR_VARIANCE)),
        })
        .collect();

    let mut layers = Vec::with_capacity(config.num_layers());
    for l in 0..config.num_layers() {
        let dim = config.layer_dim(l);
        let kernel = KernelParams::isotropic(
            T::cast(INIT_SIGNAL_VARIANCE),
            T::cast(1.0 / dim as f64),
            dim,
        )?;
        layers.push(LayerParams {
            kernel,
            noise_variance: T::cast(INIT_NOISE_VARIANCE),
            inducing: InducingSet {
                pseudo_inputs: Array2::zeros((config.num_inducing, dim)),
            },
        });
    }

    let mut state = RevarbState {
        config: config.clone(),
        n,
        variational,
        layers,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..state.config.num_layers() {
        let regressors = assemble_regressors(&state, u, l)?;
        let picks = rand::seq::index::sample(&mut rng, rows, state.config.num_inducing);
        let dim = state.config.layer_dim(l);
        let mut zeta = Array2::<T>::zeros((state.config.num_inducing, dim));
        for (k, row) in picks.iter().enumerate() {
            zeta.row_mut(k).assign(&regressors.means.row(row));
        }
        state.layers[l].inducing.pseudo_inputs = zeta;
    }

    state.validate()?;
    Ok(state)
}

/// Number of entries in the packed parameter vector.
pub fn packed_len(config: &ModelConfig, n: usize) -> usize {
    let h = config.hidden_layers;
    let variational = h * (2 * n + 2 * config.lag);
    let layered: usize = (0..config.num_layers())
        .map(|l| {
            let d = config.layer_dim(l);
            2 + d + config.num_inducing * d
        })
        .sum();
    variational + layered
}

/// Flatten the state into an optimizer vector. Positive quantities traverse
/// in log space so the optimizer works unconstrained.
///
/// Layout: per hidden layer `[μ, log λ, μ0, log λ0]`, then per GP layer
/// `[log σ_f², log w, log σ², ζ row-major]`.
pub fn pack<T: Scalar>(state: &RevarbState<T>) -> Array1<T> {
    let mut out = Vec::with_capacity(packed_len(&state.config, state.n));
    for v in &state.variational {
        out.extend(v.means.iter().copied());
        out.extend(v.variances.iter().map(|x| x.ln()));
        out.extend(v.prior_means.iter().copied());
        out.extend(v.prior_variances.iter().map(|x| x.ln()));
    }
    for p in &state.layers {
        out.push(p.kernel.signal_variance.ln());
        out.extend(p.kernel.ard_weights.iter().map(|x| x.ln()));
        out.push(encode_floored(p.noise_variance, NOISE_VARIANCE_FLOOR));
        out.extend(p.inducing.pseudo_inputs.iter().copied());
    }
    Array1::from_vec(out)
}

/// Inverse of [`pack`].
pub fn unpack<T: Scalar>(packed: &Array1<T>, config: &ModelConfig, n: usize) -> Result<RevarbState<T>> {
    let expect = packed_len(config, n);
    if packed.len() != expect {
        return Err(Error::Shape(format!(
            "packed vector has {} entries, expected {}",
            packed.len(),
            expect
        )));
    }
    let mut idx = 0usize;
    let mut take = |count: usize| -> Vec<T> {
        let v = packed.slice(ndarray::s![idx..idx + count]).to_vec();
        idx += count;
        v
    };
    let h = config.hidden_layers;
    let mut variational = Vec::with_capacity(h);
    for _ in 0..h {
        let means = Array1::from_vec(take(n));
        let variances = Array1::from_vec(take(n)).mapv(|x| x.exp());
        let prior_means = Array1::from_vec(take(config.lag));
        let prior_variances = Array1::from_vec(take(config.lag)).mapv(|x| x.exp());
        variational.push(VariationalLayer {
            means,
            variances,
            prior_means,
            prior_variances,
        });
    }
    let mut layers = Vec::with_capacity(config.num_layers());
    for l in 0..config.num_layers() {
        let d = config.layer_dim(l);
        let signal_variance = take(1)[0].exp();
        let ard_weights = Array1::from_vec(take(d)).mapv(|x| x.exp());
        let noise_variance = decode_floored(take(1)[0], NOISE_VARIANCE_FLOOR);
        let zeta = Array2::from_shape_vec((config.num_inducing, d), take(config.num_inducing * d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        layers.push(LayerParams {
            kernel: KernelParams {
                signal_variance,
                ard_weights,
            },
            noise_variance,
            inducing: InducingSet {
                pseudo_inputs: zeta,
            },
        });
    }
    Ok(RevarbState {
        config: config.clone(),
        n,
        variational,
        layers,
    })
}

/// Gradient container mirroring [`RevarbState`] in raw (not log) space.
#[derive(Debug, Clone)]
pub struct StateGrads<T> {
    pub variational: Vec<VariationalGrads<T>>,
    pub layers: Vec<LayerParamGrads<T>>,
}

#[derive(Debug, Clone)]
pub struct VariationalGrads<T> {
    pub d_means: Array1<T>,
    pub d_variances: Array1<T>,
    pub d_prior_means: Array1<T>,
    pub d_prior_variances: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LayerParamGrads<T> {
    pub d_signal_variance: T,
    pub d_ard_weights: Array1<T>,
    pub d_noise_variance: T,
    pub d_inducing: Array2<T>,
}

impl<T: Scalar> StateGrads<T> {
    pub fn zeros_like(state: &RevarbState<T>) -> Self {
        StateGrads {
            variational: state
                .variational
                .iter()
                .map(|v| VariationalGrads {
                    d_means: Array1::zeros(v.means.len()),
                    d_variances: Array1::zeros(v.variances.len()),
                    d_prior_means: Array1::zeros(v.prior_means.len()),
                    d_prior_variances: Array1::zeros(v.prior_variances.len()),
                })
                .collect(),
            layers: state
                .layers
                .iter()
                .map(|p| LayerParamGrads {
                    d_signal_variance: T::zero(),
                    d_ard_weights: Array1::zeros(p.kernel.ard_weights.len()),
                    d_noise_variance: T::zero(),
                    d_inducing: Array2::zeros(p.inducing.pseudo_inputs.dim()),
                })
                .collect(),
        }
    }

    /// Pack gradients to match [`pack`]'s layout, applying the chain rule for
    /// the log-space coordinates (`∂F/∂log θ = θ · ∂F/∂θ`).
    pub fn pack_log_space(&self, state: &RevarbState<T>) -> Array1<T> {
        let mut out = Vec::with_capacity(packed_len(&state.config, state.n));
        for (g, v) in self.variational.iter().zip(&state.variational) {
            out.extend(g.d_means.iter().copied());
            out.extend(
                g.d_variances
                    .iter()
                    .zip(v.variances.iter())
                    .map(|(g, t)| *g * *t),
            );
            out.extend(g.d_prior_means.iter().copied());
            out.extend(
                g.d_prior_variances
                    .iter()
                    .zip(v.prior_variances.iter())
                    .map(|(g, t)| *g * *t),
            );
        }
        for (g, p) in self.layers.iter().zip(&state.layers) {
            out.push(g.d_signal_variance * p.kernel.signal_variance);
            out.extend(
                g.d_ard_weights
                    .iter()
                    .zip(p.kernel.ard_weights.iter())
                    .map(|(g, t)| *g * *t),
            );
            out.push(g.d_noise_variance * (p.noise_variance - T::cast(NOISE_VARIANCE_FLOOR)));
            out.extend(g.d_inducing.iter().copied());
        }
        Array1::from_vec(out)
    }
}
