//! Sequential recurrent recognition model: a small tanh network per hidden
//! layer reparameterizes that layer's variational means as a deterministic
//! recurrent function of shared weights, so the number of free mean
//! parameters no longer grows with the sequence length. Variational
//! variances stay free per point.

use crate::bound::{bound_grads, BoundBreakdown};
use crate::error::{Error, Result};
use crate::model::{
    packed_len, regressor_source, ModelConfig, RegressorSource, RevarbState, StateGrads,
};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which window feeds the mean of step `i`: the literal lagged window at
/// `i−1`, or the window at `i` itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognitionWindow {
    Lagged,
    Current,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecognitionConfig {
    /// Number of tanh stages.
    pub depth: usize,
    /// Hidden width of every stage.
    pub width: usize,
    pub window: RecognitionWindow,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_scale: f64,
}

impl Default for RecognitionConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            width: 16,
            window: RecognitionWindow::Lagged,
            init_scale: 0.1,
        }
    }
}

impl RecognitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::Invalid("recognition depth and width must be >= 1".into()));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::Invalid("recognition init_scale must be positive".into()));
        }
        Ok(())
    }
}

/// `g(x) = Vᵀ tanh(W_{k-1} tanh(… tanh(U x + b_1) …) + b_{k-1})` with a
/// bias per tanh stage and a linear bias-free readout.
#[derive(Debug, Clone)]
pub struct RecognitionNet<T> {
    pub input_map: Array2<T>,
    pub input_bias: Array1<T>,
    pub hidden_maps: Vec<Array2<T>>,
    pub hidden_biases: Vec<Array1<T>>,
    pub output_map: Array1<T>,
}

/// Gradients mirroring [`RecognitionNet`].
#[derive(Debug, Clone)]
pub struct NetGrads<T> {
    pub d_input_map: Array2<T>,
    pub d_input_bias: Array1<T>,
    pub d_hidden_maps: Vec<Array2<T>>,
    pub d_hidden_biases: Vec<Array1<T>>,
    pub d_output_map: Array1<T>,
}

impl<T: Scalar> NetGrads<T> {
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        out.extend(self.d_input_map.iter().copied());
        out.extend(self.d_input_bias.iter().copied());
        for (w, b) in self.d_hidden_maps.iter().zip(&self.d_hidden_biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out.extend(self.d_output_map.iter().copied());
        out
    }
}

impl<T: Scalar> RecognitionNet<T> {
    pub fn init(input_dim: usize, cfg: &RecognitionConfig, rng: &mut ChaCha8Rng) -> Self {
        let scale = T::cast(cfg.init_scale);
        let mut gauss = |_: (usize, usize)| T::standard_normal(rng) * scale;
        let input_map = Array2::from_shape_fn((cfg.width, input_dim), &mut gauss);
        let hidden_maps: Vec<Array2<T>> = (1..cfg.depth)
            .map(|_| Array2::from_shape_fn((cfg.width, cfg.width), &mut gauss))
            .collect();
        let output_map = Array1::from_shape_fn(cfg.width, |_| T::standard_normal(rng) * scale);
        Self {
            input_map,
            input_bias: Array1::zeros(cfg.width),
            hidden_biases: hidden_maps.iter().map(|_| Array1::zeros(cfg.width)).collect(),
            hidden_maps,
            output_map,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_map.ncols()
    }

    pub fn width(&self) -> usize {
        self.input_map.nrows()
    }

    pub fn depth(&self) -> usize {
        self.hidden_maps.len() + 1
    }

    /// Total number of trainable weights; a function of the architecture
    /// only, never of the sequence length.
    pub fn weight_count(&self) -> usize {
        self.input_map.len()
            + self.input_bias.len()
            + self.hidden_maps.iter().map(|w| w.len()).sum::<usize>()
            + self.hidden_biases.iter().map(|b| b.len()).sum::<usize>()
            + self.output_map.len()
    }

    /// Scalar output plus the post-tanh activations of every stage.
    pub fn forward(&self, x: &Array1<T>) -> Result<(T, Vec<Array1<T>>)> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "recognition input has {} dims, net expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut acts = Vec::with_capacity(self.depth());
        let mut h = (self.input_map.dot(x) + &self.input_bias).mapv(|v| v.tanh());
        acts.push(h.clone());
        for (w, b) in self.hidden_maps.iter().zip(&self.hidden_biases) {
            h = (w.dot(&h) + b).mapv(|v| v.tanh());
            acts.push(h.clone());
        }
        Ok((self.output_map.dot(&h), acts))
    }

    /// Backward pass: gradients of `adj · g(x)` w.r.t. the weights and the
    /// input vector.
    pub fn backward(&self, x: &Array1<T>, acts: &[Array1<T>], adj: T) -> (NetGrads<T>, Array1<T>) {
        let last = &acts[acts.len() - 1];
        let d_output_map = last.mapv(|v| v * adj);
        let mut g_h = self.output_map.mapv(|v| v * adj);
        let mut d_hidden_maps: Vec<Array2<T>> = self
            .hidden_maps
            .iter()
            .map(|w| Array2::zeros(w.dim()))
            .collect();
        let mut d_hidden_biases: Vec<Array1<T>> = self
            .hidden_biases
            .iter()
            .map(|b| Array1::zeros(b.len()))
            .collect();
        for j in (1..acts.len()).rev() {
            let pre = &g_h * &acts[j].mapv(|h| T::one() - h * h);
            let prev = &acts[j - 1];
            for r in 0..pre.len() {
                for c in 0..prev.len() {
                    d_hidden_maps[j - 1][(r, c)] += pre[r] * prev[c];
                }
            }
            d_hidden_biases[j - 1] = &d_hidden_biases[j - 1] + &pre;
            g_h = self.hidden_maps[j - 1].t().dot(&pre);
        }
        let pre = &g_h * &acts[0].mapv(|h| T::one() - h * h);
        let mut d_input_map = Array2::zeros(self.input_map.dim());
        for r in 0..pre.len() {
            for c in 0..x.len() {
                d_input_map[(r, c)] = pre[r] * x[c];
            }
        }
        let d_x = self.input_map.t().dot(&pre);
        (
            NetGrads {
                d_input_map,
                d_input_bias: pre,
                d_hidden_maps,
                d_hidden_biases,
                d_output_map,
            },
            d_x,
        )
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.weight_count());
        out.extend(self.input_map.iter().copied());
        out.extend(self.input_bias.iter().copied());
        for (w, b) in self.hidden_maps.iter().zip(&self.hidden_biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out.extend(self.output_map.iter().copied());
        out
    }

    pub fn from_flat(
        flat: &[T],
        input_dim: usize,
        depth: usize,
        width: usize,
    ) -> Result<Self> {
        let expect = flat_len(input_dim, depth, width);
        if flat.len() != expect {
            return Err(Error::Shape(format!(
                "recognition weights: got {} values, expected {}",
                flat.len(),
                expect
            )));
        }
        let mut idx = 0usize;
        let mut take = |n: usize| {
            let s = &flat[idx..idx + n];
            idx += n;
            s.to_vec()
        };
        let input_map = Array2::from_shape_vec((width, input_dim), take(width * input_dim))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let input_bias = Array1::from_vec(take(width));
        let mut hidden_maps = Vec::with_capacity(depth - 1);
        let mut hidden_biases = Vec::with_capacity(depth - 1);
        for _ in 1..depth {
            hidden_maps.push(
                Array2::from_shape_vec((width, width), take(width * width))
                    .map_err(|e| Error::Shape(e.to_string()))?,
            );
            hidden_biases.push(Array1::from_vec(take(width)));
        }
        let output_map = Array1::from_vec(take(width));
        Ok(Self {
            input_map,
            input_bias,
            hidden_maps,
            hidden_biases,
            output_map,
        })
    }
}

/// Flat weight count of one net.
pub fn flat_len(input_dim: usize, depth: usize, width: usize) -> usize {
    width * input_dim + width + (depth - 1) * (width * width + width) + width
}

/// First time index whose mean is produced by the nets; earlier means stay
/// free parameters.
pub fn recognition_start(config: &ModelConfig, window: RecognitionWindow) -> usize {
    config.first_row()
        + match window {
            RecognitionWindow::Lagged => 1,
            RecognitionWindow::Current => 0,
        }
}

fn window_time(i: usize, window: RecognitionWindow) -> usize {
    match window {
        RecognitionWindow::Lagged => i - 1,
        RecognitionWindow::Current => i,
    }
}

struct StepCache<T> {
    input: Array1<T>,
    acts: Vec<Array1<T>>,
}

/// Fill all recognition-produced means of `state` in place, sweeping forward
/// in time and upward through layers so every window only reads already
/// computed values. Returns the caches needed for backpropagation.
fn forward_impl<T: Scalar>(
    state: &mut RevarbState<T>,
    nets: &[RecognitionNet<T>],
    window: RecognitionWindow,
    u: &Array1<T>,
) -> Result<Vec<Vec<StepCache<T>>>> {
    let cfg = state.config.clone();
    let h = cfg.hidden_layers;
    if nets.len() != h {
        return Err(Error::Shape(format!(
            "need one recognition net per hidden layer ({h}), got {}",
            nets.len()
        )));
    }
    for (l, net) in nets.iter().enumerate() {
        if net.input_dim() != cfg.layer_dim(l) {
            return Err(Error::Shape(format!(
                "net {l} expects {} input dims, layer has {}",
                net.input_dim(),
                cfg.layer_dim(l)
            )));
        }
    }
    let i0 = recognition_start(&cfg, window);
    let mut caches: Vec<Vec<StepCache<T>>> = (0..h).map(|_| Vec::new()).collect();
    for i in i0..state.n {
        for l in 0..h {
            let w_time = window_time(i, window);
            let dim = cfg.layer_dim(l);
            let mut input = Array1::<T>::zeros(dim);
            for d in 0..dim {
                input[d] = match regressor_source(&cfg, l, w_time, d) {
                    RegressorSource::Latent { layer, index } => {
                        state.variational[layer].means[index]
                    }
                    RegressorSource::Input { index } => u[index],
                };
            }
            let (out, acts) = nets[l].forward(&input)?;
            state.variational[l].means[i] = out;
            caches[l].push(StepCache { input, acts });
        }
    }
    Ok(caches)
}

/// Compute the full mean sequences implied by the nets. `template` supplies
/// the free means below the recognition start index and everything else.
pub fn recognition_forward<T: Scalar>(
    template: &RevarbState<T>,
    nets: &[RecognitionNet<T>],
    window: RecognitionWindow,
    u: &Array1<T>,
) -> Result<RevarbState<T>> {
    let mut state = template.clone();
    forward_impl(&mut state, nets, window, u)?;
    Ok(state)
}

/// Bound value at the recognition-constrained state.
pub fn bound_with_recognition<T: Scalar>(
    template: &RevarbState<T>,
    nets: &[RecognitionNet<T>],
    window: RecognitionWindow,
    u: &Array1<T>,
    y: &Array1<T>,
) -> Result<BoundBreakdown<T>> {
    let state = recognition_forward(template, nets, window, u)?;
    crate::bound::lower_bound(&state, u, y)
}

/// Bound, state gradients and net-weight gradients at the constrained state.
///
/// The mean adjoints coming out of the bound are pushed backward through the
/// recurrence (reverse time, reverse layer order), accumulating onto weight
/// gradients and onto the earlier means each window reads.
pub fn recognition_grads<T: Scalar>(
    template: &RevarbState<T>,
    nets: &[RecognitionNet<T>],
    window: RecognitionWindow,
    u: &Array1<T>,
    y: &Array1<T>,
) -> Result<(BoundBreakdown<T>, StateGrads<T>, Vec<NetGrads<T>>)> {
    let mut state = template.clone();
    let caches = forward_impl(&mut state, nets, window, u)?;
    let (breakdown, mut sg) = bound_grads(&state, u, y)?;
    let cfg = &state.config;
    let h = cfg.hidden_layers;
    let i0 = recognition_start(cfg, window);

    let mut net_grads: Vec<NetGrads<T>> = nets
        .iter()
        .map(|n| NetGrads {
            d_input_map: Array2::zeros(n.input_map.dim()),
            d_input_bias: Array1::zeros(n.input_bias.len()),
            d_hidden_maps: n.hidden_maps.iter().map(|w| Array2::zeros(w.dim())).collect(),
            d_hidden_biases: n
                .hidden_biases
                .iter()
                .map(|b| Array1::zeros(b.len()))
                .collect(),
            d_output_map: Array1::zeros(n.output_map.len()),
        })
        .collect();

    for i in (i0..state.n).rev() {
        for l in (0..h).rev() {
            let adj = sg.variational[l].d_means[i];
            let cache = &caches[l][i - i0];
            let (ng, d_x) = nets[l].backward(&cache.input, &cache.acts, adj);
            net_grads[l].d_input_map = &net_grads[l].d_input_map + &ng.d_input_map;
            net_grads[l].d_input_bias = &net_grads[l].d_input_bias + &ng.d_input_bias;
            for (acc, g) in net_grads[l]
                .d_hidden_maps
                .iter_mut()
                .zip(ng.d_hidden_maps.iter())
            {
                *acc = &*acc + g;
            }
            for (acc, g) in net_grads[l]
                .d_hidden_biases
                .iter_mut()
                .zip(ng.d_hidden_biases.iter())
            {
                *acc = &*acc + g;
            }
            net_grads[l].d_output_map = &net_grads[l].d_output_map + &ng.d_output_map;
            let w_time = window_time(i, window);
            for d in 0..cfg.layer_dim(l) {
                if let RegressorSource::Latent { layer, index } =
                    regressor_source(cfg, l, w_time, d)
                {
                    sg.variational[layer].d_means[index] += d_x[d];
                }
            }
        }
    }
    Ok((breakdown, sg, net_grads))
}

/// Packed length of the joint recognition parameter vector.
pub fn rec_packed_len(
    config: &ModelConfig,
    n: usize,
    rec: &RecognitionConfig,
) -> usize {
    let h = config.hidden_layers;
    let i0 = recognition_start(config, rec.window);
    let free_means = h * i0;
    // everything from the plain layout except the computed means
    let base = packed_len(config, n) - h * (n - i0);
    let nets: usize = (0..h)
        .map(|l| flat_len(config.layer_dim(l), rec.depth, rec.width))
        .sum();
    let _ = free_means;
    base + nets
}

/// Flatten `(free means, variances, priors, layer params, net weights)`.
pub fn rec_pack<T: Scalar>(
    state: &RevarbState<T>,
    nets: &[RecognitionNet<T>],
    window: RecognitionWindow,
) -> Array1<T> {
    let cfg = &state.config;
    let i0 = recognition_start(cfg, window);
    let mut out = Vec::new();
    for v in &state.variational {
        out.extend(v.means.iter().take(i0).copied());
        out.extend(v.variances.iter().map(|x| x.ln()));
        out.extend(v.prior_means.iter().copied());
        out.extend(v.prior_variances.iter().map(|x| x.ln()));
    }
    for p in &state.layers {
        out.push(p.kernel.signal_variance.ln());
        out.extend(p.kernel.ard_weights.iter().map(|x| x.ln()));
        out.push(crate::model::encode_floored(
            p.noise_variance,
            crate::model::NOISE_VARIANCE_FLOOR,
        ));
        out.extend(p.inducing.pseudo_inputs.iter().copied());
    }
    for net in nets {
        out.extend(net.to_flat());
    }
    Array1::from_vec(out)
}

/// Inverse of [`rec_pack`]; computed means are zeroed and filled by the
/// forward pass.
pub fn rec_unpack<T: Scalar>(
    packed: &Array1<T>,
    config: &ModelConfig,
    n: usize,
    rec: &RecognitionConfig,
) -> Result<(RevarbState<T>, Vec<RecognitionNet<T>>)> {
    let expect = rec_packed_len(config, n, rec);
    if packed.len() != expect {
        return Err(Error::Shape(format!(
            "recognition packed vector has {} entries, expected {}",
            packed.len(),
            expect
        )));
    }
    let i0 = recognition_start(config, rec.window);
    let mut idx = 0usize;
    let mut take = |count: usize| -> Vec<T> {
        let v = packed.slice(ndarray::s![idx..idx + count]).to_vec();
        idx += count;
        v
    };
    let h = config.hidden_layers;
    let mut variational = Vec::with_capacity(h);
    for _ in 0..h {
        let mut means = Array1::<T>::zeros(n);
        for (k, v) in take(i0).into_iter().enumerate() {
            means[k] = v;
        }
        let variances = Array1::from_vec(take(n)).mapv(|x| x.exp());
        let prior_means = Array1::from_vec(take(config.lag));
        let prior_variances = Array1::from_vec(take(config.lag)).mapv(|x| x.exp());
        variational.push(crate::model::VariationalLayer {
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
        let noise_variance =
            crate::model::decode_floored(take(1)[0], crate::model::NOISE_VARIANCE_FLOOR);
        let zeta = Array2::from_shape_vec((config.num_inducing, d), take(config.num_inducing * d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        layers.push(crate::model::LayerParams {
            kernel: crate::kernel::KernelParams {
                signal_variance,
                ard_weights,
            },
            noise_variance,
            inducing: crate::model::InducingSet {
                pseudo_inputs: zeta,
            },
        });
    }
    let mut nets = Vec::with_capacity(h);
    for l in 0..h {
        let d = config.layer_dim(l);
        let count = flat_len(d, rec.depth, rec.width);
        nets.push(RecognitionNet::from_flat(&take(count), d, rec.depth, rec.width)?);
    }
    Ok((
        RevarbState {
            config: config.clone(),
            n,
            variational,
            layers,
        },
        nets,
    ))
}

/// Supervised warm start for the recognition nets: fit each net to map
/// teacher-forced windows of the given mean sequences to the next mean,
/// one net per hidden layer. No GP machinery is involved, so the cost is
/// negligible next to bound evaluations.
///
/// `targets[l]` supplies the full mean sequence of hidden layer `l`; windows
/// substitute these sequences for every latent reference. With the observed
/// outputs as targets this is a plain system-identification warm start; with
/// the means of a fitted unconstrained model it distills that model into the
/// recursion.
pub fn distill_nets<T: Scalar>(
    config: &ModelConfig,
    rec: &RecognitionConfig,
    u: &Array1<T>,
    targets_per_layer: &[Array1<T>],
    nets: Vec<RecognitionNet<T>>,
    max_evals: usize,
) -> Result<Vec<RecognitionNet<T>>> {
    if targets_per_layer.len() != config.hidden_layers {
        return Err(Error::Shape(format!(
            "distill targets: expected {} mean sequences, got {}",
            config.hidden_layers,
            targets_per_layer.len()
        )));
    }
    let i0 = recognition_start(config, rec.window);
    let n = targets_per_layer[0].len();
    let mut out_nets = Vec::with_capacity(nets.len());
    for (l, net0) in nets.into_iter().enumerate() {
        let dim = config.layer_dim(l);
        let windows: Vec<Array1<T>> = (i0..n)
            .map(|i| {
                let w_time = window_time(i, rec.window);
                Array1::from_shape_fn(dim, |d| match regressor_source(config, l, w_time, d) {
                    RegressorSource::Latent { layer, index } => targets_per_layer[layer][index],
                    RegressorSource::Input { index } => u[index],
                })
            })
            .collect();
        let targets: Vec<T> = (i0..n).map(|i| targets_per_layer[l][i]).collect();
        let depth = net0.depth();
        let width = net0.width();
        let x0 = Array1::from_vec(net0.to_flat());
        let objective = |w: &Array1<T>| -> Result<(T, Array1<T>)> {
            let net = RecognitionNet::from_flat(&w.to_vec(), dim, depth, width)?;
            let mut loss = T::zero();
            let mut grads = Array1::<T>::zeros(w.len());
            for (win, t) in windows.iter().zip(targets.iter()) {
                let (out, acts) = net.forward(win)?;
                let r = out - *t;
                loss += r * r;
                let (ng, _) = net.backward(win, &acts, -(r + r));
                grads = grads + Array1::from_vec(ng.to_flat());
            }
            Ok((-loss, grads))
        };
        let solved = crate::optimize::maximize(
            objective,
            x0,
            None,
            &crate::optimize::LbfgsOptions {
                max_evals,
                grad_tol: 1e-8,
                ..Default::default()
            },
            0,
        )?;
        out_nets.push(RecognitionNet::from_flat(
            &solved.x.to_vec(),
            dim,
            depth,
            width,
        )?);
    }
    Ok(out_nets)
}

/// Gradient packing matching [`rec_pack`].
pub fn rec_pack_grads<T: Scalar>(
    state: &RevarbState<T>,
    sg: &StateGrads<T>,
    net_grads: &[NetGrads<T>],
    window: RecognitionWindow,
) -> Array1<T> {
    let cfg = &state.config;
    let i0 = recognition_start(cfg, window);
    let mut out = Vec::new();
    for (g, v) in sg.variational.iter().zip(&state.variational) {
        out.extend(g.d_means.iter().take(i0).copied());
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
    for (g, p) in sg.layers.iter().zip(&state.layers) {
        out.push(g.d_signal_variance * p.kernel.signal_variance);
        out.extend(
            g.d_ard_weights
                .iter()
                .zip(p.kernel.ard_weights.iter())
                .map(|(g, t)| *g * *t),
        );
        out.push(
            g.d_noise_variance
                * (p.noise_variance - T::cast(crate::model::NOISE_VARIANCE_FLOOR)),
        );
        out.extend(g.d_inducing.iter().copied());
    }
    for ng in net_grads {
        out.extend(ng.d_input_map.iter().copied());
        out.extend(ng.d_input_bias.iter().copied());
        for (w, b) in ng.d_hidden_maps.iter().zip(&ng.d_hidden_biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out.extend(ng.d_output_map.iter().copied());
    }
    Array1::from_vec(out)
}
