//! Dense rectifier networks with explicit backpropagation.
//!
//! Every network here is a chain of affine layers with a rectifier between
//! them and a linear head. [`forward`] records the preactivation of every
//! hidden layer (before the rectifier) so activation masks can be read off
//! a single pass, and [`backward`] replays the trace in reverse.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, LabError, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-5;

const POLICY_HEAD_SCALE: f64 = 0.01;
const VALUE_HEAD_SCALE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    PolicyLogits,
    ScalarValue,
}

/// One affine map `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Dense>,
    head: HeadKind,
}

impl Network {
    /// Builds a network from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Dense>, head: HeadKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(LabError::Config("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            contract!(
                layer.bias.len() == layer.out_dim(),
                "layer {i}: bias length {} != output width {}",
                layer.bias.len(),
                layer.out_dim()
            );
            if i + 1 < layers.len() {
                contract!(
                    layer.out_dim() == layers[i + 1].in_dim(),
                    "layer {i} outputs {} but layer {} expects {}",
                    layer.out_dim(),
                    i + 1,
                    layers[i + 1].in_dim()
                );
            }
        }
        Ok(Self { layers, head })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    /// Widths of the hidden layers, in order.
    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.num_hidden()].iter().map(Dense::out_dim).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters in a fixed order: layer by layer, weights (row-major) then biases.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::values)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Dense::values_mut)
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }

    /// `θ ← θ + alpha·d`
    pub fn add_scaled(&mut self, direction: &Gradients, alpha: f64) -> Result<()> {
        direction.check_shape(self)?;
        for (layer, d) in self.layers.iter_mut().zip(&direction.layers) {
            layer.weight.scaled_add(alpha, &d.weight);
            layer.bias.scaled_add(alpha, &d.bias);
        }
        Ok(())
    }
}

/// Per-layer preactivations captured during [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs: Array2<f64>,
    /// One `B × d_l` matrix per hidden layer, taken before the rectifier.
    pub preactivations: Vec<Array2<f64>>,
    pub outputs: Array2<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.inputs.nrows()
    }
}

/// Parameter-shaped buffer used for gradients, optimizer moments and update directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.out_dim(), l.in_dim()))
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Dense::values_mut)
    }

    pub fn global_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    pub fn dot(&self, other: &Gradients) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn check_shape(&self, net: &Network) -> Result<()> {
        contract!(
            self.layers.len() == net.layers.len(),
            "gradient has {} layers, network has {}",
            self.layers.len(),
            net.layers.len()
        );
        for (i, (g, l)) in self.layers.iter().zip(&net.layers).enumerate() {
            contract!(
                g.weight.dim() == l.weight.dim() && g.bias.len() == l.bias.len(),
                "layer {i}: gradient shape {:?} does not match parameter shape {:?}",
                g.weight.dim(),
                l.weight.dim()
            );
        }
        Ok(())
    }
}

/// Creates a network with Glorot-uniform weights, a down-scaled policy head and zero biases.
pub fn init_network(layer_sizes: &[usize], head: HeadKind, seed: u64) -> Result<Network> {
    if layer_sizes.len() < 2 {
        return Err(LabError::Config(format!(
            "need at least input and output sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.iter().any(|&s| s == 0) {
        return Err(LabError::Config(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = layer_sizes.len() - 1;
    let layers = layer_sizes
        .windows(2)
        .enumerate()
        .map(|(i, pair)| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = match (i + 1 == n_layers, head) {
                (false, _) => 1.0,
                (true, HeadKind::PolicyLogits) => POLICY_HEAD_SCALE,
                (true, HeadKind::ScalarValue) => VALUE_HEAD_SCALE,
            };
            let weight = Array2::from_shape_fn((fan_out, fan_in), |_| scale * rng.gen_range(-limit..=limit));
            Dense {
                weight,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Network::from_layers(layers, head)
}

/// Evaluates the network on a batch of row-major inputs.
pub fn forward(net: &Network, inputs: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
    contract!(
        inputs.ncols() == net.input_dim(),
        "input width {} does not match network input {}",
        inputs.ncols(),
        net.input_dim()
    );
    let mut preactivations = Vec::with_capacity(net.num_hidden());
    let mut h = inputs.as_standard_layout().into_owned();
    for (i, layer) in net.layers.iter().enumerate() {
        let z = affine(&h, layer);
        if i + 1 == net.layers.len() {
            return Ok(ForwardTrace {
                inputs: h_in(inputs),
                preactivations,
                outputs: z,
            });
        }
        h = z.mapv(relu);
        preactivations.push(z);
    }
    unreachable!("network has at least one layer")
}

fn h_in(inputs: ArrayView2<'_, f64>) -> Array2<f64> {
    inputs.as_standard_layout().into_owned()
}

/// `x Wᵀ + b` accumulated input by input, so every output row depends only on its own
/// input row and the summation order never depends on the batch it was evaluated in.
fn affine(x: &Array2<f64>, layer: &Dense) -> Array2<f64> {
    let (rows, in_dim, out_dim) = (x.nrows(), layer.in_dim(), layer.out_dim());
    let wt = layer.weight.t().as_standard_layout().into_owned();
    let wt = wt.as_slice().expect("standard layout");
    let bias = layer.bias.as_slice().expect("contiguous bias");
    let xs = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; rows * out_dim];
    for (x_row, out_row) in xs.chunks_exact(in_dim).zip(out.chunks_exact_mut(out_dim)) {
        out_row.copy_from_slice(bias);
        for (&xi, w_row) in x_row.iter().zip(wt.chunks_exact(out_dim)) {
            if xi != 0.0 {
                for (o, &w) in out_row.iter_mut().zip(w_row) {
                    *o += xi * w;
                }
            }
        }
    }
    Array2::from_shape_vec((rows, out_dim), out).expect("shape")
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Reverse-mode gradients of a scalar loss given `dL/d outputs`.
pub fn backward(net: &Network, trace: &ForwardTrace, output_grads: ArrayView2<'_, f64>) -> Result<Gradients> {
    contract!(
        output_grads.dim() == trace.outputs.dim(),
        "output gradient shape {:?} does not match outputs {:?}",
        output_grads.dim(),
        trace.outputs.dim()
    );
    backward_from(net, trace, net.layers.len() - 1, output_grads.to_owned())
}

/// Backpropagates `dL/dZ` of the affine output of `layer` (a hidden preactivation when
/// `layer` is below the head) down to the inputs. Layers above `layer` get zero gradient.
pub fn backward_from(net: &Network, trace: &ForwardTrace, layer: usize, mut delta: Array2<f64>) -> Result<Gradients> {
    contract!(
        trace.preactivations.len() == net.num_hidden(),
        "trace has {} hidden layers, network has {}",
        trace.preactivations.len(),
        net.num_hidden()
    );
    contract!(layer < net.layers.len(), "layer {layer} out of range");
    contract!(
        trace.inputs.ncols() == net.input_dim(),
        "trace inputs do not match network"
    );
    for (z, l) in trace.preactivations.iter().zip(&net.layers) {
        contract!(
            z.nrows() == trace.batch_size() && z.ncols() == l.out_dim(),
            "trace preactivation shape {:?} does not match the network",
            z.dim()
        );
    }
    contract!(
        delta.nrows() == trace.batch_size() && delta.ncols() == net.layers[layer].out_dim(),
        "delta shape {:?} does not match layer {layer}",
        delta.dim()
    );

    let mut grads = Gradients::zeros_like(net);
    for l in (0..=layer).rev() {
        let below = if l == 0 {
            trace.inputs.as_standard_layout().into_owned()
        } else {
            trace.preactivations[l - 1].mapv(relu)
        };
        delta = delta.as_standard_layout().into_owned();
        accumulate_layer_grads(&delta, &below, &mut grads.layers[l]);
        if l == 0 {
            break;
        }
        let mut next = propagate_down(&delta, &net.layers[l].weight);
        // Rectifier subgradient is 0 at exactly 0.
        Zip::from(&mut next)
            .and(&trace.preactivations[l - 1])
            .for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
        delta = next;
    }
    Ok(grads)
}

/// `dW += δᵀ·below`, `db += Σ_b δ_b`, summed over rows in order.
fn accumulate_layer_grads(delta: &Array2<f64>, below: &Array2<f64>, out: &mut Dense) {
    let (out_dim, in_dim) = out.weight.dim();
    let ds = delta.as_slice().expect("standard layout");
    let hs = below.as_slice().expect("standard layout");
    let dw = out.weight.as_slice_mut().expect("standard layout");
    let db = out.bias.as_slice_mut().expect("contiguous bias");
    for (d_row, h_row) in ds.chunks_exact(out_dim).zip(hs.chunks_exact(in_dim)) {
        for ((&d, dw_row), db_o) in d_row.iter().zip(dw.chunks_exact_mut(in_dim)).zip(db.iter_mut()) {
            if d != 0.0 {
                *db_o += d;
                for (g, &h) in dw_row.iter_mut().zip(h_row) {
                    *g += d * h;
                }
            }
        }
    }
}

/// `δ·W`: gradient with respect to the layer input.
fn propagate_down(delta: &Array2<f64>, weight: &Array2<f64>) -> Array2<f64> {
    let (out_dim, in_dim) = weight.dim();
    let rows = delta.nrows();
    let ds = delta.as_slice().expect("standard layout");
    let ws = weight.as_slice().expect("standard layout");
    let mut next = vec![0.0; rows * in_dim];
    for (d_row, n_row) in ds.chunks_exact(out_dim).zip(next.chunks_exact_mut(in_dim)) {
        for (&d, w_row) in d_row.iter().zip(ws.chunks_exact(in_dim)) {
            if d != 0.0 {
                for (n, &w) in n_row.iter_mut().zip(w_row) {
                    *n += d * w;
                }
            }
        }
    }
    Array2::from_shape_vec((rows, in_dim), next).expect("shape")
}

/// Rescales `grads` so the joint L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(LabError::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        Self {
            first_moment: Gradients::zeros_like(net),
            second_moment: Gradients::zeros_like(net),
            step_count: 0,
        }
    }

    /// Folds `grads` into the moments and returns the bias-corrected step direction
    /// `m̂ / (√v̂ + ε)`; the parameter update is `−lr` times this.
    pub fn advance(&mut self, grads: &Gradients) -> Result<Gradients> {
        contract!(
            grads.layers.len() == self.first_moment.layers.len(),
            "gradient layer count does not match optimizer state"
        );
        if !grads.is_finite() {
            return Err(LabError::NonFinite("gradient".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let mut direction = grads.clone();
        let moments = self.first_moment.values_mut().zip(self.second_moment.values_mut());
        for ((g, d), (m, v)) in grads.values().zip(direction.values_mut()).zip(moments) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *d = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
        }
        Ok(direction)
    }
}

/// One bias-corrected Adam update. `lr = 0` advances the moments but leaves parameters untouched.
pub fn adam_step(net: &mut Network, state: &mut AdamState, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(LabError::Config(format!("learning rate must be >= 0, got {lr}")));
    }
    grads.check_shape(net)?;
    let direction = state.advance(grads)?;
    if lr > 0.0 {
        net.add_scaled(&direction, -lr)?;
    }
    if !net.is_finite() {
        return Err(LabError::NonFinite("parameters after Adam step".into()));
    }
    Ok(())
}
