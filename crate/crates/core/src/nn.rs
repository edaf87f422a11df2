//! Dense trunk-and-branches networks with hand-written reverse-mode gradients,
//! orthogonal initialization, Adam and global gradient-norm clipping.
//!
//! Parameters live in one flat `Vec<f64>` so that optimizers, clipping and
//! checkpoints can treat a network as a single vector.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("tape was recorded for parameter generation {tape}, network is at {network}")]
    StaleTape { tape: u64, network: u64 },
    #[error("non-finite gradient component at index {0}")]
    NonFiniteGradient(usize),
    #[error("invalid network specification: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Sigmoid => 2,
            Activation::Linear => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            2 => Activation::Sigmoid,
            3 => Activation::Linear,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn relu(width: usize) -> Self {
        Self { width, activation: Activation::Relu }
    }
}

/// A branch: hidden layers followed by a head layer with its own activation.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSpec {
    pub hidden: Vec<LayerSpec>,
    pub out_dim: usize,
    pub head: Activation,
    /// Orthogonal-initialization gain of the head layer.
    pub head_gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub trunk: Vec<LayerSpec>,
    pub branches: Vec<BranchSpec>,
}

impl NetworkSpec {
    /// Actor: shared trunk `[64]`, then a tanh mean branch and a sigmoid
    /// standard-deviation branch, each with one hidden layer of 64.
    pub fn actor(input_dim: usize, action_dim: usize) -> Self {
        Self {
            input_dim,
            trunk: vec![LayerSpec::relu(64)],
            branches: vec![
                BranchSpec {
                    hidden: vec![LayerSpec::relu(64)],
                    out_dim: action_dim,
                    head: Activation::Tanh,
                    head_gain: 0.01,
                },
                BranchSpec {
                    hidden: vec![LayerSpec::relu(64)],
                    out_dim: action_dim,
                    head: Activation::Sigmoid,
                    head_gain: 1.0,
                },
            ],
        }
    }

    /// Critic: `[64, 64]` relu layers and a scalar linear head.
    pub fn critic(input_dim: usize) -> Self {
        Self {
            input_dim,
            trunk: vec![LayerSpec::relu(64), LayerSpec::relu(64)],
            branches: vec![BranchSpec { hidden: vec![], out_dim: 1, head: Activation::Linear, head_gain: 1.0 }],
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let zero_width = self.trunk.iter().chain(self.branches.iter().flat_map(|b| b.hidden.iter())).any(|l| l.width == 0);
        if self.input_dim == 0 || zero_width {
            return Err(NnError::Spec("all layer widths must be positive".into()));
        }
        if self.branches.is_empty() || self.branches.iter().any(|b| b.out_dim == 0) {
            return Err(NnError::Spec("at least one branch with a positive output size is required".into()));
        }
        Ok(())
    }

    pub fn trunk_output_dim(&self) -> usize {
        self.trunk.last().map_or(self.input_dim, |l| l.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DenseLayout {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
    activation: Activation,
    gain: f64,
}

impl DenseLayout {
    fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Intermediates of one forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    generation: u64,
    input: Vec<f64>,
    /// Post-activation output of every layer, in layout order.
    outputs: Vec<Vec<f64>>,
}

impl Tape {
    /// Output of branch `b`'s head.
    pub fn head(&self, net: &Network, b: usize) -> &[f64] {
        &self.outputs[net.head_layer[b]]
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<DenseLayout>,
    /// Index range of each branch's layers in `layers`.
    branch_layers: Vec<std::ops::Range<usize>>,
    head_layer: Vec<usize>,
    params: Vec<f64>,
    generation: u64,
}

impl Network {
    /// Network with all parameters zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |inputs: usize, outputs: usize, activation: Activation, gain: f64| {
            let layout = DenseLayout { inputs, outputs, weights: offset, bias: offset + inputs * outputs, activation, gain };
            offset += layout.param_count();
            layers.push(layout);
        };
        let mut width = spec.input_dim;
        for l in &spec.trunk {
            push(width, l.width, l.activation, 1.0);
            width = l.width;
        }
        let trunk_out = width;
        let mut branch_layers = Vec::new();
        let mut head_layer = Vec::new();
        let mut count = spec.trunk.len();
        for b in &spec.branches {
            let start = count;
            let mut w = trunk_out;
            for l in &b.hidden {
                push(w, l.width, l.activation, 1.0);
                w = l.width;
            }
            push(w, b.out_dim, b.head, b.head_gain);
            count += b.hidden.len() + 1;
            branch_layers.push(start..count);
            head_layer.push(count - 1);
        }
        Ok(Self { spec, layers, branch_layers, head_layer, params: vec![0.0; offset], generation: 0 })
    }

    /// Orthogonal weights (scaled by the layer gain) and zero biases.
    pub fn orthogonal<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(spec)?;
        for layer in net.layers.clone() {
            let w = orthogonal_matrix(layer.outputs, layer.inputs, rng);
            for (dst, src) in net.params[layer.weights..layer.bias].iter_mut().zip(w) {
                *dst = layer.gain * src;
            }
        }
        Ok(net)
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self, NnError> {
        let mut net = Self::zeros(spec)?;
        if params.len() != net.params.len() {
            return Err(NnError::Dimension(format!(
                "specification needs {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Weight matrix of layer `k` in row-major `(outputs, inputs)` order.
    pub fn layer_weights(&self, k: usize) -> (&[f64], usize, usize) {
        let l = &self.layers[k];
        (&self.params[l.weights..l.bias], l.outputs, l.inputs)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    fn dense_forward(&self, layer: &DenseLayout, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let w = &self.params[layer.weights..layer.bias];
        let b = &self.params[layer.bias..layer.bias + layer.outputs];
        for o in 0..layer.outputs {
            let z = b[o] + dot(&w[o * layer.inputs..(o + 1) * layer.inputs], x);
            out.push(layer.activation.apply(z));
        }
    }

    /// Forward pass recording intermediates into `tape`.
    pub fn forward_into(&self, input: &[f64], tape: &mut Tape) -> Result<(), NnError> {
        if input.len() != self.spec.input_dim {
            return Err(NnError::Dimension(format!(
                "network expects {} inputs, got {}",
                self.spec.input_dim,
                input.len()
            )));
        }
        tape.generation = self.generation;
        tape.input.clear();
        tape.input.extend_from_slice(input);
        tape.outputs.resize_with(self.layers.len(), Vec::new);
        let trunk = self.spec.trunk.len();
        for k in 0..trunk {
            let (done, rest) = tape.outputs.split_at_mut(k);
            let x = if k == 0 { &tape.input[..] } else { &done[k - 1][..] };
            self.dense_forward(&self.layers[k], x, &mut rest[0]);
        }
        for range in &self.branch_layers {
            for k in range.clone() {
                let (done, rest) = tape.outputs.split_at_mut(k);
                let x = if k == range.start {
                    if trunk == 0 {
                        &tape.input[..]
                    } else {
                        &done[trunk - 1][..]
                    }
                } else {
                    &done[k - 1][..]
                };
                self.dense_forward(&self.layers[k], x, &mut rest[0]);
            }
        }
        Ok(())
    }

    /// Forward pass returning the output of every branch head and the tape.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<Vec<f64>>, Tape), NnError> {
        let mut tape = Tape::default();
        self.forward_into(input, &mut tape)?;
        let heads = self.head_layer.iter().map(|&k| tape.outputs[k].clone()).collect();
        Ok((heads, tape))
    }

    /// Accumulates into `grads` the gradient of a scalar loss whose derivatives
    /// with respect to each head output are `head_grads`.
    pub fn backward_into(&self, tape: &Tape, head_grads: &[&[f64]], grads: &mut [f64]) -> Result<(), NnError> {
        if tape.generation != self.generation || tape.outputs.len() != self.layers.len() {
            return Err(NnError::StaleTape { tape: tape.generation, network: self.generation });
        }
        if grads.len() != self.params.len() {
            return Err(NnError::Dimension(format!(
                "gradient buffer has {} entries, network has {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        if head_grads.len() != self.branch_layers.len() {
            return Err(NnError::Dimension(format!(
                "expected {} head gradients, got {}",
                self.branch_layers.len(),
                head_grads.len()
            )));
        }
        let trunk = self.spec.trunk.len();
        let mut trunk_delta = vec![0.0; self.spec.trunk_output_dim()];
        let mut upstream = Vec::new();
        for (range, g) in self.branch_layers.iter().zip(head_grads) {
            let head = &self.layers[range.end - 1];
            if g.len() != head.outputs {
                return Err(NnError::Dimension(format!(
                    "head gradient has {} entries, head has {} outputs",
                    g.len(),
                    head.outputs
                )));
            }
            upstream.clear();
            upstream.extend_from_slice(g);
            for k in range.clone().rev() {
                let x = if k == range.start {
                    if trunk == 0 {
                        &tape.input[..]
                    } else {
                        &tape.outputs[trunk - 1][..]
                    }
                } else {
                    &tape.outputs[k - 1][..]
                };
                upstream = self.dense_backward(k, x, &tape.outputs[k], &upstream, grads);
            }
            axpy(1.0, &upstream, &mut trunk_delta);
        }
        let mut upstream = trunk_delta;
        for k in (0..trunk).rev() {
            let x = if k == 0 { &tape.input[..] } else { &tape.outputs[k - 1][..] };
            upstream = self.dense_backward(k, x, &tape.outputs[k], &upstream, grads);
        }
        Ok(())
    }

    /// Gradient of a loss with the given head derivatives.
    pub fn backward(&self, tape: &Tape, head_grads: &[&[f64]]) -> Result<Vec<f64>, NnError> {
        let mut grads = vec![0.0; self.params.len()];
        self.backward_into(tape, head_grads, &mut grads)?;
        Ok(grads)
    }

    /// Backpropagates `d_out` (w.r.t. the layer output) through layer `k`;
    /// returns the derivative w.r.t. the layer input.
    fn dense_backward(&self, k: usize, x: &[f64], y: &[f64], d_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let layer = &self.layers[k];
        let (n_in, n_out) = (layer.inputs, layer.outputs);
        let w = &self.params[layer.weights..layer.bias];
        let mut d_in = vec![0.0; n_in];
        for o in 0..n_out {
            let dz = d_out[o] * layer.activation.derivative_from_output(y[o]);
            if dz == 0.0 {
                continue;
            }
            grads[layer.bias + o] += dz;
            let row = layer.weights + o * n_in;
            axpy(dz, x, &mut grads[row..row + n_in]);
            axpy(dz, &w[o * n_in..(o + 1) * n_in], &mut d_in);
        }
        d_in
    }
}

/// Equal architecture and parameters; the tape generation is not compared.
impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

/// `rows x cols` matrix with orthonormal rows (`rows <= cols`) or orthonormal
/// columns (`rows > cols`), from Gram-Schmidt on a Gaussian sample.
pub fn orthogonal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    // Orthonormalize `k` vectors of length `len`; the result is the transposed
    // layout when rows > cols.
    let (k, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = (0..k).map(|_| (0..len).map(|_| rng.sample(StandardNormal)).collect()).collect();
    for i in 0..k {
        // two passes of modified Gram-Schmidt keep the residual at rounding level
        for _ in 0..2 {
            for j in 0..i {
                let (done, rest) = vecs.split_at_mut(i);
                let proj = dot(&rest[0], &done[j]);
                axpy(-proj, &done[j], &mut rest[0]);
            }
        }
        let norm = dot(&vecs[i], &vecs[i]).sqrt();
        vecs[i].iter_mut().for_each(|v| *v /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows <= cols { vecs[r][c] } else { vecs[c][r] };
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected Adam update. Non-finite gradients are rejected before
    /// any state is modified.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::Dimension(format!(
                "adam state has {} entries (params={}, grads={})",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient(i));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients_global(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}
