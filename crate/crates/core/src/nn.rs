//! A small ReLU multilayer perceptron with exact reverse-mode gradients and Adam.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! row-major (`outputs x inputs`) followed by its bias vector; gradients use
//! the same layout, so optimizers and serialization work on plain slices.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NfmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub dropout_p: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>) -> Self {
        MlpSpec { input_dim, hidden_widths, activation: Activation::Relu, dropout_p: 0.0, seed: 0 }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(NfmError::Shape("input_dim must be positive".into()));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(NfmError::Shape(format!(
                "hidden widths must be a non-empty list of positive sizes, got {:?}",
                self.hidden_widths
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(NfmError::Domain(format!("dropout probability must lie in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    /// `[input_dim, hidden..., 1]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden_widths.len() + 2);
        sizes.push(self.input_dim);
        sizes.extend_from_slice(&self.hidden_widths);
        sizes.push(1);
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    inputs: usize,
    outputs: usize,
    w_off: usize,
    b_off: usize,
}

fn layout_for(spec: &MlpSpec) -> (Vec<LayerLayout>, usize) {
    let sizes = spec.layer_sizes();
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    let mut off = 0;
    for pair in sizes.windows(2) {
        let (inputs, outputs) = (pair[0], pair[1]);
        let w_off = off;
        let b_off = w_off + inputs * outputs;
        off = b_off + outputs;
        layers.push(LayerLayout { inputs, outputs, w_off, b_off });
    }
    (layers, off)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NetFile", try_from = "NetFile")]
pub struct MlpNet {
    spec: MlpSpec,
    layers: Vec<LayerLayout>,
    params: Vec<f64>,
}

/// Record of one forward pass, consumed by [`MlpNet::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    /// Input followed by each hidden layer's (masked) activation.
    acts: Vec<f64>,
    /// Hidden pre-activations.
    pre: Vec<f64>,
    /// Dropout multipliers per hidden unit; empty when dropout was off.
    mask: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    output: f64,
}

impl Tape {
    pub fn output(&self) -> f64 {
        self.output
    }

    /// Smallest |pre-activation| over all hidden units in this pass.
    pub fn preactivation_margin(&self) -> f64 {
        self.pre.iter().fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }

    /// ReLU on/off pattern over all hidden units.
    pub fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.pre.iter().map(|&z| z > 0.0)
    }
}

impl MlpNet {
    /// He-uniform weights, zero biases, reproducible from `spec.seed`.
    pub fn init(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let (layers, count) = layout_for(&spec);
        let mut params = vec![0.0; count];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for layer in &layers {
            let bound = (6.0 / layer.inputs as f64).sqrt();
            for w in &mut params[layer.w_off..layer.b_off] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(MlpNet { spec, layers, params })
    }

    /// All-zero parameters.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let (layers, count) = layout_for(&spec);
        Ok(MlpNet { spec, layers, params: vec![0.0; count] })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let (layers, count) = layout_for(&spec);
        if params.len() != count {
            return Err(NfmError::Shape(format!("expected {count} parameters, got {}", params.len())));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(NfmError::NonFinite(format!("parameter {i} is {}", params[i])));
        }
        Ok(MlpNet { spec, layers, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Flat index of weight `(row, col)` in layer `layer`.
    pub fn weight_index(&self, layer: usize, row: usize, col: usize) -> usize {
        let l = &self.layers[layer];
        assert!(row < l.outputs && col < l.inputs);
        l.w_off + row * l.inputs + col
    }

    pub fn bias_index(&self, layer: usize, row: usize) -> usize {
        let l = &self.layers[layer];
        assert!(row < l.outputs);
        l.b_off + row
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(NfmError::Shape(format!("expected input of length {}, got {}", self.spec.input_dim, x.len())));
        }
        Ok(())
    }

    /// Evaluation-mode output without recording a tape.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            next.clear();
            for o in 0..l.outputs {
                let row = &self.params[l.w_off + o * l.inputs..l.w_off + (o + 1) * l.inputs];
                let z = self.params[l.b_off + o] + dot(row, &cur);
                next.push(if li == last { z } else { z.max(0.0) });
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur[0])
    }

    /// Forward pass recording a fresh tape. Passing an RNG selects training
    /// mode, in which dropout (if configured) is applied after hidden activations.
    pub fn forward(&self, x: &[f64], dropout_rng: Option<&mut dyn RngCore>) -> Result<(f64, Tape)> {
        let mut tape = Tape::default();
        let y = self.forward_with(x, &mut tape, dropout_rng)?;
        Ok((y, tape))
    }

    /// Forward pass reusing the buffers of `tape`.
    pub fn forward_with(&self, x: &[f64], tape: &mut Tape, dropout_rng: Option<&mut dyn RngCore>) -> Result<f64> {
        self.check_input(x)?;
        let p = self.spec.dropout_p;
        let mut rng = if p > 0.0 { dropout_rng } else { None };
        let keep_scale = 1.0 / (1.0 - p);

        tape.acts.clear();
        tape.pre.clear();
        tape.mask.clear();
        tape.acts.extend_from_slice(x);

        let last = self.layers.len() - 1;
        let mut in_off = 0;
        for (li, l) in self.layers.iter().enumerate() {
            let out_off = tape.acts.len();
            for o in 0..l.outputs {
                let row = &self.params[l.w_off + o * l.inputs..l.w_off + (o + 1) * l.inputs];
                let z = self.params[l.b_off + o] + dot(row, &tape.acts[in_off..in_off + l.inputs]);
                if li == last {
                    tape.output = z;
                } else {
                    tape.pre.push(z);
                    let mut a = z.max(0.0);
                    if let Some(r) = rng.as_deref_mut() {
                        let m = if r.gen::<f64>() < p { 0.0 } else { keep_scale };
                        tape.mask.push(m);
                        a *= m;
                    }
                    tape.acts.push(a);
                }
            }
            in_off = out_off;
        }
        Ok(tape.output)
    }

    /// Exact gradients of `upstream * output`: parameter gradients (flat layout)
    /// and the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape, upstream: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let mut tape = tape.clone();
        let input_grad = self.backward_into(&mut tape, upstream, &mut grads)?.to_vec();
        Ok((grads, input_grad))
    }

    /// Accumulates `upstream * ∂output/∂params` into `grads` and returns
    /// `upstream * ∂output/∂input` (a view into the tape's scratch space).
    pub fn backward_into<'t>(&self, tape: &'t mut Tape, upstream: f64, grads: &mut [f64]) -> Result<&'t [f64]> {
        if grads.len() != self.params.len() {
            return Err(NfmError::Shape(format!("gradient buffer has {} entries, expected {}", grads.len(), self.params.len())));
        }
        let hidden_total: usize = self.spec.hidden_widths.iter().sum();
        if tape.pre.len() != hidden_total || tape.acts.len() != self.spec.input_dim + hidden_total {
            return Err(NfmError::Shape("tape does not match this network".into()));
        }
        let has_mask = !tape.mask.is_empty();

        tape.delta.clear();
        tape.delta.push(upstream);
        // offsets of each layer's input inside `acts`, and of hidden units inside `pre`
        let mut act_off = tape.acts.len();
        let mut pre_off = tape.pre.len();
        for (li, l) in self.layers.iter().enumerate().rev() {
            act_off -= l.inputs;
            let a_in = &tape.acts[act_off..act_off + l.inputs];
            tape.delta_prev.clear();
            tape.delta_prev.resize(l.inputs, 0.0);
            for o in 0..l.outputs {
                let d = tape.delta[o];
                if d == 0.0 {
                    continue;
                }
                grads[l.b_off + o] += d;
                let w_row = l.w_off + o * l.inputs;
                let g_row = &mut grads[w_row..w_row + l.inputs];
                for (g, &a) in g_row.iter_mut().zip(a_in) {
                    *g += d * a;
                }
                let w = &self.params[w_row..w_row + l.inputs];
                for (dp, &wv) in tape.delta_prev.iter_mut().zip(w) {
                    *dp += d * wv;
                }
            }
            if li > 0 {
                // map through the previous hidden layer's ReLU and dropout
                pre_off -= l.inputs;
                for j in 0..l.inputs {
                    let z = tape.pre[pre_off + j];
                    let mut d = if z > 0.0 { tape.delta_prev[j] } else { 0.0 };
                    if has_mask {
                        d *= tape.mask[pre_off + j];
                    }
                    tape.delta_prev[j] = d;
                }
            }
            std::mem::swap(&mut tape.delta, &mut tape.delta_prev);
        }
        Ok(&tape.delta)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// On-disk form of a network: layer sizes header plus per-layer row-major
/// weight matrices and bias vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetFile {
    input_dim: usize,
    hidden_widths: Vec<usize>,
    activation: Activation,
    dropout_p: f64,
    seed: u64,
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<MlpNet> for NetFile {
    fn from(net: MlpNet) -> Self {
        let weights = net.layers.iter().map(|l| net.params[l.w_off..l.b_off].to_vec()).collect();
        let biases = net.layers.iter().map(|l| net.params[l.b_off..l.b_off + l.outputs].to_vec()).collect();
        NetFile {
            input_dim: net.spec.input_dim,
            layer_sizes: net.spec.layer_sizes(),
            hidden_widths: net.spec.hidden_widths,
            activation: net.spec.activation,
            dropout_p: net.spec.dropout_p,
            seed: net.spec.seed,
            weights,
            biases,
        }
    }
}

impl TryFrom<NetFile> for MlpNet {
    type Error = NfmError;

    fn try_from(file: NetFile) -> Result<Self> {
        let spec = MlpSpec {
            input_dim: file.input_dim,
            hidden_widths: file.hidden_widths,
            activation: file.activation,
            dropout_p: file.dropout_p,
            seed: file.seed,
        };
        if spec.layer_sizes() != file.layer_sizes {
            return Err(NfmError::Shape(format!(
                "layer_sizes {:?} inconsistent with input_dim/hidden_widths",
                file.layer_sizes
            )));
        }
        if file.weights.len() != file.biases.len() || file.weights.len() + 1 != file.layer_sizes.len() {
            return Err(NfmError::Shape("wrong number of weight/bias arrays".into()));
        }
        let mut params = Vec::new();
        for (w, b) in file.weights.into_iter().zip(file.biases) {
            params.extend(w);
            params.extend(b);
        }
        MlpNet::from_params(spec, params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn for_net(net: &MlpNet, config: AdamConfig) -> Self {
        Self::new(net.param_count(), config)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction. Weight decay is added to the
    /// descent direction (L2 form); `maximize` ascends instead of descending.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], maximize: bool) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NfmError::Shape(format!(
                "adam state has {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NfmError::NonFinite(format!("gradient entry {i} is {}", grads[i])));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let sign = if maximize { -1.0 } else { 1.0 };
        for i in 0..params.len() {
            let g = sign * grads[i] + c.weight_decay * params[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

pub fn adam_step(net: &mut MlpNet, grads: &[f64], state: &mut AdamState, maximize: bool) -> Result<()> {
    state.step(net.params_mut(), grads, maximize)
}
