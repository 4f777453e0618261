//! The ρ-regressor: a shared MLP encoder feeding a three-layer regression head.
//!
//! `x`, `y1` and `y2` pass through the same encoder; the three feature
//! vectors are concatenated in that order and mapped to `tanh(..)`, so the
//! output always lies in `[-1, 1]`. Gradients are computed by hand.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, MwrError, Result};
use crate::rho::RhoRank;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn kaiming_uniform(inputs: usize, outputs: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let gain = if activation == Activation::Relu { 6.0 } else { 3.0 };
        let bound = (gain / inputs as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs, activation);
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }

    fn pre_activation(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v)),
        );
    }
}

/// Per-layer values kept from a forward pass for backpropagation.
#[derive(Debug, Default, Clone)]
struct MlpTrace {
    /// Input to each layer, followed by the final output.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    fn build(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        mut init: impl FnMut(usize, usize, Activation) -> Dense,
    ) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| init(dims[i], dims[i + 1], if i + 1 == n { output } else { hidden }))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs, l.activation))
                .collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut pre = Vec::new();
        for layer in &self.layers {
            layer.pre_activation(&cur, &mut pre);
            cur.clear();
            cur.extend(pre.iter().map(|&z| layer.activation.apply(z)));
        }
        cur
    }

    fn forward_traced(&self, x: &[f64], name: &str) -> Result<MlpTrace> {
        let mut trace = MlpTrace::default();
        trace.activations.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = Vec::with_capacity(layer.outputs);
            layer.pre_activation(trace.activations.last().unwrap(), &mut pre);
            let out: Vec<f64> = pre.iter().map(|&z| layer.activation.apply(z)).collect();
            if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
                return Err(MwrError::Numerical {
                    layer: format!("{name} layer {i}"),
                    detail: format!("non-finite activation {bad}"),
                });
            }
            trace.pre.push(pre);
            trace.activations.push(out);
        }
        Ok(trace)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    fn backward(&self, trace: &MlpTrace, grad_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut delta: Vec<f64> = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let pre = &trace.pre[i];
            let out = &trace.activations[i + 1];
            let input = &trace.activations[i];
            for (j, d) in delta.iter_mut().enumerate() {
                *d *= layer.activation.derivative(pre[j], out[j]);
            }
            let g = &mut grads.layers[i];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[j] += d;
                let row = &mut g.weights[j * layer.inputs..(j + 1) * layer.inputs];
                for (w, &v) in row.iter_mut().zip(input) {
                    *w += d * v;
                }
            }
            let mut next = vec![0.0; layer.inputs];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[j * layer.inputs..(j + 1) * layer.inputs];
                for (n, &w) in next.iter_mut().zip(row) {
                    *n += d * w;
                }
            }
            delta = next;
        }
        delta
    }

    fn tensors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionHeadSpec {
    pub layer_dims: [usize; 3],
}

impl Default for RegressionHeadSpec {
    fn default() -> Self {
        Self {
            layer_dims: [256, 64, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressorSpec {
    pub encoder: EncoderSpec,
    pub head: RegressionHeadSpec,
}

impl RegressorSpec {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.input_dim == 0 || e.hidden_dims.contains(&0) {
            return config("encoder dimensions must be positive");
        }
        if e.output_dim < 2 {
            return config(format!("feature dimension must be >= 2, got {}", e.output_dim));
        }
        let h = &self.head.layer_dims;
        if h[0] == 0 || h[1] == 0 || h[2] != 1 {
            return config(format!("head dims must be positive and end in 1, got {h:?}"));
        }
        Ok(())
    }

    fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.encoder.input_dim];
        dims.extend(&self.encoder.hidden_dims);
        dims.push(self.encoder.output_dim);
        dims
    }

    fn head_dims(&self) -> Vec<usize> {
        let mut dims = vec![3 * self.encoder.output_dim];
        dims.extend(self.head.layer_dims);
        dims
    }
}

/// One training example: raw inputs of `x`, `y1`, `y2` and the target ρ.
#[derive(Debug, Clone, Copy)]
pub struct TripletInput<'a> {
    pub x: &'a [f64],
    pub y1: &'a [f64],
    pub y2: &'a [f64],
    pub rho: f64,
}

/// Gradients with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Mlp,
    pub head: Mlp,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.encoder
            .tensors()
            .chain(self.head.tensors())
            .map(Vec::as_slice)
            .collect()
    }

    fn scale(&mut self, factor: f64) {
        for t in self.encoder.tensors_mut().chain(self.head.tensors_mut()) {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoRegressor {
    pub spec: RegressorSpec,
    pub seed: u64,
    pub encoder: Mlp,
    pub head: Mlp,
}

impl RhoRegressor {
    /// Kaiming-uniform initialization with zero biases.
    pub fn new(spec: RegressorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::build(
            &spec.encoder_dims(),
            Activation::Relu,
            Activation::Identity,
            |i, o, a| Dense::kaiming_uniform(i, o, a, &mut rng),
        );
        let head = Mlp::build(&spec.head_dims(), Activation::Relu, Activation::Tanh, |i, o, a| {
            Dense::kaiming_uniform(i, o, a, &mut rng)
        });
        Ok(Self {
            spec,
            seed,
            encoder,
            head,
        })
    }

    /// All parameters zero.
    pub fn zeros(spec: RegressorSpec) -> Result<Self> {
        spec.validate()?;
        let encoder = Mlp::build(
            &spec.encoder_dims(),
            Activation::Relu,
            Activation::Identity,
            Dense::zeros,
        );
        let head = Mlp::build(&spec.head_dims(), Activation::Relu, Activation::Tanh, Dense::zeros);
        Ok(Self {
            spec,
            seed: 0,
            encoder,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.encoder.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.encoder.output_dim
    }

    pub fn encode(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.input_dim() {
            return Err(MwrError::Shape {
                context: "encode",
                expected: self.input_dim(),
                got: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(MwrError::Data("non-finite input feature".into()));
        }
        Ok(self.encoder.forward(features))
    }

    fn check_feature(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.feature_dim() {
            return Err(MwrError::Shape {
                context: "regress_rho",
                expected: self.feature_dim(),
                got: f.len(),
            });
        }
        Ok(())
    }

    /// Projects one branch's feature through its block of the first head layer.
    ///
    /// The first head layer is linear in the concatenation, so its
    /// pre-activation is the sum of three per-branch projections plus the
    /// bias. Caching projections makes repeated pair scoring cheap.
    pub fn project(&self, branch: Branch, feature: &[f64]) -> Vec<f64> {
        let layer = &self.head.layers[0];
        let d = self.feature_dim();
        let offset = branch as usize * d;
        layer
            .weights
            .chunks_exact(layer.inputs)
            .map(|row| row[offset..offset + d].iter().zip(feature).map(|(w, v)| w * v).sum())
            .collect()
    }

    /// Head output from precomputed branch projections.
    pub fn rho_from_projections(&self, px: &[f64], p1: &[f64], p2: &[f64]) -> f64 {
        let first = &self.head.layers[0];
        let mut cur: Vec<f64> = (0..first.outputs)
            .map(|j| first.activation.apply(px[j] + p1[j] + p2[j] + first.bias[j]))
            .collect();
        let mut pre = Vec::new();
        for layer in &self.head.layers[1..] {
            layer.pre_activation(&cur, &mut pre);
            cur.clear();
            cur.extend(pre.iter().map(|&z| layer.activation.apply(z)));
        }
        cur[0]
    }

    pub fn regress_rho(&self, f_x: &[f64], f_y1: &[f64], f_y2: &[f64]) -> Result<RhoRank> {
        self.check_feature(f_x)?;
        self.check_feature(f_y1)?;
        self.check_feature(f_y2)?;
        let rho = self.rho_from_projections(
            &self.project(Branch::Input, f_x),
            &self.project(Branch::Lower, f_y1),
            &self.project(Branch::Upper, f_y2),
        );
        RhoRank::clamped(rho)
    }

    /// Mean squared error over `batch` and its exact gradient.
    pub fn loss_and_gradients(&self, batch: &[TripletInput<'_>]) -> Result<(f64, Gradients)> {
        self.gradients_masked(batch, [true; 3])
    }

    /// Gradients where only `branch` propagates back into the encoder. The
    /// head gradient is unaffected.
    pub fn branch_gradients(&self, batch: &[TripletInput<'_>], branch: Branch) -> Result<Gradients> {
        let mut mask = [false; 3];
        mask[branch as usize] = true;
        Ok(self.gradients_masked(batch, mask)?.1)
    }

    fn gradients_masked(&self, batch: &[TripletInput<'_>], mask: [bool; 3]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return config("empty training batch");
        }
        let d = self.feature_dim();
        let mut grads = Gradients {
            encoder: self.encoder.zeros_like(),
            head: self.head.zeros_like(),
        };
        let mut loss = 0.0;
        for item in batch {
            if !(-1.0..=1.0).contains(&item.rho) {
                return Err(MwrError::Data(format!("target rho {} outside [-1, 1]", item.rho)));
            }
            let inputs = [item.x, item.y1, item.y2];
            let mut traces = Vec::with_capacity(3);
            let mut concat = Vec::with_capacity(3 * d);
            for input in inputs {
                if input.len() != self.input_dim() {
                    return Err(MwrError::Shape {
                        context: "loss_and_gradients",
                        expected: self.input_dim(),
                        got: input.len(),
                    });
                }
                let t = self.encoder.forward_traced(input, "encoder")?;
                concat.extend_from_slice(t.activations.last().unwrap());
                traces.push(t);
            }
            let head_trace = self.head.forward_traced(&concat, "head")?;
            let rho_hat = head_trace.activations.last().unwrap()[0];
            let err = rho_hat - item.rho;
            loss += err * err;
            let grad_concat = self.head.backward(&head_trace, &[2.0 * err], &mut grads.head);
            for (b, trace) in traces.iter().enumerate() {
                if mask[b] {
                    self.encoder
                        .backward(trace, &grad_concat[b * d..(b + 1) * d], &mut grads.encoder);
                }
            }
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(MwrError::Numerical {
                layer: "loss".into(),
                detail: format!("non-finite loss {loss}"),
            });
        }
        Ok((loss, grads))
    }

    /// Parameter tensors in declared order: encoder layers then head layers,
    /// weights before bias within each layer.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.encoder
            .tensors()
            .chain(self.head.tensors())
            .map(Vec::as_slice)
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.encoder.tensors_mut().chain(self.head.tensors_mut()).collect()
    }

    fn tensor_names(&self) -> Vec<(String, Vec<usize>)> {
        let mut names = Vec::new();
        for (part, mlp) in [("encoder", &self.encoder), ("head", &self.head)] {
            for (i, l) in mlp.layers.iter().enumerate() {
                names.push((format!("{part}.{i}.weight"), vec![l.outputs, l.inputs]));
                names.push((format!("{part}.{i}.bias"), vec![l.outputs]));
            }
        }
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over the architecture and every parameter bit pattern.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        for t in self.tensors() {
            for v in t {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Which slot of the concatenated head input a feature occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Input = 0,
    Lower = 1,
    Upper = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_model(model: &RhoRegressor) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(model: &mut RhoRegressor, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let g = grads.tensors();
    let mut params = model.tensors_mut();
    if g.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(MwrError::Shape {
            context: "adam_step tensors",
            expected: params.len(),
            got: g.len(),
        });
    }
    for (i, p) in params.iter().enumerate() {
        if p.len() != g[i].len() || p.len() != state.m[i].len() || p.len() != state.v[i].len() {
            return Err(MwrError::Shape {
                context: "adam_step tensor",
                expected: p.len(),
                got: g[i].len(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.len() {
            let gk = g[i][k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: RegressorSpec,
    pub seed: u64,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Option<AdamState>,
    /// Run that produced the checkpoint.
    #[serde(default)]
    pub run_id: Option<String>,
}

impl Checkpoint {
    pub fn from_model(model: &RhoRegressor, optimizer: Option<&AdamState>) -> Self {
        let tensors = model
            .tensor_names()
            .into_iter()
            .zip(model.tensors())
            .map(|((name, shape), data)| NamedTensor {
                name,
                shape,
                data: data.to_vec(),
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            spec: model.spec.clone(),
            seed: model.seed,
            tensors,
            optimizer: optimizer.cloned(),
            run_id: None,
        }
    }

    pub fn into_model(self) -> Result<(RhoRegressor, Option<AdamState>)> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(MwrError::Format(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        let mut model = RhoRegressor::zeros(self.spec)?;
        model.seed = self.seed;
        let expected = model.tensor_names();
        if expected.len() != self.tensors.len() {
            return Err(MwrError::Format(format!(
                "checkpoint has {} tensors, architecture needs {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((dst, (name, shape)), src) in model.tensors_mut().into_iter().zip(expected).zip(self.tensors) {
            if src.name != name || src.shape != shape || src.data.len() != dst.len() {
                return Err(MwrError::Format(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    src.name, src.shape
                )));
            }
            *dst = src.data;
        }
        Ok((model, self.optimizer))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::harness::io::write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small_spec() -> RegressorSpec {
        RegressorSpec {
            encoder: EncoderSpec {
                input_dim: 4,
                hidden_dims: vec![6],
                output_dim: 3,
            },
            head: RegressionHeadSpec { layer_dims: [8, 5, 1] },
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec();
        s.encoder.output_dim = 1;
        assert!(RhoRegressor::new(s, 0).is_err());
        let mut s = small_spec();
        s.head.layer_dims = [8, 5, 2];
        assert!(RhoRegressor::new(s, 0).is_err());
    }

    #[test]
    fn zero_model_behaviour() {
        let m = RhoRegressor::zeros(small_spec()).unwrap();
        assert_eq!(m.encode(&[0.0; 4]).unwrap(), vec![0.0; 3]);
        let f = [1.0, -2.0, 0.5];
        assert_eq!(m.regress_rho(&f, &f, &f).unwrap().value(), 0.0);
    }

    #[test]
    fn encode_errors() {
        let m = RhoRegressor::new(small_spec(), 1).unwrap();
        assert!(matches!(m.encode(&[0.0; 3]), Err(MwrError::Shape { .. })));
        assert!(matches!(m.encode(&[0.0, f64::NAN, 0.0, 0.0]), Err(MwrError::Data(_))));
        assert!(matches!(
            m.regress_rho(&[0.0; 2], &[0.0; 3], &[0.0; 3]),
            Err(MwrError::Shape { .. })
        ));
    }

    #[test]
    fn encode_is_deterministic_and_lipschitz() {
        let m = RhoRegressor::new(small_spec(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_vec(&mut rng, 4);
        assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
        let base = m.encode(&x).unwrap();
        let mut ratios = Vec::new();
        for eps in [1e-3, 1e-4, 1e-5] {
            let mut xp = x.clone();
            xp[1] += eps;
            let moved = m.encode(&xp).unwrap();
            let dist: f64 = moved.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
            ratios.push(dist / eps);
        }
        // O(eps) movement: the ratio stays bounded and stable as eps shrinks
        assert!(ratios.iter().all(|r| *r < 1e3));
        assert!((ratios[1] - ratios[2]).abs() <= 1e-3 * ratios[1].max(1.0));
    }

    #[test]
    fn output_is_bounded_and_order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = RhoRegressor::new(small_spec(), 7).unwrap();
        for _ in 0..200 {
            let f: Vec<Vec<f64>> = (0..3)
                .map(|_| random_vec(&mut rng, 3).iter().map(|v| v * 50.0).collect())
                .collect();
            let r = m.regress_rho(&f[0], &f[1], &f[2]).unwrap().value();
            assert!((-1.0..=1.0).contains(&r));
        }
        let f: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 3)).collect();
        let a = m.regress_rho(&f[0], &f[1], &f[2]).unwrap();
        let b = m.regress_rho(&f[0], &f[2], &f[1]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn projections_match_dense_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = RhoRegressor::new(small_spec(), 2).unwrap();
        let f: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 3)).collect();
        let concat: Vec<f64> = f.concat();
        let dense = m.head.forward(&concat)[0];
        let fast = m.regress_rho(&f[0], &f[1], &f[2]).unwrap().value();
        assert!((dense - fast).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let m = RhoRegressor::zeros(small_spec()).unwrap();
        let x = [0.3; 4];
        let batch = [TripletInput {
            x: &x,
            y1: &x,
            y2: &x,
            rho: 0.0,
        }];
        let (loss, grads) = m.loss_and_gradients(&batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn duplicated_batch_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = RhoRegressor::new(small_spec(), 4).unwrap();
        let (x, y1, y2) = (
            random_vec(&mut rng, 4),
            random_vec(&mut rng, 4),
            random_vec(&mut rng, 4),
        );
        let item = TripletInput {
            x: &x,
            y1: &y1,
            y2: &y2,
            rho: 0.25,
        };
        let (l1, g1) = m.loss_and_gradients(&[item]).unwrap();
        let (l2, g2) = m.loss_and_gradients(&[item, item]).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bad_targets_are_rejected() {
        let m = RhoRegressor::zeros(small_spec()).unwrap();
        let x = [0.0; 4];
        assert!(m.loss_and_gradients(&[]).is_err());
        let batch = [TripletInput {
            x: &x,
            y1: &x,
            y2: &x,
            rho: 1.5,
        }];
        assert!(matches!(m.loss_and_gradients(&batch), Err(MwrError::Data(_))));
    }

    #[test]
    fn encoder_gradient_is_sum_of_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = RhoRegressor::new(small_spec(), 8).unwrap();
        let vs: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, 4)).collect();
        let batch = [
            TripletInput {
                x: &vs[0],
                y1: &vs[1],
                y2: &vs[2],
                rho: -0.4,
            },
            TripletInput {
                x: &vs[3],
                y1: &vs[4],
                y2: &vs[5],
                rho: 0.9,
            },
        ];
        let (_, full) = m.loss_and_gradients(&batch).unwrap();
        let parts: Vec<Gradients> = [Branch::Input, Branch::Lower, Branch::Upper]
            .into_iter()
            .map(|b| m.branch_gradients(&batch, b).unwrap())
            .collect();
        let full_enc: Vec<f64> = full.encoder.tensors().flatten().copied().collect();
        let summed: Vec<f64> = (0..full_enc.len())
            .map(|i| {
                parts
                    .iter()
                    .map(|p| p.encoder.tensors().flatten().nth(i).copied().unwrap())
                    .sum()
            })
            .collect();
        for (a, b) in full_enc.iter().zip(&summed) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert_eq!(full.head, parts[0].head);
    }

    fn single_param_model() -> RhoRegressor {
        RhoRegressor::new(small_spec(), 0).unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut m = single_param_model();
        let before = m.clone();
        let zero = Gradients {
            encoder: m.encoder.zeros_like(),
            head: m.head.zeros_like(),
        };
        let mut state = AdamState::for_model(&m);
        adam_step(&mut m, &zero, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(m, before);
    }

    fn constant_grads(m: &RhoRegressor, g: f64) -> Gradients {
        let mut grads = Gradients {
            encoder: m.encoder.zeros_like(),
            head: m.head.zeros_like(),
        };
        for t in grads.encoder.tensors_mut().chain(grads.head.tensors_mut()) {
            t.iter_mut().for_each(|v| *v = g);
        }
        grads
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = single_param_model();
        let before = m.clone();
        let grads = constant_grads(&m, 0.37);
        let mut state = AdamState::for_model(&m);
        let cfg = AdamConfig::default();
        adam_step(&mut m, &grads, &mut state, &cfg).unwrap();
        for (a, b) in m.tensors().iter().zip(before.tensors()) {
            for (u, v) in a.iter().zip(b) {
                assert!(((v - u) - cfg.lr).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adam_constant_gradient_converges_to_lr_sign() {
        let mut m = single_param_model();
        let grads = constant_grads(&m, -2.5);
        let mut state = AdamState::for_model(&m);
        let cfg = AdamConfig::default();
        for _ in 0..10_000 {
            adam_step(&mut m, &grads, &mut state, &cfg).unwrap();
        }
        let before = m.clone();
        adam_step(&mut m, &grads, &mut state, &cfg).unwrap();
        let step = m.tensors()[0][0] - before.tensors()[0][0];
        // sign(g) = -1, so parameters move up by lr
        assert!((step - cfg.lr).abs() < 1e-3 * cfg.lr, "step {step}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = RhoRegressor::new(small_spec(), 99).unwrap();
        let mut state = AdamState::for_model(&m);
        state.step = 3;
        state.m[0][0] = 0.1 + 0.2;
        let ckpt = Checkpoint::from_model(&m, Some(&state));
        let json = serde_json::to_vec(&ckpt).unwrap();
        let back: Checkpoint = serde_json::from_slice(&json).unwrap();
        let (m2, s2) = back.into_model().unwrap();
        assert_eq!(m2.digest(), m.digest());
        assert_eq!(s2.unwrap(), state);
        for (a, b) in m.tensors().iter().zip(m2.tensors()) {
            assert!(a.iter().zip(b).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn checkpoint_rejects_mismatch() {
        let m = RhoRegressor::new(small_spec(), 1).unwrap();
        let mut ckpt = Checkpoint::from_model(&m, None);
        ckpt.tensors[0].data.pop();
        assert!(matches!(ckpt.into_model(), Err(MwrError::Format(_))));
        let mut ckpt = Checkpoint::from_model(&m, None);
        ckpt.format_version = 99;
        assert!(ckpt.into_model().is_err());
    }
}
