//! Independent finite-difference oracle for the regressor's gradients.
//!
//! The forward pass here is written from the public layer fields only and
//! shares no code with the library's forward or backward passes.

#![allow(dead_code)]

use mwr_core::neural::{Activation, Dense, EncoderSpec, RegressionHeadSpec, RegressorSpec, RhoRegressor, TripletInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Triplet {
    pub x: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub rho: f64,
}

impl Triplet {
    pub fn input(&self) -> TripletInput<'_> {
        TripletInput {
            x: &self.x,
            y1: &self.y1,
            y2: &self.y2,
            rho: self.rho,
        }
    }
}

fn layer(l: &Dense, x: &[f64], pre: &mut Vec<f64>) -> Vec<f64> {
    (0..l.outputs)
        .map(|j| {
            let mut z = l.bias[j];
            for i in 0..l.inputs {
                z += l.weights[j * l.inputs + i] * x[i];
            }
            pre.push(z);
            match l.activation {
                Activation::Relu => {
                    if z > 0.0 {
                        z
                    } else {
                        0.0
                    }
                }
                Activation::Tanh => z.tanh(),
                Activation::Identity => z,
            }
        })
        .collect()
}

fn mlp(layers: &[Dense], x: &[f64], relu_pre: &mut Vec<f64>) -> Vec<f64> {
    let mut cur = x.to_vec();
    for l in layers {
        let mut pre = Vec::new();
        cur = layer(l, &cur, &mut pre);
        if l.activation == Activation::Relu {
            relu_pre.extend(pre);
        }
    }
    cur
}

/// Mean squared error of the model over `batch`, plus every ReLU pre-activation seen.
pub fn loss_with_preactivations(model: &RhoRegressor, batch: &[Triplet]) -> (f64, Vec<f64>) {
    let mut pre = Vec::new();
    let mut total = 0.0;
    for t in batch {
        let mut concat = mlp(&model.encoder.layers, &t.x, &mut pre);
        concat.extend(mlp(&model.encoder.layers, &t.y1, &mut pre));
        concat.extend(mlp(&model.encoder.layers, &t.y2, &mut pre));
        let rho = mlp(&model.head.layers, &concat, &mut pre)[0];
        total += (rho - t.rho).powi(2);
    }
    (total / batch.len() as f64, pre)
}

pub fn loss(model: &RhoRegressor, batch: &[Triplet]) -> f64 {
    loss_with_preactivations(model, batch).0
}

/// Random small architecture with random weights and biases, and a random
/// batch, redrawn until every ReLU pre-activation is at least `margin` from
/// the kink.
pub fn random_case(seed: u64, margin: f64) -> (RhoRegressor, Vec<Triplet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let input_dim = rng.random_range(2..=6);
        let spec = RegressorSpec {
            encoder: EncoderSpec {
                input_dim,
                hidden_dims: vec![rng.random_range(3..=10)],
                output_dim: rng.random_range(2..=5),
            },
            head: RegressionHeadSpec {
                layer_dims: [rng.random_range(4..=16), rng.random_range(3..=10), 1],
            },
        };
        let mut model = RhoRegressor::new(spec, rng.random()).unwrap();
        for t in model.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
        let n = rng.random_range(1..=4);
        let vec = |rng: &mut ChaCha8Rng| {
            (0..input_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let batch: Vec<Triplet> = (0..n)
            .map(|_| Triplet {
                x: vec(&mut rng),
                y1: vec(&mut rng),
                y2: vec(&mut rng),
                rho: rng.random_range(-1.0..1.0),
            })
            .collect();
        let (_, pre) = loss_with_preactivations(&model, &batch);
        if pre.iter().all(|z| z.abs() > margin) {
            return (model, batch);
        }
    }
}

/// Largest relative error between analytic and central-difference gradients,
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn max_gradient_error(model: &RhoRegressor, batch: &[Triplet], eps: f64) -> f64 {
    let inputs: Vec<TripletInput<'_>> = batch.iter().map(Triplet::input).collect();
    let (_, grads) = model.loss_and_gradients(&inputs).unwrap();
    let analytic: Vec<f64> = grads.tensors().into_iter().flatten().copied().collect();
    let mut probe = model.clone();
    let shapes: Vec<usize> = probe.tensors().iter().map(|t| t.len()).collect();
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    for (ti, len) in shapes.into_iter().enumerate() {
        for k in 0..len {
            let orig = probe.tensors_mut()[ti][k];
            probe.tensors_mut()[ti][k] = orig + eps;
            let up = loss(&probe, batch);
            probe.tensors_mut()[ti][k] = orig - eps;
            let down = loss(&probe, batch);
            probe.tensors_mut()[ti][k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            flat += 1;
        }
    }
    worst
}
