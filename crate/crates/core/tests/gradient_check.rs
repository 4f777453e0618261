mod common;

use common::{loss, max_gradient_error, random_case, Triplet};
use mwr_core::neural::TripletInput;

#[test]
fn independent_loss_matches_library() {
    for seed in 0..20 {
        let (model, batch) = random_case(seed, 1e-3);
        let inputs: Vec<TripletInput<'_>> = batch.iter().map(Triplet::input).collect();
        let (lib, _) = model.loss_and_gradients(&inputs).unwrap();
        let oracle = loss(&model, &batch);
        assert!(
            (lib - oracle).abs() <= 1e-12 * oracle.max(1.0),
            "seed {seed}: {lib} vs {oracle}"
        );
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 100..150 {
        let (model, batch) = random_case(seed, 1e-3);
        let err = max_gradient_error(&model, &batch, 1e-5);
        assert!(err < 1e-4, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn freshly_initialized_models_also_check() {
    use mwr_core::neural::{EncoderSpec, RegressionHeadSpec, RegressorSpec, RhoRegressor};
    let spec = RegressorSpec {
        encoder: EncoderSpec {
            input_dim: 4,
            hidden_dims: vec![8],
            output_dim: 3,
        },
        head: RegressionHeadSpec { layer_dims: [12, 6, 1] },
    };
    let model = RhoRegressor::new(spec, 5).unwrap();
    let batch = vec![Triplet {
        x: vec![0.3, -0.7, 0.1, 0.9],
        y1: vec![-0.2, 0.4, 0.8, -0.5],
        y2: vec![0.6, 0.2, -0.9, 0.05],
        rho: 0.25,
    }];
    let (_, pre) = common::loss_with_preactivations(&model, &batch);
    // zero biases can put units exactly on the kink; only check away from it
    if pre.iter().all(|z| z.abs() > 1e-3) {
        assert!(max_gradient_error(&model, &batch, 1e-5) < 1e-4);
    }
}
