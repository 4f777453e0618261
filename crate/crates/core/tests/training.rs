use mwr_core::neural::{EncoderSpec, RegressionHeadSpec, RegressorSpec};
use mwr_core::trainer::{sample_triplets, TrainingPool};
use mwr_core::{train, Dataset, Instance, RankDomain, RankScale, Split, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// One informative feature, `(rank - 20.5) / 10` plus small noise, and one
/// pure-noise feature.
fn separable() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let instances = (0..1200u64)
        .map(|id| {
            let rank = 1 + (id % 40) as i32;
            Instance {
                id,
                rank,
                sigma: None,
                split: Split::Train,
                features: vec![
                    (rank as f64 - 20.5) / 10.0 + noise.sample(&mut rng),
                    noise.sample(&mut rng),
                ],
            }
        })
        .collect();
    Dataset::new(instances, RankDomain::new(1, 40).unwrap()).unwrap()
}

fn spec() -> RegressorSpec {
    RegressorSpec {
        encoder: EncoderSpec {
            input_dim: 2,
            hidden_dims: vec![16],
            output_dim: 8,
        },
        head: RegressionHeadSpec::default(),
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn separable_data_is_learned() {
    let ds = separable();
    let cfg = TrainConfig {
        scale: RankScale::arithmetic(3),
        epochs: 30,
        lr: 1e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    let trained = train(&ds, &cfg, &spec(), &[]).unwrap();
    let model = &trained.global.model;

    // fresh triplets from the training distribution
    let pool = TrainingPool::new(&ds, Split::Train).unwrap();
    let triplets = sample_triplets(&pool, &cfg, None, 0, 999).unwrap();
    let feat = |i: usize| model.encode(&ds.instances[i].features).unwrap();
    let err: f64 = triplets
        .iter()
        .map(|t| {
            let rho = model.regress_rho(&feat(t.x), &feat(t.y1), &feat(t.y2)).unwrap().value();
            (rho - t.rho_true).abs()
        })
        .sum::<f64>()
        / triplets.len() as f64;
    assert!(err < 0.1, "mean |rho_hat - rho| = {err}");

    let mut losses: Vec<f64> = trained.log.iter().map(|e| e.mean_loss).collect();
    assert_eq!(losses.len(), 30);
    let late = median(&mut losses[25..].to_vec());
    let early = median(&mut losses[..5]);
    assert!(late < early, "loss median went from {early} to {late}");
}
