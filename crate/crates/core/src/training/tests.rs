use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::tests::random_example;
use crate::model::ModelConfig;
use crate::schema::{Covariate, CovariateRole, FeatureSchema};

fn toy_schema() -> FeatureSchema {
    FeatureSchema::new(
        vec![
            Covariate::categorical("hour", 24, CovariateRole::HourOfDay),
            Covariate::continuous("temperature"),
        ],
        48,
        24,
        2,
    )
    .unwrap()
}

fn toy_params(seed: u64) -> ModelParams {
    let config = ModelConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        ff_dim: Some(16),
        dropout: 0.0,
        mean_query: false,
    };
    ModelParams::init(&config, &toy_schema(), seed).unwrap()
}

fn dataset(n: usize, seed: u64, target: impl Fn(&ForecastExample) -> Vec<f64>) -> Vec<ForecastExample> {
    let s = toy_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut ex = random_example(&s, &mut rng);
            ex.future_target = target(&ex);
            ex
        })
        .collect()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 8,
        max_epochs: 4,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn degenerate_mask_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        assert!(sample_mask(&mut rng, 13, 0.0).is_full());
        assert!(sample_mask(&mut rng, 13, 1.0).is_empty());
    }
}

#[test]
fn half_probability_presence_frequency() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts = [0usize; 13];
    for _ in 0..10_000 {
        let m = sample_mask(&mut rng, 13, 0.5);
        for (g, c) in counts.iter_mut().enumerate() {
            *c += m.contains(g) as usize;
        }
    }
    for c in counts {
        let f = c as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&f), "{f}");
    }
}

/// Textbook Adam on `f(x) = Σ a_i (x_i - c_i)^2`, written independently of
/// the optimizer under test.
fn reference_trajectory(kind: OptimizerKind, steps: usize) -> Vec<Vec<f32>> {
    let a = [1.0, 3.0, 0.5];
    let c = [0.2, -1.0, 2.0];
    let (lr, b1, b2, eps, wd) = (0.05, 0.9, 0.999, 1e-8, 0.01);
    let mut x = [1.0f32, 1.0, 1.0];
    let mut m = [0.0f64; 3];
    let mut v = [0.0f64; 3];
    let mut out = Vec::new();
    for t in 1..=steps {
        for i in 0..3 {
            let g = (2.0 * a[i] * (x[i] as f64 - c[i])) as f32 as f64;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / (1.0 - b1.powi(t as i32));
            let vh = v[i] / (1.0 - b2.powi(t as i32));
            let mut xi = x[i] as f64;
            if kind == OptimizerKind::AdamW {
                xi -= lr * wd * x[i] as f64;
            }
            xi -= lr * mh / (vh.sqrt() + eps);
            x[i] = xi as f32;
        }
        out.push(x.to_vec());
    }
    out
}

#[test]
fn adam_matches_reference_on_quadratic_bowl() {
    for kind in [OptimizerKind::Adam, OptimizerKind::AdamW] {
        let reference = reference_trajectory(kind, 100);
        let cfg = AdamConfig {
            kind,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &[3]);
        let a = [1.0, 3.0, 0.5];
        let c = [0.2, -1.0, 2.0];
        let mut x = vec![1.0f32; 3];
        for want in reference {
            let g: Vec<f32> = (0..3).map(|i| (2.0 * a[i] * (x[i] as f64 - c[i])) as f32).collect();
            opt.step(&mut [x.as_mut_slice()], &[g.as_slice()], 0.05).unwrap();
            for (p, q) in x.iter().zip(&want) {
                assert!((p - q).abs() <= 1e-6, "{kind:?}");
            }
        }
        // The bowl's minimum is reached for plain Adam.
        if kind == OptimizerKind::Adam {
            assert!((x[0] - 0.2).abs() < 0.05);
        }
    }
}

#[test]
fn clipping_bounds_global_norm() {
    let mut g = vec![vec![3.0f32], vec![4.0]];
    let before = clip_global_norm(&mut g, 1.0);
    assert!((before - 5.0).abs() < 1e-12);
    assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[1][0] - 0.8).abs() < 1e-6);
    let mut small = vec![vec![0.1f32]];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0][0], 0.1);
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig {
        lr: 0.1,
        decay: 0.5,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.lr_at(0), 0.1);
    assert!((cfg.lr_at(3) - 0.0125).abs() < 1e-15);
    assert!(TrainConfig {
        decay: 1.5,
        ..cfg.clone()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        mask_p: -0.1,
        ..cfg.clone()
    }
    .validate()
    .is_err());
    assert!(TrainConfig { lr: 0.0, ..cfg }.validate().is_err());
}

#[test]
fn constant_target_is_learned() {
    let h = toy_schema().horizon();
    let train_set = dataset(32, 1, |_| vec![0.5; h]);
    let val_set = dataset(8, 2, |_| vec![0.5; h]);
    let cfg = TrainConfig {
        lr: 1e-2,
        max_epochs: 50,
        ..quick_config()
    };
    let out = train(&train_set, &val_set, &toy_params(1), &cfg, Flavor::Masked).unwrap();
    let best = out.log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert!(best < 1e-3, "{best}");
    assert!(full_mask_loss(&out.params, &val_set).unwrap() < 1e-3);
}

#[test]
fn training_is_bit_reproducible() {
    let train_set = dataset(24, 3, |ex| ex.past_target[24..].to_vec());
    let val_set = dataset(8, 4, |ex| ex.past_target[24..].to_vec());
    let a = train(&train_set, &val_set, &toy_params(2), &quick_config(), Flavor::Masked).unwrap();
    let b = train(&train_set, &val_set, &toy_params(2), &quick_config(), Flavor::Masked).unwrap();
    assert_eq!(a.state.current, b.state.current);
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let train_set = dataset(24, 5, |ex| ex.past_target[24..].to_vec());
    let val_set = dataset(8, 6, |ex| ex.past_target[24..].to_vec());
    let cfg = quick_config();
    let full = train(&train_set, &val_set, &toy_params(3), &cfg, Flavor::Masked).unwrap();

    let short = TrainConfig {
        max_epochs: 2,
        ..cfg.clone()
    };
    let first = train(&train_set, &val_set, &toy_params(3), &short, Flavor::Masked).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    first.state.save(&path).unwrap();
    let state = TrainState::load(&path).unwrap();
    assert_eq!(state, first.state);
    let rest = resume(&train_set, &val_set, &toy_params(3), state, &cfg, Flavor::Masked).unwrap();
    assert_eq!(rest.state.current, full.state.current);
    assert_eq!(rest.log.len(), full.log.len());
    assert_eq!(rest.log[2].val_loss.to_bits(), full.log[2].val_loss.to_bits());
}

#[test]
fn unmasked_flavor_never_masks() {
    let train_set = dataset(16, 7, |ex| ex.past_target[24..].to_vec());
    let val_set = dataset(4, 8, |ex| ex.past_target[24..].to_vec());
    let out = train(&train_set, &val_set, &toy_params(4), &quick_config(), Flavor::Unmasked).unwrap();
    assert!(out.log.iter().all(|e| e.masked_groups == 0));
    let masked = train(&train_set, &val_set, &toy_params(4), &quick_config(), Flavor::Masked).unwrap();
    assert!(masked.log.iter().all(|e| e.masked_groups > 0));
}

#[test]
fn training_reduces_validation_loss() {
    let train_set = dataset(64, 9, |ex| ex.past_target[24..].to_vec());
    let val_set = dataset(16, 10, |ex| ex.past_target[24..].to_vec());
    let params = toy_params(5);
    let initial = full_mask_loss(&params, &val_set).unwrap();
    let cfg = TrainConfig {
        max_epochs: 10,
        ..quick_config()
    };
    let out = train(&train_set, &val_set, &params, &cfg, Flavor::Masked).unwrap();
    assert!(full_mask_loss(&out.params, &val_set).unwrap() < initial);
    let lines = EpochLog::to_json_lines(&out.log).unwrap();
    assert_eq!(lines.lines().count(), out.log.len());
    assert!(lines.lines().next().unwrap().contains("\"val_loss\""));
}

#[test]
fn early_stopping_after_patience() {
    let train_set = dataset(8, 11, |ex| ex.past_target[24..].to_vec());
    let val_set = dataset(4, 12, |_| vec![0.0; 24]);
    let cfg = TrainConfig {
        lr: 0.5,
        patience: 2,
        max_epochs: 40,
        clip_norm: None,
        ..quick_config()
    };
    let out = train(&train_set, &val_set, &toy_params(6), &cfg, Flavor::Masked).unwrap();
    match out.stop {
        StopReason::EarlyStopped { epoch } => assert!(epoch < 39),
        StopReason::Diverged { .. } => {}
        StopReason::MaxEpochs => panic!("expected an early stop"),
    }
}

#[test]
fn empty_splits_rejected() {
    let val_set = dataset(2, 1, |_| vec![0.0; 24]);
    assert!(train(&[], &val_set, &toy_params(1), &quick_config(), Flavor::Masked).is_err());
}
