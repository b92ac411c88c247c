use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::schema::{mask_to_feature_set, Channel, Covariate, CovariateRole, Standardizer};

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

fn toy_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        ff_dim: Some(12),
        dropout: 0.0,
        mean_query: false,
    }
}

pub(crate) fn random_example(schema: &FeatureSchema, rng: &mut ChaCha8Rng) -> ForecastExample {
    let w = schema.window();
    ForecastExample {
        id: rng.random(),
        past_target: (0..schema.lookback()).map(|_| rng.random_range(-2.0..2.0)).collect(),
        future_target: (0..schema.horizon()).map(|_| rng.random_range(-2.0..2.0)).collect(),
        covariates: schema
            .covariates()
            .iter()
            .map(|c| match c.kind {
                CovariateKind::Categorical { cardinality } => {
                    (0..w).map(|_| rng.random_range(0..cardinality) as f64).collect()
                }
                CovariateKind::Continuous => (0..w).map(|_| rng.random_range(-2.0..2.0)).collect(),
            })
            .collect(),
        origin: None,
    }
}

fn random_mask(n: usize, rng: &mut ChaCha8Rng) -> GroupMask {
    GroupMask::from_bits(rng.random_range(0..1u32 << n), n).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn config_validation() {
    let mut c = toy_config();
    c.heads = 3;
    assert!(c.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
    assert!(ModelConfig::desk().validate().is_ok());
}

#[test]
fn init_is_deterministic() {
    let s = toy_schema();
    let a = ModelParams::init(&toy_config(), &s, 3).unwrap();
    let b = ModelParams::init(&toy_config(), &s, 3).unwrap();
    let c = ModelParams::init(&toy_config(), &s, 4).unwrap();
    assert_eq!(a.tensors(), b.tensors());
    assert_ne!(a.tensors(), c.tensors());
}

#[test]
fn single_present_variable_embeds_to_itself() {
    let s = toy_schema();
    let p = ModelParams::init(&toy_config(), &s, 1).unwrap();
    let out = p.embed_step(false, &[5.0, 0.3], &[true, false]).unwrap();
    let table = p.get("embed.hour.table").unwrap();
    assert_eq!(out.data(), table.row(5));
}

#[test]
fn equal_embeddings_give_that_embedding() {
    let s = FeatureSchema::new(
        vec![
            Covariate::categorical("a", 3, CovariateRole::Generic),
            Covariate::categorical("b", 3, CovariateRole::Generic),
        ],
        48,
        24,
        2,
    )
    .unwrap();
    let mut p = ModelParams::init(&toy_config(), &s, 1).unwrap();
    let row: Vec<f32> = (0..8).map(|i| 0.1 * i as f32 - 0.3).collect();
    let table = Tensor::from_fn(&[3, 8], |i| row[i % 8]);
    p.set("embed.a.table", table.clone()).unwrap();
    p.set("embed.b.table", table).unwrap();
    let out = p.embed_step(false, &[1.0, 2.0], &[true, true]).unwrap();
    for (o, r) in out.data().iter().zip(&row) {
        assert!((o - r).abs() < 1e-6);
    }
}

#[test]
fn masked_variable_matches_removed_variable() {
    let s = toy_schema();
    let p = ModelParams::init(&toy_config(), &s, 2).unwrap();
    let masked = p.embed_step(true, &[0.7, 4.0, -1.2], &[true, false, true]).unwrap();
    let reduced = p.without_covariate(0).unwrap();
    let removed = reduced.embed_step(true, &[0.7, -1.2], &[true, true]).unwrap();
    assert!(masked.max_abs_diff(&removed) <= 1e-6);
}

#[test]
fn empty_step_uses_null_embedding() {
    let s = toy_schema();
    let p = ModelParams::init(&toy_config(), &s, 2).unwrap();
    let out = p.embed_step(false, &[1.0, 1.0], &[false, false]).unwrap();
    assert_eq!(out.data(), p.get("embed.null_step").unwrap().data());
}

#[test]
fn forward_shape_and_finiteness() {
    let s = FeatureSchema::synthetic();
    let p = ModelParams::init(&ModelConfig::desk(), &s, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ex = random_example(&s, &mut rng);
    for mask in [GroupMask::full(14), GroupMask::empty(14), random_mask(14, &mut rng)] {
        let y = p.forward(&ex, mask).unwrap();
        assert_eq!(y.len(), 168);
        assert!(y.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn masked_day_matches_truncated_encoder() {
    let s = FeatureSchema::real();
    let p = ModelParams::init(&ModelConfig::desk(), &s, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let ex = random_example(&s, &mut rng);
        let mask = random_mask(s.n_groups(), &mut rng);
        let a = p.forward(&ex, mask).unwrap();
        let b = p.forward_pruned(&ex, mask).unwrap();
        assert!(max_diff(&a, &b) <= 1e-5, "{mask:?}: {}", max_diff(&a, &b));
    }
}

/// Drops covariate `c` from an example and from a mask.
fn drop_covariate(ex: &ForecastExample, mask: GroupMask, days: usize, c: usize) -> (ForecastExample, GroupMask) {
    let mut ex = ex.clone();
    ex.covariates.remove(c);
    let bools: Vec<bool> = mask
        .to_bools()
        .into_iter()
        .enumerate()
        .filter(|(g, _)| *g != days + c)
        .map(|(_, b)| b)
        .collect();
    (ex, GroupMask::from_bools(&bools))
}

#[test]
fn masked_covariate_matches_reduced_schema() {
    let s = FeatureSchema::real();
    let p = ModelParams::init(&ModelConfig::desk(), &s, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for c in 0..s.covariates().len() {
        let reduced = p.without_covariate(c).unwrap();
        let ex = random_example(&s, &mut rng);
        let mask = random_mask(s.n_groups(), &mut rng).without(s.covariate_group(c));
        let (rex, rmask) = drop_covariate(&ex, mask, s.day_groups(), c);
        let a = p.forward(&ex, mask).unwrap();
        let b = reduced.forward(&rex, rmask).unwrap();
        assert!(max_diff(&a, &b) <= 1e-5, "covariate {c}: {}", max_diff(&a, &b));
    }
}

#[test]
fn batched_singleton_equals_forward() {
    let s = toy_schema();
    let p = ModelParams::init(&toy_config(), &s, 8).unwrap();
    let ex = random_example(&s, &mut ChaCha8Rng::seed_from_u64(8));
    let full = GroupMask::full(4);
    let t = batched_forward(&ex, &[full], &p).unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!(t.evaluations, 1);
    assert!(max_diff(t.get(full).unwrap(), &p.forward(&ex, full).unwrap()) <= 1e-6);
}

#[test]
fn batched_matches_sequential_on_all_masks() {
    let s = toy_schema();
    let p = ModelParams::init(&toy_config(), &s, 9).unwrap();
    let ex = random_example(&s, &mut ChaCha8Rng::seed_from_u64(9));
    let masks: Vec<GroupMask> = (0..16).map(|b| GroupMask::from_bits(b, 4).unwrap()).collect();
    let t = batched_forward(&ex, &masks, &p).unwrap();
    assert_eq!(t.len(), 16);
    assert_eq!(t.evaluations, 16);
    for m in masks {
        let got = t.get(m).unwrap();
        assert_eq!(got, p.forward_pruned(&ex, m).unwrap().as_slice(), "{m:?}");
        assert!(max_diff(got, &p.forward(&ex, m).unwrap()) <= 1e-6, "{m:?}");
    }
}

#[test]
fn batched_rejects_duplicates() {
    let s = toy_schema();
    let p = ModelParams::init(&toy_config(), &s, 9).unwrap();
    let ex = random_example(&s, &mut ChaCha8Rng::seed_from_u64(9));
    let m = GroupMask::full(4);
    assert!(batched_forward(&ex, &[m, m], &p).is_err());
    assert!(batched_forward(&ex, &[], &p).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let s = toy_schema();
    let p = ModelParams::init(&toy_config(), &s, 10).unwrap();
    let st = Standardizer::identity(&s);
    let ck = Checkpoint::new(&p, &st);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let q = back.params().unwrap();
    for (a, b) in p.tensors().iter().zip(q.tensors()) {
        let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
    let json = ck.to_json().unwrap().replace("\"version\":1", "\"version\":99");
    assert!(matches!(
        Checkpoint::from_json(&json),
        Err(Error::CheckpointVersion(99))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn absent_features_do_not_matter(seed in any::<u64>(), bits in 0u32..16) {
        let s = toy_schema();
        let p = ModelParams::init(&toy_config(), &s, seed % 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ex = random_example(&s, &mut rng);
        let mask = GroupMask::from_bits(bits, 4).unwrap();
        let visible = mask_to_feature_set(&mask, &s);
        let mut other = random_example(&s, &mut rng);
        // Copy every visible feature so only absent ones differ.
        for (ch, t) in &visible {
            match ch {
                Channel::Target => other.past_target[*t] = ex.past_target[*t],
                Channel::Covariate(c) => other.covariates[*c][*t] = ex.covariates[*c][*t],
            }
        }
        for layout in [Layout::Masked, Layout::Pruned] {
            let a = p.forward_layout(&ex, mask, layout).unwrap();
            let b = p.forward_layout(&other, mask, layout).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
