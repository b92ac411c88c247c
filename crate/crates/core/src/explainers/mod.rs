//! Sampling-based SHAP baselines for models that only accept complete inputs:
//! a feature-level permutation explainer and a block-level custom masker.
//! Absent inputs are replaced by values drawn from background data.


use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::schema::{
    Channel, Covariate, CovariateKind, CovariateRole, FeatureSchema, ForecastExample, GroupMask, STEPS_PER_DAY,
};
use crate::seeds::derive_rng;
use crate::shapley::{permutation_attributions, Explanation, ExplanationMode};

/// A forecaster that needs every input present.
pub trait Predictor: Sync {
    fn predict(&self, example: &ForecastExample) -> Result<Vec<f64>>;
}

impl Predictor for ModelParams {
    fn predict(&self, example: &ForecastExample) -> Result<Vec<f64>> {
        self.forward_pruned(example, GroupMask::full(self.schema().n_groups()))
    }
}

/// Adapter for closures.
pub struct FnPredictor<F>(pub F);

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&ForecastExample) -> Result<Vec<f64>> + Sync,
{
    fn predict(&self, example: &ForecastExample) -> Result<Vec<f64>> {
        (self.0)(example)
    }
}

/// Counts every call made to the wrapped predictor.
pub struct CountingPredictor<P> {
    inner: P,
    calls: AtomicU64,
}

impl<P> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<P: Predictor> Predictor for CountingPredictor<P> {
    fn predict(&self, example: &ForecastExample) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(example)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Number of random permutations `K`; each is traversed forward and backward.
    pub permutations: usize,
    /// Background draws averaged per coalition.
    pub samples: usize,
    pub seed: u64,
    /// Abort with [`Error::DeadlineExceeded`] once this much wall time has passed.
    pub deadline_secs: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            permutations: 10,
            samples: 100,
            seed: 0,
            deadline_secs: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.permutations == 0 || self.samples == 0 {
            return Err(Error::invalid("permutations and samples must be at least 1"));
        }
        if let Some(d) = self.deadline_secs {
            if d.is_nan() || d <= 0.0 {
                return Err(Error::invalid("deadline must be positive"));
            }
        }
        Ok(())
    }

    /// Predictor calls made by an explanation over `players` players.
    pub fn expected_calls(&self, players: usize) -> u64 {
        (players * self.permutations * 2 * self.samples) as u64
    }
}

/// One contiguous stretch of observations.
#[derive(Clone, Debug, PartialEq)]
struct Run {
    target: Vec<f64>,
    /// `[covariate][step]`
    covariates: Vec<Vec<f64>>,
}

impl Run {
    fn len(&self) -> usize {
        self.target.len()
    }

    fn channel(&self, ch: Channel) -> &[f64] {
        match ch {
            Channel::Target => &self.target,
            Channel::Covariate(c) => &self.covariates[c],
        }
    }
}

/// Reservoir of training data the explainers draw replacement values from.
/// Slices never cross the boundary of a contiguous run.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundData {
    schema: FeatureSchema,
    runs: Vec<Run>,
}

impl BackgroundData {
    pub fn new(schema: FeatureSchema) -> Self {
        Self {
            schema,
            runs: Vec::new(),
        }
    }

    /// Each example's past+future window becomes one run.
    pub fn from_examples(schema: &FeatureSchema, examples: &[ForecastExample]) -> Result<Self> {
        let mut bg = Self::new(schema.clone());
        for ex in examples {
            ex.validate(schema)?;
            bg.push_run(ex.target_series(), ex.covariates.clone())?;
        }
        Ok(bg)
    }

    /// Uniform sample of at most `capacity` examples (reservoir sampling).
    pub fn reservoir(schema: &FeatureSchema, examples: &[ForecastExample], capacity: usize, seed: u64) -> Result<Self> {
        let mut rng = derive_rng(seed, &[]);
        let mut kept: Vec<&ForecastExample> = Vec::with_capacity(capacity);
        for (i, ex) in examples.iter().enumerate() {
            if kept.len() < capacity {
                kept.push(ex);
            } else {
                let j = rng.random_range(0..=i);
                if j < capacity {
                    kept[j] = ex;
                }
            }
        }
        let kept: Vec<ForecastExample> = kept.into_iter().cloned().collect();
        Self::from_examples(schema, &kept)
    }

    /// Adds one contiguous run of observations.
    pub fn push_run(&mut self, target: Vec<f64>, covariates: Vec<Vec<f64>>) -> Result<()> {
        if covariates.len() != self.schema.covariates().len() {
            return Err(Error::Schema("background run has the wrong covariate count".into()));
        }
        if target.is_empty() || covariates.iter().any(|c| c.len() != target.len()) {
            return Err(Error::Schema("background run channels differ in length".into()));
        }
        self.runs.push(Run { target, covariates });
        Ok(())
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    fn runs_with(&self, len: usize) -> Result<Vec<&Run>> {
        if self.runs.is_empty() {
            return Err(Error::EmptyBackground);
        }
        let runs: Vec<&Run> = self.runs.iter().filter(|r| r.len() >= len).collect();
        if runs.is_empty() {
            return Err(Error::Data(format!("no background run holds {len} consecutive values")));
        }
        Ok(runs)
    }
}

/// `values` shifted by `offset` modulo `cardinality`.
pub fn cyclic_shift(values: &[f64], offset: usize, cardinality: usize) -> Vec<f64> {
    values
        .iter()
        .map(|v| ((*v as usize + offset) % cardinality) as f64)
        .collect()
}

/// Cardinality of calendar covariates that the custom masker shifts cyclically.
fn cyclic_cardinality(cov: &Covariate) -> Option<usize> {
    match (cov.role, cov.kind) {
        (
            CovariateRole::HourOfDay | CovariateRole::DayOfWeek | CovariateRole::Month,
            CovariateKind::Categorical { cardinality },
        ) => Some(cardinality),
        _ => None,
    }
}

/// A contiguous range of one input channel toggled as a unit.
#[derive(Clone, Copy, Debug)]
struct Player {
    channel: Channel,
    start: usize,
    len: usize,
    group: usize,
}

fn channel_mut(ex: &mut ForecastExample, ch: Channel) -> &mut [f64] {
    match ch {
        Channel::Target => &mut ex.past_target,
        Channel::Covariate(c) => &mut ex.covariates[c],
    }
}

fn channel_of(ex: &ForecastExample, ch: Channel) -> &[f64] {
    match ch {
        Channel::Target => &ex.past_target,
        Channel::Covariate(c) => &ex.covariates[c],
    }
}

fn copy_player(dst: &mut ForecastExample, src: &ForecastExample, p: &Player) {
    let range = p.start..p.start + p.len;
    channel_mut(dst, p.channel)[range.clone()].copy_from_slice(&channel_of(src, p.channel)[range]);
}

/// Permutation sampling over `players`, where an absent player takes its
/// values from a background draw produced by `draw`. The same draws serve
/// every coalition of one permutation, so each permutation telescopes from
/// its empty value to the full prediction.
fn sampled_explanation<P, D>(
    example: &ForecastExample,
    predictor: &P,
    config: &SamplerConfig,
    background: &BackgroundData,
    players: &[Player],
    mode: ExplanationMode,
    draw: D,
) -> Result<Explanation>
where
    P: Predictor + ?Sized,
    D: Fn(&mut ChaCha8Rng) -> ForecastExample,
{
    config.validate()?;
    let schema = background.schema();
    example.validate(schema)?;
    if background.is_empty() {
        return Err(Error::EmptyBackground);
    }
    let start = Instant::now();
    let deadline = config.deadline_secs.map(Duration::from_secs_f64);
    let n = players.len();
    let horizon = schema.horizon();

    let mut perm_rng = derive_rng(config.seed, &[0, example.id]);
    let perms: Vec<Vec<usize>> = (0..config.permutations)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut perm_rng);
            p
        })
        .collect();

    let mut calls = 0u64;
    let mut evaluations = 0u64;
    let mut current = usize::MAX;
    let mut alts: Vec<ForecastExample> = Vec::new();
    let mut work: Vec<ForecastExample> = Vec::new();
    let mut prev = vec![false; n];

    let (base, per_player) = permutation_attributions(n, horizon, &perms, |k, present| {
        if let Some(d) = deadline {
            if start.elapsed() > d {
                return Err(Error::DeadlineExceeded { calls });
            }
        }
        if k != current {
            current = k;
            alts = (0..config.samples)
                .map(|s| draw(&mut derive_rng(config.seed, &[1, example.id, k as u64, s as u64])))
                .collect();
            work = alts.clone();
            prev.iter_mut().for_each(|p| *p = false);
        }
        let changed: Vec<usize> = (0..n).filter(|&i| present[i] != prev[i]).collect();
        let preds = work
            .par_iter_mut()
            .zip(alts.par_iter())
            .map(|(w, alt)| {
                for &i in &changed {
                    copy_player(w, if present[i] { example } else { alt }, &players[i]);
                }
                predictor.predict(w)
            })
            .collect::<Result<Vec<_>>>()?;
        for &i in &changed {
            prev[i] = present[i];
        }
        calls += preds.len() as u64;
        evaluations += 1;
        let mut mean = vec![0.0; horizon];
        for p in &preds {
            if p.len() != horizon {
                return Err(Error::invalid("predictor returned the wrong horizon"));
            }
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        let s = preds.len() as f64;
        mean.iter_mut().for_each(|m| *m /= s);
        Ok(mean)
    })?;

    let mut attributions = vec![vec![0.0; horizon]; schema.n_groups()];
    for (p, values) in players.iter().zip(per_player) {
        for (a, v) in attributions[p.group].iter_mut().zip(values) {
            *a += v;
        }
    }
    Ok(Explanation {
        example_id: Some(example.id),
        base_value: base,
        attributions,
        labels: schema.group_labels(),
        mode,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        mask_count: evaluations,
        model_calls: calls,
    })
}

/// Every individual input value as its own player: past target steps, then
/// each covariate step by step.
fn feature_players(schema: &FeatureSchema) -> Vec<Player> {
    let mut players: Vec<Player> = (0..schema.lookback())
        .map(|t| Player {
            channel: Channel::Target,
            start: t,
            len: 1,
            group: schema.day_of_step(t),
        })
        .collect();
    for c in 0..schema.covariates().len() {
        players.extend((0..schema.window()).map(|t| Player {
            channel: Channel::Covariate(c),
            start: t,
            len: 1,
            group: schema.covariate_group(c),
        }));
    }
    players
}

/// Number of individual input values the permutation explainer permutes.
pub fn feature_count(schema: &FeatureSchema) -> usize {
    schema.lookback() + schema.covariates().len() * schema.window()
}

/// Feature-level permutation explainer. Each absent value is drawn
/// independently from the background marginal at its window position;
/// attributions are then summed into the coalition groups.
pub fn permutation_explainer<P: Predictor + ?Sized>(
    example: &ForecastExample,
    predictor: &P,
    config: &SamplerConfig,
    background: &BackgroundData,
) -> Result<Explanation> {
    let schema = background.schema();
    let runs = background.runs_with(schema.window())?;
    let players = feature_players(schema);
    let window = schema.window();
    let draw = |rng: &mut ChaCha8Rng| {
        let mut alt = example.clone();
        for p in &players {
            let run = runs.choose(rng).expect("nonempty");
            let offset = rng.random_range(0..=run.len() - window);
            channel_mut(&mut alt, p.channel)[p.start] = run.channel(p.channel)[offset + p.start];
        }
        alt
    };
    sampled_explanation(
        example,
        predictor,
        config,
        background,
        &players,
        ExplanationMode::Permutation,
        draw,
    )
}

/// Block-level explainer over the coalition groups. An absent past day takes
/// 24 consecutive background load values; hour, weekday and month are shifted
/// by one random cyclic offset; every other covariate takes a full window of
/// consecutive background values.
pub fn custom_masker_explainer<P: Predictor + ?Sized>(
    example: &ForecastExample,
    predictor: &P,
    config: &SamplerConfig,
    background: &BackgroundData,
) -> Result<Explanation> {
    let schema = background.schema();
    let window = schema.window();
    let day_runs = background.runs_with(STEPS_PER_DAY)?;
    let needs_window = schema.covariates().iter().any(|c| cyclic_cardinality(c).is_none());
    let window_runs = if needs_window {
        background.runs_with(window)?
    } else {
        Vec::new()
    };

    let mut players: Vec<Player> = (0..schema.day_groups())
        .map(|g| Player {
            channel: Channel::Target,
            start: g * STEPS_PER_DAY,
            len: STEPS_PER_DAY,
            group: g,
        })
        .collect();
    players.extend((0..schema.covariates().len()).map(|c| Player {
        channel: Channel::Covariate(c),
        start: 0,
        len: window,
        group: schema.covariate_group(c),
    }));

    let draw = |rng: &mut ChaCha8Rng| {
        let mut alt = example.clone();
        for g in 0..schema.day_groups() {
            let run = day_runs.choose(rng).expect("nonempty");
            let s = rng.random_range(0..=run.len() - STEPS_PER_DAY);
            alt.past_target[g * STEPS_PER_DAY..(g + 1) * STEPS_PER_DAY]
                .copy_from_slice(&run.target[s..s + STEPS_PER_DAY]);
        }
        for (c, cov) in schema.covariates().iter().enumerate() {
            match cyclic_cardinality(cov) {
                Some(cardinality) => {
                    let offset = rng.random_range(0..cardinality);
                    alt.covariates[c] = cyclic_shift(&example.covariates[c], offset, cardinality);
                }
                None => {
                    let run = window_runs.choose(rng).expect("nonempty");
                    let s = rng.random_range(0..=run.len() - window);
                    alt.covariates[c].copy_from_slice(&run.covariates[c][s..s + window]);
                }
            }
        }
        alt
    };
    sampled_explanation(
        example,
        predictor,
        config,
        background,
        &players,
        ExplanationMode::CustomMasker,
        draw,
    )
}
