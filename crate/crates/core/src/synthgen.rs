//! Synthetic load benchmark with a known generating process, and ground-truth
//! Shapley values computed by explaining that process itself.
//!
//! Every example is rendered from a [`GenLatents`] draw. The ground-truth
//! oracle resamples the latents behind absent inputs from the same samplers
//! and renders again, so generator and oracle share one code path.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{FeatureSchema, ForecastExample, GroupMask, HORIZON, LOOKBACK, STEPS_PER_DAY};
use crate::seeds::derive_rng;
use crate::shapley::{exact_shap, permutation_attributions, CoalitionTable, Explanation, ExplanationMode};

pub const WINDOW: usize = LOOKBACK + HORIZON;
/// Calendar days touched by a window starting at any hour.
pub const DAYS: usize = (STEPS_PER_DAY - 1 + WINDOW).div_ceil(STEPS_PER_DAY);
pub const HOLIDAY_P: f64 = 0.1;
pub const SATURDAY: usize = 5;
pub const SUNDAY: usize = 6;

/// Inputs of the generating process, in ground-truth player order.
pub const PLAYERS: [&str; 8] = [
    "load",
    "hour",
    "dow",
    "month",
    "holiday",
    "multiplier",
    "noise1",
    "noise2",
];
const LOAD: usize = 0;
const HOUR: usize = 1;
const DOW: usize = 2;
const MONTH: usize = 3;
const HOLIDAY: usize = 4;
const MULTIPLIER: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenOptions {
    /// Debug mode: no pattern noise, no target noise, temperature fixed at 0.
    pub zero_noise: bool,
}

/// Latent state of one generated example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenLatents {
    pub options: GenOptions,
    /// 1..=12
    pub month: usize,
    /// 0 = Monday
    pub start_weekday: usize,
    pub start_hour: usize,
    pub base_load: f64,
    pub factor: f64,
    pub alpha: f64,
    pub beta: f64,
    pub day_pattern: Vec<f64>,
    pub s1: f64,
    pub s2: f64,
    pub saturday: Vec<f64>,
    pub sunday: Vec<f64>,
    /// One flag per calendar day touched by the window.
    pub holidays: Vec<bool>,
    pub temperature: Vec<f64>,
    pub target_noise: Vec<f64>,
    pub noise1: Vec<f64>,
    pub noise2: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    Uniform::new(lo, hi).expect("uniform bounds").sample(rng)
}

fn normals(rng: &mut ChaCha8Rng, n: usize, sd: f64, on: bool) -> Vec<f64> {
    let d = Normal::new(0.0, sd).expect("normal sd");
    (0..n)
        .map(|_| if on { d.sample(rng) } else { d.sample(rng) * 0.0 })
        .collect()
}

/// Daily curve before pattern noise.
pub fn daily_curve(factor: f64, alpha: f64, beta: f64) -> Vec<f64> {
    (0..STEPS_PER_DAY)
        .map(|h| {
            let x = h as f64 * 2.0 * PI / STEPS_PER_DAY as f64;
            factor * ((x - 0.5 * PI).sin() + alpha * x.sin() + beta * x.cos())
        })
        .collect()
}

pub fn month_effect(month: usize) -> f64 {
    0.1 * (month as f64 * 2.0 * PI / 12.0).sin()
}

impl GenLatents {
    /// One draw from the generating priors. The number of random values
    /// consumed does not depend on `options`.
    pub fn sample(rng: &mut ChaCha8Rng, options: GenOptions) -> Self {
        let on = !options.zero_noise;
        let month = rng.random_range(1..=12);
        let start_weekday = rng.random_range(0..7);
        let start_hour = rng.random_range(0..STEPS_PER_DAY);
        let base_load = uniform(rng, -0.5, 0.5);
        let factor = uniform(rng, 0.5, 1.0);
        let alpha = uniform(rng, -0.5, 0.5);
        let beta = uniform(rng, -0.5, 0.5);
        // Uniform values with standard deviation 0.1, centred to mean 0.
        let half = 0.03f64.sqrt();
        let mut noise: Vec<f64> = (0..STEPS_PER_DAY).map(|_| uniform(rng, -half, half)).collect();
        let mean = noise.iter().sum::<f64>() / STEPS_PER_DAY as f64;
        noise.iter_mut().for_each(|v| *v = if on { *v - mean } else { 0.0 });
        let day_pattern: Vec<f64> = daily_curve(factor, alpha, beta)
            .iter()
            .zip(&noise)
            .map(|(c, n)| c + n)
            .collect();
        let s1 = uniform(rng, 0.5, 0.9);
        let s2 = uniform(rng, 0.2, s1);
        let sat_noise = normals(rng, STEPS_PER_DAY, 0.1, on);
        let sun_noise = normals(rng, STEPS_PER_DAY, 0.1, on);
        let saturday = day_pattern.iter().zip(&sat_noise).map(|(d, n)| s1 * d + n).collect();
        let sunday = day_pattern.iter().zip(&sun_noise).map(|(d, n)| s2 * d + n).collect();
        let holidays = (0..DAYS).map(|_| rng.random_bool(HOLIDAY_P)).collect();
        let start = uniform(rng, -0.5, 0.5);
        let steps = normals(rng, WINDOW - 1, 0.02, on);
        let mut temperature = Vec::with_capacity(WINDOW);
        temperature.push(if on { start } else { 0.0 });
        for s in steps {
            temperature.push(temperature.last().unwrap() + s);
        }
        let target_noise = normals(rng, WINDOW, 0.05, on);
        let noise1 = normals(rng, WINDOW, 1.0, true);
        let noise2 = normals(rng, WINDOW, 1.0, true);
        Self {
            options,
            month,
            start_weekday,
            start_hour,
            base_load,
            factor,
            alpha,
            beta,
            day_pattern,
            s1,
            s2,
            saturday,
            sunday,
            holidays,
            temperature,
            target_noise,
            noise1,
            noise2,
        }
    }

    /// Calendar day of window step `t`.
    pub fn day(&self, t: usize) -> usize {
        (self.start_hour + t) / STEPS_PER_DAY
    }

    pub fn hour(&self, t: usize) -> usize {
        (self.start_hour + t) % STEPS_PER_DAY
    }

    pub fn weekday(&self, t: usize) -> usize {
        (self.start_weekday + self.day(t)) % 7
    }

    pub fn is_holiday(&self, t: usize) -> bool {
        self.holidays[self.day(t)]
    }

    /// Whether any step of the window falls on a holiday.
    pub fn any_holiday(&self) -> bool {
        (0..WINDOW).any(|t| self.is_holiday(t))
    }

    /// Pattern value used at step `t`: holidays and Sundays use the Sunday
    /// pattern, Saturdays the Saturday pattern, all other days the workday one.
    pub fn pattern(&self, t: usize) -> f64 {
        let h = self.hour(t);
        if self.is_holiday(t) || self.weekday(t) == SUNDAY {
            self.sunday[h]
        } else if self.weekday(t) == SATURDAY {
            self.saturday[h]
        } else {
            self.day_pattern[h]
        }
    }

    fn load_at(&self, t: usize, noise: bool) -> f64 {
        let level = self.base_load + month_effect(self.month) + self.pattern(t);
        let v = level * (0.5 + 0.5 * self.temperature[t]);
        if noise {
            v + self.target_noise[t]
        } else {
            v
        }
    }

    /// Target over the whole window.
    pub fn render(&self) -> Vec<f64> {
        (0..WINDOW).map(|t| self.load_at(t, true)).collect()
    }

    /// Target over the whole window without the additive noise.
    pub fn render_noiseless(&self) -> Vec<f64> {
        (0..WINDOW).map(|t| self.load_at(t, false)).collect()
    }

    fn render_future(&self, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o += self.load_at(LOOKBACK + i, true);
        }
    }

    /// Example in the synthetic schema's covariate order.
    pub fn to_example(&self, id: u64) -> ForecastExample {
        let load = self.render();
        let series = |f: &dyn Fn(usize) -> f64| (0..WINDOW).map(f).collect::<Vec<f64>>();
        ForecastExample {
            id,
            past_target: load[..LOOKBACK].to_vec(),
            future_target: load[LOOKBACK..].to_vec(),
            covariates: vec![
                series(&|t| self.hour(t) as f64),
                series(&|t| self.weekday(t) as f64),
                series(&|_| (self.month - 1) as f64),
                series(&|t| self.is_holiday(t) as u8 as f64),
                self.temperature.clone(),
                self.noise1.clone(),
                self.noise2.clone(),
            ],
            origin: None,
        }
    }
}

pub fn generate_example(rng: &mut ChaCha8Rng, id: u64, options: GenOptions) -> (ForecastExample, GenLatents) {
    let l = GenLatents::sample(rng, options);
    (l.to_example(id), l)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Sizes and seed of a synthetic dataset. Examples are generated on demand
/// from independent per-example streams, so any split can be materialised
/// alone and paper-scale sizes cost nothing until used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    #[serde(default)]
    pub options: GenOptions,
}

impl DatasetSpec {
    pub fn new(train: usize, val: usize, test: usize, seed: u64) -> Result<Self> {
        if train == 0 || val == 0 || test == 0 {
            return Err(Error::invalid("every split needs at least one example"));
        }
        Ok(Self {
            train,
            val,
            test,
            seed,
            options: GenOptions::default(),
        })
    }

    /// Desk-scale sizes: 5000 / 500 / 500.
    pub fn desk(seed: u64) -> Self {
        Self::new(5000, 500, 500, seed).expect("desk sizes")
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema::synthetic()
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Example ids are unique across splits: train, then val, then test.
    pub fn id(&self, split: Split, i: usize) -> u64 {
        let offset = match split {
            Split::Train => 0,
            Split::Val => self.train,
            Split::Test => self.train + self.val,
        };
        (offset + i) as u64
    }

    pub fn latents(&self, split: Split, i: usize) -> GenLatents {
        let mut rng = derive_rng(self.seed, &[split as u64, i as u64]);
        GenLatents::sample(&mut rng, self.options)
    }

    pub fn example(&self, split: Split, i: usize) -> (ForecastExample, GenLatents) {
        let l = self.latents(split, i);
        (l.to_example(self.id(split, i)), l)
    }

    pub fn examples(&self, split: Split) -> Vec<ForecastExample> {
        (0..self.size(split))
            .into_par_iter()
            .map(|i| self.example(split, i).0)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthConfig {
    pub resamples: usize,
    pub seed: u64,
    /// Keep inputs that can be inferred from present ones (see
    /// [`ground_truth_explanation`]).
    pub dependencies: bool,
    /// Sampled permutations, each traversed both ways; `None` averages over
    /// every ordering exactly.
    pub permutations: Option<usize>,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            seed: 0,
            dependencies: true,
            permutations: None,
        }
    }
}

/// Latents for one resample of coalition `present` (indexed like [`PLAYERS`]):
/// absent inputs take their values from `fresh`, except those implied by
/// present ones when `deps` is set:
/// - day of week present: the hour of day is kept;
/// - holiday present and the example has a holiday: the hour is kept;
/// - past load present: the calendar, the past-week holidays and multiplier,
///   and the load shape (base, patterns) are kept; the future multiplier
///   continues the walk from the last observed value.
pub fn resampled_latents(orig: &GenLatents, fresh: &GenLatents, present: &[bool], deps: bool) -> GenLatents {
    let load = present[LOAD];
    let mut l = orig.clone();
    let keep_hour = present[HOUR] || (deps && (load || present[DOW] || (present[HOLIDAY] && orig.any_holiday())));
    if !keep_hour {
        l.start_hour = fresh.start_hour;
    }
    if !(present[DOW] || (deps && load)) {
        l.start_weekday = fresh.start_weekday;
    }
    if !(present[MONTH] || (deps && load)) {
        l.month = fresh.month;
    }
    if !load {
        l.base_load = fresh.base_load;
        l.factor = fresh.factor;
        l.alpha = fresh.alpha;
        l.beta = fresh.beta;
        l.day_pattern.clone_from(&fresh.day_pattern);
        l.s1 = fresh.s1;
        l.s2 = fresh.s2;
        l.saturday.clone_from(&fresh.saturday);
        l.sunday.clone_from(&fresh.sunday);
    }
    if !present[HOLIDAY] {
        if deps && load {
            // Days that start inside the forecast horizon are unobserved.
            for d in 0..DAYS {
                if d * STEPS_PER_DAY >= LOOKBACK + l.start_hour {
                    l.holidays[d] = fresh.holidays[d];
                }
            }
        } else {
            l.holidays.clone_from(&fresh.holidays);
        }
    }
    if !present[MULTIPLIER] {
        if deps && load {
            let last = orig.temperature[LOOKBACK - 1];
            for t in LOOKBACK..WINDOW {
                l.temperature[t] = last + fresh.temperature[t] - fresh.temperature[LOOKBACK - 1];
            }
        } else {
            l.temperature.clone_from(&fresh.temperature);
        }
    }
    // The future noise is never observed.
    l.target_noise.clone_from(&fresh.target_noise);
    l
}

/// Expected future target given coalition `present`, averaged over the
/// resample draws in `fresh`.
pub fn coalition_value(orig: &GenLatents, fresh: &[GenLatents], present: &[bool], deps: bool) -> Vec<f64> {
    let mut out = vec![0.0; HORIZON];
    for f in fresh {
        resampled_latents(orig, f, present, deps).render_future(&mut out);
    }
    let n = fresh.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Ground-truth explanation of the generating process for one example, over
/// the eight inputs in [`PLAYERS`]. The same resample draws are reused for
/// every coalition, so inputs the process ignores get exactly zero.
pub fn ground_truth_explanation(
    example_id: u64,
    latents: &GenLatents,
    config: &GroundTruthConfig,
) -> Result<Explanation> {
    if config.resamples == 0 {
        return Err(Error::invalid("ground truth needs at least one resample"));
    }
    let start = std::time::Instant::now();
    let n = PLAYERS.len();
    let fresh: Vec<GenLatents> = (0..config.resamples)
        .into_par_iter()
        .map(|r| GenLatents::sample(&mut derive_rng(config.seed, &[example_id, r as u64]), latents.options))
        .collect();
    let values: Vec<Vec<f64>> = (0..1u32 << n)
        .into_par_iter()
        .map(|bits| {
            coalition_value(
                latents,
                &fresh,
                &GroupMask::from_bits(bits, n).expect("mask").to_bools(),
                config.dependencies,
            )
        })
        .collect();
    let mut table = CoalitionTable::new(n, HORIZON)?;
    for (bits, v) in values.into_iter().enumerate() {
        table.insert(GroupMask::from_bits(bits as u32, n)?, v)?;
    }
    let mut e = match config.permutations {
        None => exact_shap(&table)?,
        Some(k) => {
            let mut rng = derive_rng(config.seed, &[example_id, u64::MAX]);
            let perms: Vec<Vec<usize>> = (0..k)
                .map(|_| {
                    let mut p: Vec<usize> = (0..n).collect();
                    rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng);
                    p
                })
                .collect();
            let (base, attributions) = permutation_attributions(n, HORIZON, &perms, |_, present| {
                Ok(table
                    .get(GroupMask::from_bools(present))
                    .expect("complete table")
                    .to_vec())
            })?;
            Explanation {
                example_id: None,
                base_value: base,
                attributions,
                labels: Vec::new(),
                mode: ExplanationMode::Permutation,
                elapsed_ms: 0.0,
                mask_count: 2 * (n * k) as u64,
                model_calls: 0,
            }
        }
    };
    e.labels = PLAYERS.iter().map(|s| s.to_string()).collect();
    e.example_id = Some(example_id);
    e.model_calls = (table.len() * config.resamples) as u64;
    e.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(e)
}
