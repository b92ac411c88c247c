//! Feature layout, coalition blocks, windowed examples and standardisation.

use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, Months, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STEPS_PER_DAY: usize = 24;
pub const LOOKBACK: usize = 168;
pub const HORIZON: usize = 168;

/// Calendar meaning of a covariate; drives masker rules and baseline features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateRole {
    HourOfDay,
    DayOfWeek,
    Month,
    Holiday,
    Generic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovariateKind {
    Categorical { cardinality: usize },
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub kind: CovariateKind,
    pub role: CovariateRole,
}

impl Covariate {
    pub fn categorical(name: &str, cardinality: usize, role: CovariateRole) -> Self {
        Self {
            name: name.to_string(),
            kind: CovariateKind::Categorical { cardinality },
            role,
        }
    }

    pub fn continuous(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: CovariateKind::Continuous,
            role: CovariateRole::Generic,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.kind, CovariateKind::Continuous)
    }
}

/// Target plus covariates, and their grouping into coalition blocks:
/// one block per past day of target values, then one block per covariate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    covariates: Vec<Covariate>,
    lookback: usize,
    horizon: usize,
    day_groups: usize,
}

impl FeatureSchema {
    pub fn new(covariates: Vec<Covariate>, lookback: usize, horizon: usize, day_groups: usize) -> Result<Self> {
        if lookback != day_groups * STEPS_PER_DAY {
            return Err(Error::Schema(format!(
                "lookback {lookback} must equal {day_groups} day groups x {STEPS_PER_DAY}"
            )));
        }
        if horizon == 0 {
            return Err(Error::Schema("horizon must be positive".into()));
        }
        let names: BTreeSet<&str> = covariates.iter().map(|c| c.name.as_str()).collect();
        if names.len() != covariates.len() {
            return Err(Error::Schema("covariate names must be unique".into()));
        }
        for c in &covariates {
            if let CovariateKind::Categorical { cardinality } = c.kind {
                if cardinality == 0 {
                    return Err(Error::Schema(format!("covariate {} has zero cardinality", c.name)));
                }
            }
            if c.name.starts_with("day_") || c.name == "load" {
                return Err(Error::Schema(format!("covariate name {} is reserved", c.name)));
            }
        }
        if day_groups + covariates.len() > 32 {
            return Err(Error::Schema("at most 32 coalition groups are supported".into()));
        }
        Ok(Self {
            covariates,
            lookback,
            horizon,
            day_groups,
        })
    }

    fn calendar() -> Vec<Covariate> {
        vec![
            Covariate::categorical("hour", 24, CovariateRole::HourOfDay),
            Covariate::categorical("dow", 7, CovariateRole::DayOfWeek),
            Covariate::categorical("month", 12, CovariateRole::Month),
            Covariate::categorical("holiday", 2, CovariateRole::Holiday),
        ]
    }

    /// Real load data: calendar, holiday, temperature and precipitation (13 groups).
    pub fn real() -> Self {
        let mut c = Self::calendar();
        c.push(Covariate::continuous("temperature"));
        c.push(Covariate::continuous("precipitation"));
        Self::new(c, LOOKBACK, HORIZON, 7).expect("real schema")
    }

    /// Synthetic benchmark: calendar, holiday, the multiplier driver and two
    /// pure-noise covariates (14 groups). The multiplier plays the role of a
    /// temperature-like driver.
    pub fn synthetic() -> Self {
        let mut c = Self::calendar();
        c.push(Covariate::continuous("multiplier"));
        c.push(Covariate::continuous("noise1"));
        c.push(Covariate::continuous("noise2"));
        Self::new(c, LOOKBACK, HORIZON, 7).expect("synthetic schema")
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn window(&self) -> usize {
        self.lookback + self.horizon
    }

    pub fn day_groups(&self) -> usize {
        self.day_groups
    }

    /// Total number of coalition blocks.
    pub fn n_groups(&self) -> usize {
        self.day_groups + self.covariates.len()
    }

    /// Group index of covariate `c`.
    pub fn covariate_group(&self, c: usize) -> usize {
        self.day_groups + c
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    pub fn covariate_with_role(&self, role: CovariateRole) -> Option<usize> {
        self.covariates.iter().position(|c| c.role == role)
    }

    /// `day_0 .. day_{k-1}` followed by covariate names.
    pub fn group_labels(&self) -> Vec<String> {
        (0..self.day_groups)
            .map(|d| format!("day_{d}"))
            .chain(self.covariates.iter().map(|c| c.name.clone()))
            .collect()
    }

    /// Day group of past step `t`.
    pub fn day_of_step(&self, t: usize) -> usize {
        t / STEPS_PER_DAY
    }

    /// The same schema with covariate `c` dropped.
    pub fn without_covariate(&self, c: usize) -> Self {
        let mut covariates = self.covariates.clone();
        covariates.remove(c);
        Self {
            covariates,
            ..self.clone()
        }
    }

    /// Stable hash of the layout, used to pair checkpoints with data.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serialises");
        format!("{:016x}", fnv1a(&json))
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Presence bitset over coalition blocks (day groups first, then covariates).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupMask {
    bits: u32,
    n: u8,
}

impl GroupMask {
    pub fn full(n: usize) -> Self {
        assert!(n <= 32);
        let bits = if n == 32 { u32::MAX } else { (1u32 << n) - 1 };
        Self { bits, n: n as u8 }
    }

    pub fn empty(n: usize) -> Self {
        assert!(n <= 32);
        Self { bits: 0, n: n as u8 }
    }

    pub fn from_bits(bits: u32, n: usize) -> Result<Self> {
        if n > 32 || (n < 32 && bits >> n != 0) {
            return Err(Error::invalid(format!("mask {bits:#b} does not fit {n} groups")));
        }
        Ok(Self { bits, n: n as u8 })
    }

    pub fn from_bools(present: &[bool]) -> Self {
        let bits = present
            .iter()
            .enumerate()
            .fold(0u32, |acc, (i, p)| if *p { acc | (1 << i) } else { acc });
        Self {
            bits,
            n: present.len() as u8,
        }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn contains(&self, i: usize) -> bool {
        self.bits >> i & 1 == 1
    }

    pub fn with(self, i: usize) -> Self {
        Self {
            bits: self.bits | (1 << i),
            ..self
        }
    }

    pub fn without(self, i: usize) -> Self {
        Self {
            bits: self.bits & !(1 << i),
            ..self
        }
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_full(&self) -> bool {
        *self == Self::full(self.n())
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.n()).map(|i| self.contains(i)).collect()
    }

    pub fn present(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n()).filter(move |i| self.contains(*i))
    }
}

impl fmt::Debug for GroupMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupMask(")?;
        for i in 0..self.n() {
            write!(f, "{}", if self.contains(i) { '1' } else { '0' })?;
        }
        write!(f, ")")
    }
}

/// An input channel of the forecaster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Target,
    Covariate(usize),
}

/// All `(channel, step)` pairs a mask makes visible. Past target steps are
/// `0..lookback`; covariate steps are `0..lookback + horizon`.
pub fn mask_to_feature_set(mask: &GroupMask, schema: &FeatureSchema) -> BTreeSet<(Channel, usize)> {
    let mut out = BTreeSet::new();
    for g in mask.present() {
        if g < schema.day_groups() {
            for t in g * STEPS_PER_DAY..(g + 1) * STEPS_PER_DAY {
                out.insert((Channel::Target, t));
            }
        } else {
            let c = g - schema.day_groups();
            for t in 0..schema.window() {
                out.insert((Channel::Covariate(c), t));
            }
        }
    }
    out
}

/// One forecasting window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastExample {
    pub id: u64,
    pub past_target: Vec<f64>,
    /// `[covariate][lookback + horizon]`, categorical values as integer codes.
    pub covariates: Vec<Vec<f64>>,
    pub future_target: Vec<f64>,
    /// Timestamp of the first forecast step.
    pub origin: Option<DateTime<Utc>>,
}

impl ForecastExample {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.past_target.len() != schema.lookback() || self.future_target.len() != schema.horizon() {
            return Err(Error::Schema(format!("example {} has wrong target length", self.id)));
        }
        if self.covariates.len() != schema.covariates().len() {
            return Err(Error::Schema(format!(
                "example {} has {} covariates, schema has {}",
                self.id,
                self.covariates.len(),
                schema.covariates().len()
            )));
        }
        if self
            .past_target
            .iter()
            .chain(&self.future_target)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Schema(format!("example {} has non-finite target", self.id)));
        }
        for (cov, values) in schema.covariates().iter().zip(&self.covariates) {
            if values.len() != schema.window() {
                return Err(Error::Schema(format!("covariate {} has wrong length", cov.name)));
            }
            match cov.kind {
                CovariateKind::Categorical { cardinality } => {
                    if values
                        .iter()
                        .any(|v| *v < 0.0 || v.fract() != 0.0 || *v as usize >= cardinality)
                    {
                        return Err(Error::Schema(format!(
                            "covariate {} outside cardinality {cardinality}",
                            cov.name
                        )));
                    }
                }
                CovariateKind::Continuous => {
                    if values.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Schema(format!("covariate {} non-finite", cov.name)));
                    }
                }
            }
        }
        Ok(())
    }

    /// The full 2-week target series (past then future).
    pub fn target_series(&self) -> Vec<f64> {
        self.past_target.iter().chain(&self.future_target).copied().collect()
    }
}

/// Hourly observations with timestamps, ready for windowing.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AlignedTable {
    pub timestamps: Vec<DateTime<Utc>>,
    pub target: Vec<f64>,
    /// `[covariate][row]`
    pub covariates: Vec<Vec<f64>>,
}

impl AlignedTable {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    fn check(&self, schema: &FeatureSchema) -> Result<()> {
        let n = self.target.len();
        if self.timestamps.len() != n || self.covariates.len() != schema.covariates().len() {
            return Err(Error::Data("table columns do not match schema".into()));
        }
        if self.covariates.iter().any(|c| c.len() != n) {
            return Err(Error::Data("ragged table columns".into()));
        }
        for w in self.timestamps.windows(2) {
            if w[1] - w[0] != TimeDelta::hours(1) {
                return Err(Error::Data(format!(
                    "non-contiguous timestamps at {}",
                    w[1].to_rfc3339()
                )));
            }
        }
        for (i, v) in self.target.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "missing target at {}",
                    self.timestamps[i].to_rfc3339()
                )));
            }
        }
        for (c, col) in self.covariates.iter().enumerate() {
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "missing {} at {}",
                    schema.covariates()[c].name,
                    self.timestamps[i].to_rfc3339()
                )));
            }
        }
        Ok(())
    }

    fn example_at(&self, schema: &FeatureSchema, start: usize) -> ForecastExample {
        let lb = schema.lookback();
        let w = schema.window();
        ForecastExample {
            id: start as u64,
            past_target: self.target[start..start + lb].to_vec(),
            future_target: self.target[start + lb..start + w].to_vec(),
            covariates: self.covariates.iter().map(|c| c[start..start + w].to_vec()).collect(),
            origin: Some(self.timestamps[start + lb]),
        }
    }
}

/// Sliding windows at stride 1 over the whole table.
pub fn windowize(table: &AlignedTable, schema: &FeatureSchema) -> Result<Vec<ForecastExample>> {
    Ok(windowize_split(table, schema, &[])?.pop().unwrap_or_default())
}

/// Sliding windows split at the given row boundaries. A boundary `b` starts a
/// new segment at row `b`; windows containing rows on both sides are dropped.
/// Returns one list per segment (`boundaries.len() + 1`).
pub fn windowize_split(
    table: &AlignedTable,
    schema: &FeatureSchema,
    boundaries: &[usize],
) -> Result<Vec<Vec<ForecastExample>>> {
    table.check(schema)?;
    let w = schema.window();
    if table.len() < w {
        return Err(Error::Data(format!(
            "table has {} rows, need at least {w}",
            table.len()
        )));
    }
    if boundaries.windows(2).any(|b| b[0] >= b[1]) || boundaries.iter().any(|b| *b > table.len()) {
        return Err(Error::invalid(
            "split boundaries must be increasing and inside the table",
        ));
    }
    let mut segments = vec![Vec::new(); boundaries.len() + 1];
    for start in 0..=table.len() - w {
        let end = start + w;
        if boundaries.iter().any(|b| start < *b && *b < end) {
            continue;
        }
        let seg = boundaries.iter().filter(|b| **b <= start).count();
        let ex = table.example_at(schema, start);
        ex.validate(schema)?;
        segments[seg].push(ex);
    }
    Ok(segments)
}

/// Row boundaries for the real-data protocol: the last six months are test,
/// the six months before that validation. Returns `[val_start, test_start]`.
pub fn six_month_boundaries(timestamps: &[DateTime<Utc>]) -> Result<[usize; 2]> {
    let last = *timestamps.last().ok_or_else(|| Error::Data("empty table".into()))?;
    let test_from = last
        .checked_sub_months(Months::new(6))
        .ok_or_else(|| Error::Data("timestamp out of range".into()))?;
    let val_from = last
        .checked_sub_months(Months::new(12))
        .ok_or_else(|| Error::Data("timestamp out of range".into()))?;
    let idx = |t: DateTime<Utc>| timestamps.partition_point(|x| *x <= t);
    let (v, t) = (idx(val_from), idx(test_from));
    if v == 0 || v >= t || t >= timestamps.len() {
        return Err(Error::Data("table too short for the six-month split protocol".into()));
    }
    Ok([v, t])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let mut n = 0.0;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for v in values {
            n += 1.0;
            sum += v;
            sq += v * v;
        }
        let mean = if n > 0.0 { sum / n } else { 0.0 };
        let var = if n > 0.0 { (sq / n - mean * mean).max(0.0) } else { 0.0 };
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn scale(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn unscale(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Per-channel mean/std, fitted on training data. Categorical channels pass through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub target: ChannelStats,
    pub covariates: Vec<Option<ChannelStats>>,
}

impl Standardizer {
    pub fn identity(schema: &FeatureSchema) -> Self {
        let unit = ChannelStats { mean: 0.0, std: 1.0 };
        Self {
            target: unit,
            covariates: schema
                .covariates()
                .iter()
                .map(|c| c.is_continuous().then_some(unit))
                .collect(),
        }
    }

    pub fn fit(examples: &[ForecastExample], schema: &FeatureSchema) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Data("cannot fit a standardizer on zero examples".into()));
        }
        let target = ChannelStats::fit(
            examples
                .iter()
                .flat_map(|e| e.past_target.iter().chain(&e.future_target).copied()),
        );
        let covariates = schema
            .covariates()
            .iter()
            .enumerate()
            .map(|(c, cov)| {
                cov.is_continuous()
                    .then(|| ChannelStats::fit(examples.iter().flat_map(|e| e.covariates[c].iter().copied())))
            })
            .collect();
        Ok(Self { target, covariates })
    }

    pub fn apply(&self, ex: &ForecastExample) -> ForecastExample {
        let mut out = ex.clone();
        for v in out.past_target.iter_mut().chain(out.future_target.iter_mut()) {
            *v = self.target.scale(*v);
        }
        for (values, stats) in out.covariates.iter_mut().zip(&self.covariates) {
            if let Some(s) = stats {
                for v in values.iter_mut() {
                    *v = s.scale(*v);
                }
            }
        }
        out
    }

    pub fn target_to_units(&self, v: f64) -> f64 {
        self.target.unscale(v)
    }
}
