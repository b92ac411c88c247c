//! Global summaries of many local explanations: feature importance and
//! dependence-plot data, with CSV renderings.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{CovariateKind, FeatureSchema, ForecastExample};
use crate::shapley::Explanation;

/// Horizon step (0-based) read by dependence plots: the 24-hour-ahead value.
pub const DEPENDENCE_STEP: usize = 23;
/// Bins used when scoring candidate interacting features.
pub const INTERACTION_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub labels: Vec<String>,
    /// Share of the total absolute attribution, summing to 100.
    pub percent: Vec<f64>,
    /// Sum of absolute attributions over examples and horizon steps.
    pub raw: Vec<f64>,
}

impl ImportanceTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,percent,raw\n");
        for ((l, p), r) in self.labels.iter().zip(&self.percent).zip(&self.raw) {
            let _ = writeln!(s, "{l},{p},{r}");
        }
        s
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.percent[i])
    }
}

/// Global importance: absolute attributions summed over examples and steps,
/// then normalised to percentages.
pub fn feature_importance(explanations: &[Explanation]) -> Result<ImportanceTable> {
    let first = explanations
        .first()
        .ok_or_else(|| Error::invalid("no explanations to aggregate"))?;
    let labels = first.labels.clone();
    let mut raw = vec![0.0; labels.len()];
    for e in explanations {
        if e.labels != labels {
            return Err(Error::invalid("explanations have different group labels"));
        }
        for (r, row) in raw.iter_mut().zip(&e.attributions) {
            *r += row.iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::invalid(
            "importance percentages are undefined for all-zero attributions",
        ));
    }
    Ok(ImportanceTable {
        labels,
        percent: raw.iter().map(|r| 100.0 * r / total).collect(),
        raw,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencePoint {
    pub example_id: u64,
    pub x: f64,
    pub y: f64,
    pub interactor_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencePlot {
    pub group: String,
    pub step: usize,
    /// Covariate whose bins explain the most variance of `y`.
    pub interactor: Option<String>,
    /// True when `x` takes integer codes and benefits from jitter on display.
    pub discrete: bool,
    pub points: Vec<DependencePoint>,
}

fn is_load(label: &str) -> bool {
    label == "load" || label.starts_with("day_")
}

/// Value of feature `label` that a point at horizon `step` is plotted against.
fn feature_value(ex: &ForecastExample, schema: &FeatureSchema, label: &str, step: usize) -> Result<f64> {
    let t = schema.lookback() + step;
    if is_load(label) {
        let series = ex.target_series();
        return t
            .checked_sub(168)
            .map(|i| series[i])
            .ok_or_else(|| Error::invalid("lookback too short for a one-week lag"));
    }
    let c = schema
        .covariate_index(label)
        .ok_or_else(|| Error::invalid(format!("unknown group {label}")))?;
    Ok(ex.covariates[c][t])
}

/// Between-bin variance of `y` over up to `bins` equal-count bins of `x`.
/// Tied `x` values always share a bin.
pub fn between_bin_variance(x: &[f64], y: &[f64], bins: usize) -> f64 {
    let n = x.len();
    if n == 0 || bins == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mean = y.iter().sum::<f64>() / n as f64;
    let target = n.div_ceil(bins);
    let mut total = 0.0;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, &i) in order.iter().enumerate() {
        sum += y[i];
        count += 1;
        let boundary = k + 1 == n || (count >= target && x[order[k + 1]] != x[i]);
        if boundary {
            let m = sum / count as f64;
            total += count as f64 * (m - mean) * (m - mean);
            sum = 0.0;
            count = 0;
        }
    }
    total / n as f64
}

/// Dependence-plot data for group `label` at horizon step `step`. Load groups
/// are plotted against the load one week before the step, covariates against
/// their own value at the step. Explanations are paired with examples by id.
pub fn dependence_points(
    explanations: &[Explanation],
    examples: &[ForecastExample],
    schema: &FeatureSchema,
    label: &str,
    step: usize,
) -> Result<DependencePlot> {
    if step >= schema.horizon() {
        return Err(Error::invalid(format!("step {step} beyond the horizon")));
    }
    let by_id: HashMap<u64, &ForecastExample> = examples.iter().map(|e| (e.id, e)).collect();
    let mut points = Vec::with_capacity(explanations.len());
    let mut pairs = Vec::with_capacity(explanations.len());
    for e in explanations {
        let g = e
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::invalid(format!("explanation has no group {label}")))?;
        let id = e
            .example_id
            .ok_or_else(|| Error::invalid("explanation has no example id"))?;
        let ex = *by_id
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("no example with id {id}")))?;
        points.push(DependencePoint {
            example_id: id,
            x: feature_value(ex, schema, label, step)?,
            y: e.attributions[g][step],
            interactor_value: None,
        });
        pairs.push(ex);
    }

    let y: Vec<f64> = points.iter().map(|p| p.y).collect();
    let t = schema.lookback() + step;
    let mut best: Option<(usize, f64)> = None;
    for (c, cov) in schema.covariates().iter().enumerate() {
        if cov.name == label {
            continue;
        }
        let xs: Vec<f64> = pairs.iter().map(|ex| ex.covariates[c][t]).collect();
        let v = between_bin_variance(&xs, &y, INTERACTION_BINS);
        if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((c, v));
        }
    }
    if let Some((c, _)) = best {
        for (p, ex) in points.iter_mut().zip(&pairs) {
            p.interactor_value = Some(ex.covariates[c][t]);
        }
    }
    let discrete = !is_load(label)
        && schema
            .covariate_index(label)
            .is_some_and(|c| matches!(schema.covariates()[c].kind, CovariateKind::Categorical { .. }));
    Ok(DependencePlot {
        group: label.to_string(),
        step,
        interactor: best.map(|(c, _)| schema.covariates()[c].name.clone()),
        discrete,
        points,
    })
}

/// Deterministic offset in `[-0.2, 0.2)` derived from the example id.
fn jitter(id: u64) -> f64 {
    let h = id.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 11;
    (h as f64 / (1u64 << 53) as f64 - 0.5) * 0.4
}

impl DependencePlot {
    /// `example_id,x,x_display,y,interactor,interactor_value`; only
    /// `x_display` is jittered, and only for discrete features.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("example_id,x,x_display,y,interactor,interactor_value\n");
        let name = self.interactor.as_deref().unwrap_or("");
        for p in &self.points {
            let shown = if self.discrete { p.x + jitter(p.example_id) } else { p.x };
            let iv = p.interactor_value.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{}", p.example_id, p.x, shown, p.y, name, iv);
        }
        s
    }
}

/// One row per horizon step (1-based): every group's attribution, the
/// forecast the attributions add up to, and the observed target if known.
pub fn local_explanation_csv(e: &Explanation, target: Option<&[f64]>) -> Result<String> {
    let h = e.horizon();
    if target.is_some_and(|t| t.len() != h) {
        return Err(Error::invalid("target length differs from the horizon"));
    }
    let mut s = String::from("step,base");
    for l in &e.labels {
        s.push(',');
        s.push_str(l);
    }
    s.push_str(",prediction,target\n");
    let prediction = e.reconstruction();
    for t in 0..h {
        let _ = write!(s, "{},{}", t + 1, e.base_value[t]);
        for row in &e.attributions {
            let _ = write!(s, ",{}", row[t]);
        }
        let target = target.map(|v| v[t].to_string()).unwrap_or_default();
        let _ = writeln!(s, ",{},{}", prediction[t], target);
    }
    Ok(s)
}
