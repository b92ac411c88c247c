use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::ChannelStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationMode {
    ExactShap,
    Owen,
    Permutation,
    CustomMasker,
}

/// One group's attributions over the horizon, as stored in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupValues {
    pub label: String,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Wire {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    example_id: Option<u64>,
    mode: ExplanationMode,
    base_value: Vec<f64>,
    groups: Vec<GroupValues>,
    elapsed_ms: f64,
    mask_count: u64,
    model_calls: u64,
}

/// Per-group, per-horizon-step attributions of one forecast.
///
/// `attributions[g][t]` is group `g`'s contribution at step `t`; with
/// `base_value[t]` they sum to the full-coalition forecast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Wire", try_from = "Wire")]
pub struct Explanation {
    pub example_id: Option<u64>,
    pub base_value: Vec<f64>,
    pub attributions: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    pub mode: ExplanationMode,
    pub elapsed_ms: f64,
    pub mask_count: u64,
    pub model_calls: u64,
}

impl From<Explanation> for Wire {
    fn from(e: Explanation) -> Self {
        Wire {
            example_id: e.example_id,
            mode: e.mode,
            base_value: e.base_value,
            groups: e
                .labels
                .into_iter()
                .zip(e.attributions)
                .map(|(label, values)| GroupValues { label, values })
                .collect(),
            elapsed_ms: e.elapsed_ms,
            mask_count: e.mask_count,
            model_calls: e.model_calls,
        }
    }
}

impl TryFrom<Wire> for Explanation {
    type Error = Error;

    fn try_from(w: Wire) -> Result<Self> {
        let h = w.base_value.len();
        if w.groups.iter().any(|g| g.values.len() != h) {
            return Err(Error::invalid(format!("group values must have the horizon length {h}")));
        }
        let (labels, attributions) = w.groups.into_iter().map(|g| (g.label, g.values)).unzip();
        Ok(Explanation {
            example_id: w.example_id,
            base_value: w.base_value,
            attributions,
            labels,
            mode: w.mode,
            elapsed_ms: w.elapsed_ms,
            mask_count: w.mask_count,
            model_calls: w.model_calls,
        })
    }
}

impl Explanation {
    pub fn n_groups(&self) -> usize {
        self.attributions.len()
    }

    pub fn horizon(&self) -> usize {
        self.base_value.len()
    }

    /// Base value plus all attributions, per horizon step.
    pub fn reconstruction(&self) -> Vec<f64> {
        let mut out = self.base_value.clone();
        for row in &self.attributions {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Largest `|base + Σ attributions − full|` over the horizon.
    pub fn efficiency_gap(&self, full: &[f64]) -> f64 {
        self.reconstruction()
            .iter()
            .zip(full)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mean absolute attribution of each group over the horizon.
    pub fn importance(&self) -> Vec<f64> {
        self.attributions
            .iter()
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>() / row.len().max(1) as f64)
            .collect()
    }

    /// The explanation of a forecast mapped back from standardised units:
    /// the base value is unscaled and attributions are multiplied by the
    /// target's standard deviation.
    pub fn to_units(&self, target: &ChannelStats) -> Explanation {
        Explanation {
            base_value: self.base_value.iter().map(|v| target.unscale(*v)).collect(),
            attributions: self
                .attributions
                .iter()
                .map(|row| row.iter().map(|v| v * target.std).collect())
                .collect(),
            ..self.clone()
        }
    }

    /// Sums the listed groups into one group named `label`, placed where the
    /// first of them was.
    pub fn merge(&self, groups: &[usize], label: &str) -> Result<Explanation> {
        if groups.is_empty() || groups.iter().any(|&g| g >= self.n_groups()) {
            return Err(Error::invalid("merge groups out of range"));
        }
        let first = *groups.iter().min().unwrap();
        let mut merged = vec![0.0; self.horizon()];
        for &g in groups {
            for (m, v) in merged.iter_mut().zip(&self.attributions[g]) {
                *m += v;
            }
        }
        let mut out = self.clone();
        out.attributions.clear();
        out.labels.clear();
        for g in 0..self.n_groups() {
            if g == first {
                out.attributions.push(merged.clone());
                out.labels.push(label.to_string());
            } else if !groups.contains(&g) {
                out.attributions.push(self.attributions[g].clone());
                out.labels.push(self.labels[g].clone());
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
