//! Persistence and linear-regression forecasters and the forecast metrics.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{CovariateKind, CovariateRole, FeatureSchema, ForecastExample, Standardizer};

/// Ridge added to the normal equations for conditioning.
pub const RIDGE: f64 = 1e-8;
/// Standardized targets smaller than this are left out of the MAPE.
pub const MAPE_FLOOR: f64 = 1e-6;

/// Copies the value observed one week earlier.
pub fn persistence(example: &ForecastExample) -> Result<Vec<f64>> {
    let h = example.future_target.len();
    if example.past_target.len() != h {
        return Err(Error::invalid("persistence needs lookback equal to horizon"));
    }
    Ok(example.past_target.clone())
}

/// Per-step features: lagged load, cyclic encodings of hour, weekday and
/// month, the holiday flag and the raw continuous covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub names: Vec<String>,
    schema: FeatureSchema,
}

impl FeatureMap {
    pub fn new(schema: &FeatureSchema) -> Result<Self> {
        if schema.lookback() < schema.horizon() {
            return Err(Error::invalid("the lag feature needs lookback ≥ horizon"));
        }
        let mut names = vec![format!("load_lag{}", schema.lookback())];
        for c in schema.covariates() {
            match (c.kind, c.role) {
                (
                    CovariateKind::Categorical { .. },
                    CovariateRole::HourOfDay | CovariateRole::DayOfWeek | CovariateRole::Month,
                ) => {
                    names.push(format!("{}_sin", c.name));
                    names.push(format!("{}_cos", c.name));
                }
                _ => names.push(c.name.clone()),
            }
        }
        Ok(Self {
            names,
            schema: schema.clone(),
        })
    }

    pub fn arity(&self) -> usize {
        self.names.len()
    }

    /// Features of forecast step `t`.
    pub fn row(&self, ex: &ForecastExample, t: usize) -> Vec<f64> {
        let s = &self.schema;
        let i = s.lookback() + t;
        let mut out = Vec::with_capacity(self.arity());
        out.push(ex.past_target[s.lookback() - s.horizon() + t]);
        for (c, series) in s.covariates().iter().zip(&ex.covariates) {
            let v = series[i];
            let period = match (c.kind, c.role) {
                (CovariateKind::Categorical { .. }, CovariateRole::HourOfDay) => Some(24.0),
                (CovariateKind::Categorical { .. }, CovariateRole::DayOfWeek) => Some(7.0),
                (CovariateKind::Categorical { .. }, CovariateRole::Month) => Some(12.0),
                _ => None,
            };
            match period {
                Some(p) => {
                    let x = 2.0 * PI * v / p;
                    out.push(x.sin());
                    out.push(x.cos());
                }
                None => out.push(v),
            }
        }
        out
    }
}

/// One coefficient vector shared by every horizon step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub features: FeatureMap,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict(&self, ex: &ForecastExample) -> Vec<f64> {
        (0..self.features.schema.horizon())
            .map(|t| {
                self.features
                    .row(ex, t)
                    .iter()
                    .zip(&self.coefficients)
                    .map(|(x, w)| x * w)
                    .sum::<f64>()
                    + self.intercept
            })
            .collect()
    }
}

/// Least squares over every (example, step) pair via ridge-stabilised normal
/// equations.
pub fn fit_linear(examples: &[ForecastExample], schema: &FeatureSchema) -> Result<LinearModel> {
    let features = FeatureMap::new(schema)?;
    let k = features.arity() + 1;
    if examples.len() * schema.horizon() < k {
        return Err(Error::Data(format!("need at least {k} rows to fit {k} coefficients")));
    }
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    for ex in examples {
        ex.validate(schema)?;
        for t in 0..schema.horizon() {
            row[..k - 1].copy_from_slice(&features.row(ex, t));
            row[k - 1] = 1.0;
            let y = ex.future_target[t];
            for a in 0..k {
                xty[a] += row[a] * y;
                for b in a..k {
                    xtx[(a, b)] += row[a] * row[b];
                }
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
        xtx[(a, a)] += RIDGE;
    }
    let sol = xtx
        .cholesky()
        .ok_or_else(|| Error::invalid("design matrix is degenerate beyond ridge rescue"))?
        .solve(&xty);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear fit"));
    }
    Ok(LinearModel {
        features,
        coefficients: sol.iter().take(k - 1).copied().collect(),
        intercept: sol[k - 1],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae_scaled: f64,
    pub mse_scaled: f64,
    pub mae_units: f64,
    pub rmse_units: f64,
    pub mape_percent: f64,
}

/// Metrics of standardized `predictions` against standardized `targets`;
/// the standardizer converts to physical units.
pub fn evaluate(predictions: &[Vec<f64>], targets: &[Vec<f64>], standardizer: &Standardizer) -> Result<MetricReport> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::invalid(
            "predictions and targets must be nonempty and equally many",
        ));
    }
    let (mut n, mut ae, mut se, mut ae_u, mut se_u, mut ape, mut n_ape) = (0usize, 0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    for (p, y) in predictions.iter().zip(targets) {
        if p.len() != y.len() {
            return Err(Error::invalid("prediction and target lengths differ"));
        }
        for (&p, &y) in p.iter().zip(y) {
            let e = p - y;
            ae += e.abs();
            se += e * e;
            let (pu, yu) = (standardizer.target_to_units(p), standardizer.target_to_units(y));
            ae_u += (pu - yu).abs();
            se_u += (pu - yu).powi(2);
            if y.abs() >= MAPE_FLOOR {
                ape += ((pu - yu) / yu).abs();
                n_ape += 1;
            }
            n += 1;
        }
    }
    if n_ape == 0 {
        return Err(Error::invalid("every target is zero; MAPE is undefined"));
    }
    let n = n as f64;
    Ok(MetricReport {
        mae_scaled: ae / n,
        mse_scaled: se / n,
        mae_units: ae_u / n,
        rmse_units: (se_u / n).sqrt(),
        mape_percent: 100.0 * ape / n_ape as f64,
    })
}

/// CSV with one row per model in the metric-table column layout.
pub fn metrics_csv(rows: &[(String, MetricReport)]) -> String {
    let mut s = String::from("model,mae_scaled,mse_scaled,mae_units,rmse_units,mape_percent\n");
    for (name, m) in rows {
        s.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            m.mae_scaled, m.mse_scaled, m.mae_units, m.rmse_units, m.mape_percent
        ));
    }
    s
}
