//! Dataset directories. A dataset is either a set of independent windows
//! (`train.csv`, `val.csv`, `test.csv` in long format, one row per step) or
//! one hourly series (`series.csv` plus `series.json`) that is windowed on
//! load. Both carry `schema.json`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use shapcast::schema::{windowize_split, AlignedTable, FeatureSchema, ForecastExample};
use shapcast::synthgen::Split;

use crate::output::write_bytes;

pub const SCHEMA_FILE: &str = "schema.json";
pub const SERIES_FILE: &str = "series.csv";
pub const SERIES_META: &str = "series.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub train: Vec<ForecastExample>,
    pub val: Vec<ForecastExample>,
    pub test: Vec<ForecastExample>,
}

/// How a stored hourly series is cut into splits and windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    /// Row indices where validation and test start; empty puts every
    /// window in the training split.
    pub boundaries: Vec<usize>,
    /// Keep every `stride`-th window.
    pub stride: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[ForecastExample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// The example with `id`, searching test, then validation, then train.
    pub fn find(&self, id: u64) -> Option<&ForecastExample> {
        [Split::Test, Split::Val, Split::Train]
            .into_iter()
            .find_map(|s| self.split(s).iter().find(|e| e.id == id))
    }

    /// Writes the windows of every split in long format.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_bytes(
            &dir.join(SCHEMA_FILE),
            serde_json::to_string_pretty(&self.schema)?.as_bytes(),
        )?;
        let mut meta = csv::Writer::from_writer(Vec::new());
        meta.write_record(["example_id", "split", "origin"])?;
        for split in Split::ALL {
            let examples = self.split(split);
            write_bytes(
                &dir.join(format!("{}.csv", split.name())),
                &windows_csv(&self.schema, examples)?,
            )?;
            for ex in examples {
                let origin = ex.origin.map(|o| o.to_rfc3339()).unwrap_or_default();
                meta.write_record([ex.id.to_string(), split.name().to_string(), origin])?;
            }
        }
        write_bytes(&dir.join("examples.csv"), &meta.into_inner()?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let schema: FeatureSchema = serde_json::from_str(
            &std::fs::read_to_string(dir.join(SCHEMA_FILE))
                .with_context(|| format!("{} is not a dataset directory", dir.display()))?,
        )?;
        if dir.join(SERIES_META).exists() {
            let meta: SeriesMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(SERIES_META))?)?;
            let table = read_series(&dir.join(SERIES_FILE), &schema)?;
            return Self::from_series(&table, &schema, &meta);
        }
        let mut splits = Split::ALL
            .iter()
            .map(|s| read_windows(&dir.join(format!("{}.csv", s.name())), &schema))
            .collect::<Result<Vec<_>>>()?;
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(Self {
            schema,
            train,
            val,
            test,
        })
    }

    pub fn from_series(table: &AlignedTable, schema: &FeatureSchema, meta: &SeriesMeta) -> Result<Self> {
        ensure!(meta.stride >= 1, "stride must be at least 1");
        ensure!(
            meta.boundaries.is_empty() || meta.boundaries.len() == 2,
            "series split needs zero or two boundaries"
        );
        let mut segments = windowize_split(table, schema, &meta.boundaries)?;
        for seg in &mut segments {
            let kept: Vec<ForecastExample> = seg.drain(..).step_by(meta.stride).collect();
            *seg = kept;
        }
        segments.resize_with(3, Vec::new);
        let test = segments.pop().expect("three segments");
        let val = segments.pop().expect("three segments");
        let train = segments.pop().expect("three segments");
        Ok(Self {
            schema: schema.clone(),
            train,
            val,
            test,
        })
    }
}

fn header(schema: &FeatureSchema) -> Vec<String> {
    let mut h = vec!["example_id".to_string(), "step".to_string(), "load".to_string()];
    h.extend(schema.covariates().iter().map(|c| c.name.clone()));
    h
}

/// Long-format CSV: one row per window step, load over the whole window.
pub fn windows_csv(schema: &FeatureSchema, examples: &[ForecastExample]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(schema))?;
    for ex in examples {
        let series = ex.target_series();
        for (t, load) in series.iter().enumerate() {
            let mut row = vec![ex.id.to_string(), t.to_string(), load.to_string()];
            row.extend(ex.covariates.iter().map(|c| c[t].to_string()));
            w.write_record(&row)?;
        }
    }
    Ok(w.into_inner()?)
}

fn parse_f64(s: &str, what: &str, line: u64) -> Result<f64> {
    s.trim()
        .parse()
        .with_context(|| format!("line {line}: bad {what} value {s:?}"))
}

pub fn read_windows(path: &Path, schema: &FeatureSchema) -> Result<Vec<ForecastExample>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let expected = header(schema);
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    ensure!(
        found == expected,
        "{}: expected columns {expected:?}, found {found:?}",
        path.display()
    );
    let (w, lb) = (schema.window(), schema.lookback());
    let k = schema.covariates().len();
    let mut out: Vec<ForecastExample> = Vec::new();
    let mut series: Vec<f64> = Vec::with_capacity(w);
    let mut covs: Vec<Vec<f64>> = vec![Vec::with_capacity(w); k];
    let mut current: Option<u64> = None;
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: u64 = rec[0].parse().with_context(|| format!("line {line}: bad example_id"))?;
        let step: usize = rec[1].parse().with_context(|| format!("line {line}: bad step"))?;
        if current != Some(id) {
            ensure!(
                current.is_none() || series.len() == w,
                "example {:?} is incomplete",
                current
            );
            ensure!(step == 0, "line {line}: example {id} does not start at step 0");
            current = Some(id);
            series.clear();
            covs.iter_mut().for_each(Vec::clear);
        }
        ensure!(step == series.len() && step < w, "line {line}: unexpected step {step}");
        series.push(parse_f64(&rec[2], "load", line)?);
        for (c, col) in covs.iter_mut().enumerate() {
            col.push(parse_f64(&rec[3 + c], &expected[3 + c], line)?);
        }
        if series.len() == w {
            let ex = ForecastExample {
                id,
                past_target: series[..lb].to_vec(),
                future_target: series[lb..].to_vec(),
                covariates: covs.clone(),
                origin: None,
            };
            ex.validate(schema)?;
            out.push(ex);
        }
    }
    ensure!(
        current.is_none() || series.len() == w,
        "last example in {} is incomplete",
        path.display()
    );
    Ok(out)
}

pub fn write_series(dir: &Path, table: &AlignedTable, schema: &FeatureSchema, meta: &SeriesMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut h = vec!["utc_timestamp".to_string(), "load".to_string()];
    h.extend(schema.covariates().iter().map(|c| c.name.clone()));
    w.write_record(&h)?;
    for (i, ts) in table.timestamps.iter().enumerate() {
        let mut row = vec![ts.to_rfc3339(), table.target[i].to_string()];
        row.extend(table.covariates.iter().map(|c| c[i].to_string()));
        w.write_record(&row)?;
    }
    write_bytes(&dir.join(SERIES_FILE), &w.into_inner()?)?;
    write_bytes(&dir.join(SERIES_META), serde_json::to_string_pretty(meta)?.as_bytes())?;
    write_bytes(&dir.join(SCHEMA_FILE), serde_json::to_string_pretty(schema)?.as_bytes())?;
    Ok(())
}

pub fn read_series(path: &Path, schema: &FeatureSchema) -> Result<AlignedTable> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let k = schema.covariates().len();
    if r.headers()?.len() != k + 2 {
        bail!("{}: expected {} columns", path.display(), k + 2);
    }
    let mut table = AlignedTable {
        covariates: vec![Vec::new(); k],
        ..Default::default()
    };
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let ts = DateTime::parse_from_rfc3339(&rec[0])
            .with_context(|| format!("line {line}: bad timestamp"))?
            .with_timezone(&Utc);
        table.timestamps.push(ts);
        table.target.push(parse_f64(&rec[1], "load", line)?);
        for (c, col) in table.covariates.iter_mut().enumerate() {
            col.push(parse_f64(&rec[2 + c], "covariate", line)?);
        }
    }
    Ok(table)
}

/// Split name of every example id listed in `examples.csv`.
pub fn example_splits(dir: &Path) -> Result<BTreeMap<u64, String>> {
    let mut r = csv::Reader::from_path(dir.join("examples.csv"))?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        out.insert(rec[0].parse()?, rec[1].to_string());
    }
    Ok(out)
}
