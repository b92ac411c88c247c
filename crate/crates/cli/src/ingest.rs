//! Real load data: hourly load and weather CSVs plus a holiday calendar,
//! joined into one validated hourly table with derived calendar features.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, TimeDelta, Timelike, Utc};
use shapcast::schema::{AlignedTable, FeatureSchema};

/// Parses an ISO-8601 timestamp. Explicit offsets are converted to UTC;
/// timestamps without an offset are taken as UTC.
pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc());
        }
    }
    bail!("unparseable timestamp {s:?}")
}

/// Columns `utc_timestamp` plus `columns`, keyed by timestamp. Empty or
/// non-numeric cells are an error naming the timestamp, as are duplicate
/// timestamps (which arise from local-time exports around DST changes).
fn read_columns(path: &Path, columns: &[&str]) -> Result<BTreeMap<DateTime<Utc>, Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = r.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .with_context(|| format!("{}: missing column {name}", path.display()))
    };
    let ts_col = find("utc_timestamp")?;
    let cols = columns.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let ts = parse_timestamp(&rec[ts_col]).with_context(|| format!("{}", path.display()))?;
        if ts.minute() != 0 || ts.second() != 0 {
            bail!("{}: timestamp {} is not on the hour", path.display(), ts.to_rfc3339());
        }
        let mut values = Vec::with_capacity(cols.len());
        for (&c, name) in cols.iter().zip(columns) {
            let cell = rec.get(c).unwrap_or("").trim();
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .with_context(|| format!("{}: missing {name} at {}", path.display(), ts.to_rfc3339()))?;
            values.push(v);
        }
        if out.insert(ts, values).is_some() {
            bail!(
                "{}: duplicate timestamp {} (data must be in UTC)",
                path.display(),
                ts.to_rfc3339()
            );
        }
    }
    Ok(out)
}

pub fn read_holidays(path: &Path) -> Result<BTreeSet<NaiveDate>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| NaiveDate::parse_from_str(l, "%Y-%m-%d").with_context(|| format!("bad holiday date {l:?}")))
        .collect()
}

/// Inner join of load and weather on timestamps, with hour, weekday
/// (Monday = 0), month (January = 0) and holiday flag derived from each
/// timestamp. The joined rows must form one gap-free hourly sequence.
pub fn align(
    load: &BTreeMap<DateTime<Utc>, Vec<f64>>,
    weather: &BTreeMap<DateTime<Utc>, Vec<f64>>,
    holidays: &BTreeSet<NaiveDate>,
) -> Result<AlignedTable> {
    let schema = FeatureSchema::real();
    let mut table = AlignedTable {
        covariates: vec![Vec::new(); schema.covariates().len()],
        ..Default::default()
    };
    for (ts, l) in load {
        let Some(w) = weather.get(ts) else { continue };
        if let Some(prev) = table.timestamps.last() {
            if *ts - *prev != TimeDelta::hours(1) {
                bail!(
                    "gap in joined data between {} and {}",
                    prev.to_rfc3339(),
                    ts.to_rfc3339()
                );
            }
        }
        table.timestamps.push(*ts);
        table.target.push(l[0]);
        let calendar = [
            ts.hour() as f64,
            ts.weekday().num_days_from_monday() as f64,
            ts.month0() as f64,
            holidays.contains(&ts.date_naive()) as u8 as f64,
            w[0],
            w[1],
        ];
        for (col, v) in table.covariates.iter_mut().zip(calendar) {
            col.push(v);
        }
    }
    if table.is_empty() {
        bail!("load and weather share no timestamps");
    }
    Ok(table)
}

/// Reads and joins the three inputs of the real-data pipeline.
pub fn ingest(load: &Path, weather: &Path, holidays: &Path) -> Result<AlignedTable> {
    let load = read_columns(load, &["load_MW"])?;
    let weather = read_columns(weather, &["temperature_C", "precipitation_mm"])?;
    align(&load, &weather, &read_holidays(holidays)?)
}

#[cfg(test)]
mod tests {
    use std::fmt::Write as _;

    use chrono::TimeZone;
    use shapcast::schema::windowize;

    use super::*;

    fn write_inputs(dir: &Path, hours: usize, edit: impl Fn(usize, &str) -> String) {
        let start = Utc.with_ymd_and_hms(2021, 3, 1, 0, 0, 0).unwrap();
        let (mut load, mut weather) = (
            String::from("utc_timestamp,load_MW\n"),
            String::from("utc_timestamp,temperature_C,precipitation_mm\n"),
        );
        for h in 0..hours {
            let ts = (start + TimeDelta::hours(h as i64))
                .format("%Y-%m-%dT%H:%M:%SZ")
                .to_string();
            load.push_str(&edit(h, &format!("{ts},{}\n", 5000.0 + h as f64)));
            let _ = writeln!(weather, "{ts},{},0.0", 3.0 + (h % 24) as f64 * 0.1);
        }
        std::fs::write(dir.join("load.csv"), load).unwrap();
        std::fs::write(dir.join("weather.csv"), weather).unwrap();
        std::fs::write(dir.join("holidays.txt"), "2021-03-02\n").unwrap();
    }

    fn run(dir: &Path) -> Result<AlignedTable> {
        ingest(
            &dir.join("load.csv"),
            &dir.join("weather.csv"),
            &dir.join("holidays.txt"),
        )
    }

    #[test]
    fn minimal_window_gives_one_example() {
        let dir = tempfile::tempdir().unwrap();
        write_inputs(dir.path(), 336, |_, l| l.to_string());
        let table = run(dir.path()).unwrap();
        assert_eq!(table.len(), 336);
        assert_eq!(table.covariates[0][5], 5.0);
        // 2021-03-01 was a Monday.
        assert_eq!(table.covariates[1][0], 0.0);
        assert_eq!(table.covariates[2][0], 2.0);
        assert_eq!(table.covariates[3][23], 0.0);
        assert_eq!(table.covariates[3][24], 1.0);
        assert_eq!(windowize(&table, &FeatureSchema::real()).unwrap().len(), 1);
    }

    #[test]
    fn missing_load_names_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        write_inputs(dir.path(), 48, |h, l| {
            if h == 10 {
                l.split(',').next().unwrap().to_string() + ",\n"
            } else {
                l.to_string()
            }
        });
        let err = format!("{:#}", run(dir.path()).unwrap_err());
        assert!(err.contains("missing load_MW at 2021-03-01T10:00:00+00:00"), "{err}");
    }

    #[test]
    fn duplicate_timestamp_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_inputs(
            dir.path(),
            48,
            |h, l| if h == 5 { format!("{l}{l}") } else { l.to_string() },
        );
        let err = format!("{:#}", run(dir.path()).unwrap_err());
        assert!(err.contains("duplicate timestamp"), "{err}");
    }

    #[test]
    fn gaps_and_missing_columns_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_inputs(
            dir.path(),
            48,
            |h, l| if h == 7 { String::new() } else { l.to_string() },
        );
        assert!(format!("{:#}", run(dir.path()).unwrap_err()).contains("gap"));
        std::fs::write(dir.path().join("weather.csv"), "utc_timestamp,temperature_C\n").unwrap();
        assert!(format!("{:#}", run(dir.path()).unwrap_err()).contains("missing column precipitation_mm"));
    }

    #[test]
    fn timestamp_forms() {
        let a = parse_timestamp("2021-03-01T01:00:00+01:00").unwrap();
        let b = parse_timestamp("2021-03-01 00:00:00").unwrap();
        assert_eq!(a, b);
        assert!(parse_timestamp("yesterday").is_err());
    }
}
