//! Result files.
//!
//! Observation CSV columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `schema_version` | [`SCHEMA_VERSION`] |
//! | `trial`, `step` | trial index, grid index `k` |
//! | `t`, `time` | pseudo-time `k/N`, physical time `Tk/N` |
//! | `stable` | `1` until the trial became unstable, then `0` |
//! | `ksd_target`, `ksd_tempered` | KSD against `π₁` and against `π_t` |
//! | `mean_0 .. mean_{d-1}` | ensemble mean |
//! | `var_0 .. var_{d-1}` | unbiased ensemble variance per coordinate |
//! | `step_time_ns` | wall time of the step that produced the row |
//!
//! Missing values are empty fields. The summary CSV has the same layout
//! with `trial` replaced by `stable_trials` and no timing column.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::error::Result;

use super::experiment::RunRecord;

pub const SCHEMA_VERSION: u32 = 1;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn vec_fields(v: Option<&Vec<f64>>, dim: usize) -> impl Iterator<Item = String> + '_ {
    (0..dim).map(move |k| opt(v.map(|v| v[k])))
}

fn coord_header(prefix: &str, dim: usize) -> impl Iterator<Item = String> + '_ {
    (0..dim).map(move |k| format!("{prefix}_{k}"))
}

pub fn observation_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["schema_version", "trial", "step", "t", "time", "stable", "ksd_target", "ksd_tempered"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(coord_header("mean", dim));
    h.extend(coord_header("var", dim));
    h.push("step_time_ns".into());
    h
}

pub fn write_observations<W: Write>(record: &RunRecord, out: W) -> Result<()> {
    let dim = record.dim;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(observation_header(dim))?;
    for o in &record.observations {
        let mut row = vec![
            SCHEMA_VERSION.to_string(),
            o.trial.to_string(),
            o.step.to_string(),
            o.t.to_string(),
            o.time.to_string(),
            (o.stable as u8).to_string(),
            opt(o.ksd_target),
            opt(o.ksd_tempered),
        ];
        row.extend(vec_fields(o.mean.as_ref(), dim));
        row.extend(vec_fields(o.variance.as_ref(), dim));
        row.push(o.step_time_ns.map(|n| n.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(record: &RunRecord, out: W) -> Result<()> {
    let dim = record.dim;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["schema_version", "stable_trials", "step", "t", "time", "ksd_target", "ksd_tempered"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(coord_header("mean", dim));
    header.extend(coord_header("var", dim));
    w.write_record(&header)?;
    for s in &record.summary {
        let mut row = vec![
            SCHEMA_VERSION.to_string(),
            s.stable_trials.to_string(),
            s.step.to_string(),
            s.t.to_string(),
            s.time.to_string(),
            opt(s.ksd_target),
            opt(s.ksd_tempered),
        ];
        row.extend(vec_fields(s.mean.as_ref(), dim));
        row.extend(vec_fields(s.variance.as_ref(), dim));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Resolved configuration, library version and per-trial outcomes.
pub fn sidecar(record: &RunRecord) -> serde_json::Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "library": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config": record.config,
        "dim": record.dim,
        "all_stable": record.all_stable(),
        "trials": record.trials,
        "final_ksd": record.final_summary().and_then(|s| s.ksd_target),
    })
}

/// Paths written by [`write_record`] for the observation CSV `csv_path`.
pub fn companion_paths(csv_path: &Path) -> (PathBuf, PathBuf) {
    let stem = csv_path.with_extension("");
    let mut summary = stem.clone().into_os_string();
    summary.push(".summary.csv");
    let mut json = stem.into_os_string();
    json.push(".json");
    (summary.into(), json.into())
}

/// Writes `<path>`, `<stem>.summary.csv` and `<stem>.json`.
pub fn write_record(record: &RunRecord, csv_path: &Path) -> Result<()> {
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_observations(record, BufWriter::new(File::create(csv_path)?))?;
    let (summary, json) = companion_paths(csv_path);
    write_summary(record, BufWriter::new(File::create(summary)?))?;
    let mut f = BufWriter::new(File::create(json)?);
    serde_json::to_writer_pretty(&mut f, &sidecar(record)).map_err(std::io::Error::from)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn companion_names() {
        let (s, j) = companion_paths(Path::new("out/run.csv"));
        assert_eq!(s, PathBuf::from("out/run.summary.csv"));
        assert_eq!(j, PathBuf::from("out/run.json"));
    }

    #[test]
    fn header_layout() {
        let h = observation_header(2);
        assert_eq!(h[0], "schema_version");
        assert_eq!(&h[8..12], &["mean_0", "mean_1", "var_0", "var_1"]);
        assert_eq!(h.last().unwrap(), "step_time_ns");
    }
}
