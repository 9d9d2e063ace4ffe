//! Cartesian sweeps over `(J, N, λ, ε, T)` with best-per-cell selection.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};

use super::config::{RunConfig, SweepGrid};
use super::experiment::{run_experiment, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    #[serde(rename = "J")]
    pub particles: usize,
    #[serde(rename = "N")]
    pub steps: usize,
    pub lambda: f64,
    pub epsilon: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl SweepPoint {
    fn of(cfg: &RunConfig) -> Self {
        Self {
            particles: cfg.particles,
            steps: cfg.steps,
            lambda: cfg.lambda,
            epsilon: cfg.epsilon,
            horizon: cfg.horizon,
        }
    }
}

/// Best setting for one `(J, N)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub point: SweepPoint,
    /// Index into [`SweepResult::records`].
    pub index: usize,
    pub final_ksd: f64,
}

#[derive(Debug)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    pub best: Vec<Selection>,
}

fn axis<T: Copy>(values: &Option<Vec<T>>, base: T, name: &str) -> Result<Vec<T>> {
    match values {
        None => Ok(vec![base]),
        Some(v) if v.is_empty() => Err(Error::config(format!("sweep.{name}"), "empty grid axis")),
        Some(v) => Ok(v.clone()),
    }
}

/// All configurations of the grid, with `J` slowest and `T` fastest.
pub fn expand(base: &RunConfig, grid: &SweepGrid) -> Result<Vec<RunConfig>> {
    let js = axis(&grid.particles, base.particles, "J")?;
    let ns = axis(&grid.steps, base.steps, "N")?;
    let ls = axis(&grid.lambda, base.lambda, "lambda")?;
    let es = axis(&grid.epsilon, base.epsilon, "epsilon")?;
    let ts = axis(&grid.horizon, base.horizon, "T")?;
    let mut out = Vec::new();
    for &j in &js {
        for &n in &ns {
            for &l in &ls {
                for &e in &es {
                    for &t in &ts {
                        let mut s = base.to_section();
                        s.particles = Some(j);
                        s.steps = Some(n);
                        s.lambda = Some(l);
                        s.epsilon = Some(e);
                        if grid.horizon.is_some() || !base.sampler.is_unit_time() {
                            s.horizon = Some(t);
                        }
                        out.push(RunConfig::resolve(&s)?);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Smaller KSD wins; ties go to smaller λ, then ε, then T. Non-finite
/// KSDs (no stable trial) never win.
pub fn compare(a: (&SweepPoint, f64), b: (&SweepPoint, f64)) -> Ordering {
    let key = |k: f64| if k.is_finite() { k } else { f64::INFINITY };
    key(a.1)
        .total_cmp(&key(b.1))
        .then(a.0.lambda.total_cmp(&b.0.lambda))
        .then(a.0.epsilon.total_cmp(&b.0.epsilon))
        .then(a.0.horizon.total_cmp(&b.0.horizon))
}

/// Picks, for every `(J, N)` cell, the record with the smallest final
/// trial-mean KSD.
pub fn select_best(records: &[RunRecord]) -> Vec<Selection> {
    let mut best: Vec<Selection> = Vec::new();
    for (index, rec) in records.iter().enumerate() {
        let point = SweepPoint::of(&rec.config);
        let ksd = rec.final_ksd();
        let cand = Selection {
            point,
            index,
            final_ksd: ksd,
        };
        match best
            .iter_mut()
            .find(|s| (s.point.particles, s.point.steps) == (point.particles, point.steps))
        {
            Some(cur) => {
                if compare((&point, ksd), (&cur.point, cur.final_ksd)) == Ordering::Less {
                    *cur = cand;
                }
            }
            None => best.push(cand),
        }
    }
    best
}

pub fn sweep(base: &RunConfig, grid: &SweepGrid) -> Result<SweepResult> {
    let configs = expand(base, grid)?;
    let records = configs
        .iter()
        .map(run_experiment)
        .collect::<Result<Vec<_>>>()?;
    let best = select_best(&records);
    Ok(SweepResult { records, best })
}
