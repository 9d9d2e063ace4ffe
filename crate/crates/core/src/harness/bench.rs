//! Median single-step wall time.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::baselines::rwm_run;
use crate::targets::target_from_name;

use super::config::{BenchConfig, RunConfig};
use super::experiment::{build_stepper, check_capabilities, initial_ensemble, rwm_config, schedule};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub median_ns: u64,
    pub samples_ns: Vec<u64>,
}

fn median(sorted: &[u64]) -> u64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2
    }
}

/// Times the first step of `cfg.sampler` from a fresh reference ensemble,
/// `bench.repeats` times after `bench.warmup` untimed executions. For RWM
/// one step is one proposal per chain.
pub fn bench_step(cfg: &RunConfig, bench: &BenchConfig) -> Result<BenchResult> {
    if bench.repeats == 0 {
        return Err(Error::config("bench.repeats", "must be at least 1"));
    }
    let target = target_from_name(&cfg.target)?;
    check_capabilities(cfg, &target)?;
    let sched = schedule(cfg)?;
    let initial = initial_ensemble(cfg, &target, cfg.seed);
    let mut once: Box<dyn FnMut() -> Result<()>> = if cfg.sampler.is_rwm() {
        let mut rc = rwm_config(cfg, target.dim());
        rc.tune_rounds = 0;
        rc.steps = 1;
        rc.mode = crate::baselines::RwmMode::Parallel;
        let seed = cfg.seed;
        let target = target.clone();
        Box::new(move || rwm_run(&*target, &rc, seed).map(|_| ()))
    } else {
        let mut stepper = build_stepper(cfg, &target, cfg.seed)?;
        Box::new(move || stepper.step(&initial, 0, &sched).map(|_| ()))
    };
    for _ in 0..bench.warmup {
        once()?;
    }
    let mut samples = Vec::with_capacity(bench.repeats);
    for _ in 0..bench.repeats {
        let start = Instant::now();
        once()?;
        samples.push(start.elapsed().as_nanos() as u64);
    }
    let mut sorted = samples.clone();
    sorted.sort_unstable();
    Ok(BenchResult {
        median_ns: median(&sorted),
        samples_ns: samples,
    })
}
