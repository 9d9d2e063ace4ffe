//! Multi-trial experiments.
//!
//! Trial `i` uses seed `seed + i`. Within a trial, stream 0 of that seed
//! draws the initial ensemble, stream 1 drives KFRD noise, and chain `j`
//! of ULA or RWM uses stream `CHAIN_STREAM_BASE + j`.

use std::time::Duration;

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{chain_streams, rwm_run, RwmConfig, RwmMode, SvgdStepper, UlaStepper};
use crate::diagnostics::{ksd_target, ksd_tempered, mean, moments, KsdConfig};
use crate::error::{Error, Result};
use crate::flows::FlowConfig;
use crate::integrators::{
    run_unit_time, Kfrd, KfrflowAb4, KfrflowEuler, KfrflowImportance, Observer, RngStream,
    Schedule, Stepper,
};
use crate::particles::Ensemble;
use crate::targets::{target_from_name, DynTarget};

use super::config::{RunConfig, SamplerKind};

/// Environment variable holding the number of worker threads for trials.
pub const WORKERS_ENV: &str = "KFRFLOW_WORKERS";

pub const INIT_STREAM: u64 = 0;
pub const NOISE_STREAM: u64 = 1;

pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_add(trial as u64)
}

/// Diagnostics of one trial at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub trial: usize,
    pub step: usize,
    /// Pseudo-time `k / N`.
    pub t: f64,
    /// Physical time `T k / N`.
    pub time: f64,
    /// False from the step at which the trial became unstable onwards.
    pub stable: bool,
    pub ksd_target: Option<f64>,
    pub ksd_tempered: Option<f64>,
    pub mean: Option<Vec<f64>>,
    pub variance: Option<Vec<f64>>,
    pub step_time_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub stable: bool,
    /// First grid index whose state is missing or non-finite.
    pub failed_step: Option<usize>,
    pub error: Option<String>,
    /// Measurement-phase acceptance rate (RWM only).
    pub acceptance: Option<f64>,
}

/// Mean over stable trials at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub step: usize,
    pub t: f64,
    pub time: f64,
    pub stable_trials: usize,
    pub ksd_target: Option<f64>,
    pub ksd_tempered: Option<f64>,
    pub mean: Option<Vec<f64>>,
    pub variance: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub dim: usize,
    /// Ordered by `(trial, step)`; `trials × observation_steps` rows.
    pub observations: Vec<Observation>,
    pub trials: Vec<TrialOutcome>,
    pub summary: Vec<SummaryRow>,
}

impl RunRecord {
    pub fn all_stable(&self) -> bool {
        self.trials.iter().all(|t| t.stable)
    }

    pub fn stable_trials(&self) -> usize {
        self.trials.iter().filter(|t| t.stable).count()
    }

    pub fn final_summary(&self) -> Option<&SummaryRow> {
        self.summary.last()
    }

    /// Trial-mean KSD against the target at the last grid point; NaN when
    /// no trial survived or the target has no scores.
    pub fn final_ksd(&self) -> f64 {
        self.final_summary()
            .and_then(|s| s.ksd_target)
            .unwrap_or(f64::NAN)
    }

    /// Observations of one trial.
    pub fn trial_rows(&self, trial: usize) -> impl Iterator<Item = &Observation> {
        self.observations.iter().filter(move |o| o.trial == trial)
    }
}

/// Grid indices at which diagnostics are recorded: every
/// `observe_every` steps plus both endpoints. RWM only has endpoints.
pub fn observation_steps(cfg: &RunConfig) -> Vec<usize> {
    if cfg.sampler.is_rwm() {
        return vec![0, cfg.steps];
    }
    let mut steps: Vec<usize> = (0..=cfg.steps).step_by(cfg.observe_every).collect();
    if steps.last() != Some(&cfg.steps) {
        steps.push(cfg.steps);
    }
    steps
}

/// Checks that the target offers what the sampler consumes.
pub fn check_capabilities(cfg: &RunConfig, target: &DynTarget) -> Result<()> {
    let needs = cfg.sampler.needs_scores() || (cfg.sampler == SamplerKind::Kfrd && cfg.epsilon > 0.0);
    if needs && !target.has_scores() {
        return Err(Error::config(
            "run.sampler",
            format!("{} requires target scores, but target `{}` has none", cfg.sampler, cfg.target),
        ));
    }
    Ok(())
}

/// The stepper for `cfg.sampler` seeded for one trial. RWM has no stepper.
pub fn build_stepper(cfg: &RunConfig, target: &DynTarget, seed: u64) -> Result<Box<dyn Stepper>> {
    let kernel = cfg.kernel();
    let target = target.clone();
    let lambda = cfg.lambda;
    let stepper: Box<dyn Stepper> = match cfg.sampler {
        SamplerKind::KfrflowEuler => Box::new(KfrflowEuler {
            target,
            kernel,
            lambda,
        }),
        SamplerKind::KfrflowAb4 => Box::new(KfrflowAb4::new(target, kernel, lambda)),
        SamplerKind::KfrflowI => Box::new(KfrflowImportance {
            target,
            kernel,
            lambda,
            newton_iters: 1,
        }),
        SamplerKind::KfrflowINewton(iters) => Box::new(KfrflowImportance {
            target,
            kernel,
            lambda,
            newton_iters: iters,
        }),
        SamplerKind::Kfrd => {
            let config = FlowConfig {
                lambda,
                epsilon: cfg.epsilon,
                newton_iters: 1,
            };
            config.validate()?;
            Box::new(Kfrd {
                target,
                kernel,
                config,
                rng: RngStream::substream(seed, NOISE_STREAM),
            })
        }
        SamplerKind::Svgd => Box::new(SvgdStepper { target, kernel }),
        SamplerKind::Ula => Box::new(UlaStepper {
            target,
            rngs: chain_streams(seed, cfg.particles),
        }),
        SamplerKind::RwmSerial | SamplerKind::RwmParallel => {
            return Err(Error::InvalidParameter(
                "random-walk Metropolis is not a time stepper".into(),
            ))
        }
    };
    Ok(stepper)
}

pub fn schedule(cfg: &RunConfig) -> Result<Schedule> {
    Schedule::with_horizon(cfg.steps, cfg.horizon)
}

pub fn initial_ensemble(cfg: &RunConfig, target: &DynTarget, seed: u64) -> Ensemble {
    target.sample_reference(&mut RngStream::substream(seed, INIT_STREAM), cfg.particles)
}

pub fn rwm_config(cfg: &RunConfig, dim: usize) -> RwmConfig {
    let mode = if cfg.sampler == SamplerKind::RwmSerial {
        RwmMode::Serial
    } else {
        RwmMode::Parallel
    };
    let mut rc = RwmConfig::new(dim, cfg.particles, cfg.steps, mode);
    if let Some(s) = cfg.rwm_std {
        rc.proposal_std = s;
    }
    rc.tune_rounds = cfg.rwm_tune_rounds;
    rc.tune_batch = cfg.rwm_tune_batch;
    rc
}

struct Diagnose<'a> {
    cfg: &'a RunConfig,
    target: &'a DynTarget,
    ksd: KsdConfig,
    schedule: Schedule,
    wanted: Vec<bool>,
    trial: usize,
    rows: Vec<Observation>,
    poisoned: Option<(usize, String)>,
}

impl<'a> Diagnose<'a> {
    fn new(cfg: &'a RunConfig, target: &'a DynTarget, schedule: Schedule, trial: usize) -> Self {
        let mut wanted = vec![false; cfg.steps + 1];
        for k in observation_steps(cfg) {
            wanted[k] = true;
        }
        Self {
            cfg,
            target,
            ksd: cfg.ksd(),
            schedule,
            wanted,
            trial,
            rows: Vec::new(),
            poisoned: None,
        }
    }

    fn record(&mut self, k: usize, ens: &Ensemble, elapsed: Option<Duration>) {
        let scores = self.target.has_scores();
        let ksd = |r: Result<f64>| -> std::result::Result<Option<f64>, String> {
            match r {
                Ok(v) => Ok(Some(v)),
                Err(e) => Err(e.to_string()),
            }
        };
        let mut problem = None;
        let ksd_target = if scores {
            ksd(ksd_target(ens, &**self.target, &self.ksd)).unwrap_or_else(|e| {
                problem = Some(e);
                Some(f64::NAN)
            })
        } else {
            None
        };
        let ksd_tempered = if scores && self.cfg.sampler.is_unit_time() {
            ksd(ksd_tempered(ens, &**self.target, self.schedule.progress(k), &self.ksd))
                .unwrap_or_else(|e| {
                    problem.get_or_insert(e);
                    Some(f64::NAN)
                })
        } else {
            None
        };
        let m = mean(ens);
        let variance = if ens.len() >= 2 {
            moments(ens).ok().map(|mo| mo.variances())
        } else {
            None
        };
        let finite = m.iter().all(|v| v.is_finite())
            && variance.iter().flatten().all(|v| v.is_finite())
            && ksd_target.is_none_or(f64::is_finite)
            && ksd_tempered.is_none_or(f64::is_finite);
        if self.poisoned.is_none() && (!finite || problem.is_some()) {
            self.poisoned = Some((k, problem.unwrap_or_else(|| "non-finite diagnostic".into())));
        }
        self.rows.push(Observation {
            trial: self.trial,
            step: k,
            t: self.schedule.progress(k),
            time: self.schedule.time(k),
            stable: self.poisoned.is_none(),
            ksd_target,
            ksd_tempered,
            mean: Some(m),
            variance,
            step_time_ns: if self.cfg.timings {
                elapsed.map(|d| d.as_nanos() as u64)
            } else {
                None
            },
        });
    }

    /// Pads the record with empty rows for grid points never reached.
    fn finish(mut self, reached: usize) -> (Vec<Observation>, Option<(usize, String)>) {
        for k in observation_steps(self.cfg) {
            if k > reached {
                self.rows.push(Observation {
                    trial: self.trial,
                    step: k,
                    t: self.schedule.progress(k),
                    time: self.schedule.time(k),
                    stable: false,
                    ksd_target: None,
                    ksd_tempered: None,
                    mean: None,
                    variance: None,
                    step_time_ns: None,
                });
            }
        }
        (self.rows, self.poisoned)
    }
}

impl Observer for Diagnose<'_> {
    fn observe(&mut self, k: usize, ensemble: &Ensemble, elapsed: Option<Duration>) {
        if self.wanted[k] && self.poisoned.is_none() {
            self.record(k, ensemble, elapsed);
        } else if self.wanted[k] {
            let schedule = self.schedule;
            self.rows.push(Observation {
                trial: self.trial,
                step: k,
                t: schedule.progress(k),
                time: schedule.time(k),
                stable: false,
                ksd_target: None,
                ksd_tempered: None,
                mean: None,
                variance: None,
                step_time_ns: None,
            });
        }
    }
}

/// Runs one trial and returns its rows and outcome.
pub fn run_trial(
    cfg: &RunConfig,
    target: &DynTarget,
    trial: usize,
) -> Result<(Vec<Observation>, TrialOutcome)> {
    let seed = trial_seed(cfg.seed, trial);
    let schedule = schedule(cfg)?;
    let initial = initial_ensemble(cfg, target, seed);
    let mut diag = Diagnose::new(cfg, target, schedule, trial);
    let mut outcome = TrialOutcome {
        trial,
        seed,
        stable: true,
        failed_step: None,
        error: None,
        acceptance: None,
    };

    let reached = if cfg.sampler.is_rwm() {
        diag.observe(0, &initial, None);
        let start = std::time::Instant::now();
        match rwm_run(&**target, &rwm_config(cfg, target.dim()), seed) {
            Ok(out) => {
                outcome.acceptance = Some(out.acceptance());
                let samples = out.samples.with_time(1.0);
                diag.observe(cfg.steps, &samples, Some(start.elapsed()));
                cfg.steps
            }
            Err(e) => {
                outcome.failed_step = Some(cfg.steps);
                outcome.error = Some(e.to_string());
                0
            }
        }
    } else {
        let mut stepper = build_stepper(cfg, target, seed)?;
        let traj = run_unit_time(initial, stepper.as_mut(), &schedule, &mut [&mut diag]);
        if let Some(e) = traj.failure {
            outcome.failed_step = Some(traj.steps_completed + 1);
            outcome.error = Some(e.to_string());
        }
        traj.steps_completed
    };

    let (rows, poisoned) = diag.finish(reached);
    if let Some((k, msg)) = poisoned {
        if outcome.failed_step.is_none_or(|f| k < f) {
            outcome.failed_step = Some(k);
            outcome.error = Some(msg);
        }
    }
    outcome.stable = outcome.failed_step.is_none();
    Ok((rows, outcome))
}

fn average(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut n = 0usize;
    let mut s = 0.0;
    for v in values {
        s += v?;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn average_vec<'a>(values: impl Iterator<Item = Option<&'a Vec<f64>>>, dim: usize) -> Option<Vec<f64>> {
    let mut n = 0usize;
    let mut s = vec![0.0; dim];
    for v in values {
        for (a, b) in s.iter_mut().zip(v?) {
            *a += b;
        }
        n += 1;
    }
    (n > 0).then(|| s.into_iter().map(|a| a / n as f64).collect())
}

/// Per-grid-point averages over the stable trials only.
pub fn summarize(observations: &[Observation], trials: &[TrialOutcome], dim: usize) -> Vec<SummaryRow> {
    let stable: Vec<bool> = trials.iter().map(|t| t.stable).collect();
    let Some(first) = trials.first() else {
        return Vec::new();
    };
    let template: Vec<&Observation> = observations.iter().filter(|o| o.trial == first.trial).collect();
    template
        .iter()
        .enumerate()
        .map(|(idx, proto)| {
            let per_trial: Vec<&Observation> = observations
                .iter()
                .filter(|o| o.step == proto.step && stable.get(o.trial).copied().unwrap_or(false))
                .collect();
            debug_assert!(per_trial.len() <= trials.len(), "row {idx}");
            SummaryRow {
                step: proto.step,
                t: proto.t,
                time: proto.time,
                stable_trials: per_trial.len(),
                ksd_target: average(per_trial.iter().map(|o| o.ksd_target)),
                ksd_tempered: average(per_trial.iter().map(|o| o.ksd_tempered)),
                mean: average_vec(per_trial.iter().map(|o| o.mean.as_ref()), dim),
                variance: average_vec(per_trial.iter().map(|o| o.variance.as_ref()), dim),
            }
        })
        .collect()
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let workers = match std::env::var(WORKERS_ENV) {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            Error::config(WORKERS_ENV, format!("expected a worker count, got `{v}`"))
        })?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))
}

/// Runs `cfg.trials` independent trials, in parallel up to the worker
/// count from [`WORKERS_ENV`], and assembles them in trial order.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunRecord> {
    let target = target_from_name(&cfg.target)?;
    check_capabilities(cfg, &target)?;
    let pool = worker_pool()?;
    let results = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|trial| run_trial(cfg, &target, trial))
            .collect::<Vec<_>>()
    });
    let mut observations = Vec::new();
    let mut trials = Vec::with_capacity(cfg.trials);
    for r in results {
        let (rows, outcome) = r?;
        if let Some(e) = &outcome.error {
            log::warn!("trial {} unstable: {e}", outcome.trial);
        }
        observations.extend(rows);
        trials.push(outcome);
    }
    let dim = target.dim();
    let summary = summarize(&observations, &trials, dim);
    Ok(RunRecord {
        config: cfg.clone(),
        dim,
        observations,
        trials,
        summary,
    })
}
