//! Fixed-step time integration: forward Euler and fourth-order
//! Adams–Bashforth for the deterministic flows, Euler–Maruyama for KFRD,
//! and a driver that runs any [`Stepper`] over a uniform [`Schedule`].

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::flows::{
    kfrd_drift, kfrflow_i_step, kfrflow_velocity, sample_ot_newton, FlowConfig, Velocity,
};
use crate::kernels::KernelSpec;
use crate::particles::Ensemble;
use crate::targets::DynTarget;

/// `N` uniform steps over `[0, T]`. Unit-time samplers use `T = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    n_steps: usize,
    horizon: f64,
}

impl Schedule {
    pub fn unit(n_steps: usize) -> Result<Self> {
        Self::with_horizon(n_steps, 1.0)
    }

    pub fn with_horizon(n_steps: usize, horizon: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidParameter("number of steps must be positive".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "stopping time must be positive, got {horizon}"
            )));
        }
        Ok(Self { n_steps, horizon })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Fraction `k / N` of the run completed after `k` steps; this is the
    /// pseudo-time carried by the ensemble.
    pub fn progress(&self, k: usize) -> f64 {
        k as f64 / self.n_steps as f64
    }

    /// Physical time `T k / N`.
    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.n_steps as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }
}

/// Seeded ChaCha8 generator. Streams with the same seed and different
/// stream ids are independent.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Independent stream derived from this one's seed.
    pub fn split(&self, stream: u64) -> Self {
        Self::substream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")))
    }
}

fn check_velocity(ensemble: &Ensemble, v: &Velocity) -> Result<()> {
    if v.len() != ensemble.len() || v.dim() != ensemble.dim() {
        return Err(Error::DimensionMismatch {
            expected: ensemble.len() * ensemble.dim(),
            found: v.len() * v.dim(),
        });
    }
    if !v.is_finite() {
        return Err(Error::NonFinite { what: "velocity" });
    }
    Ok(())
}

fn advance(ensemble: &Ensemble, v: &Velocity, dt: f64, t_next: f64) -> Result<Ensemble> {
    let inc: Vec<f64> = v.as_slice().iter().map(|vi| dt * vi).collect();
    ensemble.displaced(&inc, t_next)
}

/// `X ← X + Δt v(X)`; the result carries pseudo-time `t_next`.
pub fn euler_step<F>(ensemble: &Ensemble, velocity: F, dt: f64, t_next: f64) -> Result<Ensemble>
where
    F: FnOnce(&Ensemble) -> Result<Velocity>,
{
    check_dt(dt)?;
    let v = velocity(ensemble)?;
    check_velocity(ensemble, &v)?;
    advance(ensemble, &v, dt, t_next)
}

/// Velocities at `t, t - Δt, t - 2Δt, t - 3Δt`, newest first.
#[derive(Debug, Clone, Default)]
pub struct Ab4History {
    velocities: VecDeque<Velocity>,
}

impl Ab4History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, v: Velocity) {
        self.velocities.push_front(v);
        self.velocities.truncate(4);
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.velocities.len() == 4
    }

    pub fn newest(&self) -> Option<&Velocity> {
        self.velocities.front()
    }
}

/// `X ← X + (Δt/24)(55 v₀ - 59 v₁ + 37 v₂ - 9 v₃)`, evaluated in backward
/// difference form `v₀ + ½∇v + (5/12)∇²v + (3/8)∇³v` so that a constant
/// history reproduces Euler exactly.
pub fn ab4_step(
    history: &Ab4History,
    ensemble: &Ensemble,
    dt: f64,
    t_next: f64,
) -> Result<Ensemble> {
    check_dt(dt)?;
    if !history.is_full() {
        return Err(Error::InvalidParameter(format!(
            "Adams-Bashforth needs 4 past velocities, have {}",
            history.len()
        )));
    }
    let h = &history.velocities;
    for v in h {
        check_velocity(ensemble, v)?;
    }
    let (v0, v1, v2, v3) = (h[0].as_slice(), h[1].as_slice(), h[2].as_slice(), h[3].as_slice());
    let inc: Vec<f64> = (0..v0.len())
        .map(|i| {
            let (d1a, d1b, d1c) = (v0[i] - v1[i], v1[i] - v2[i], v2[i] - v3[i]);
            let (d2a, d2b) = (d1a - d1b, d1b - d1c);
            let d3 = d2a - d2b;
            dt * (v0[i] + (0.5 * d1a + (5.0 / 12.0) * d2a + 0.375 * d3))
        })
        .collect();
    ensemble.displaced(&inc, t_next)
}

/// `X ← X + Δt·drift(X) + σ √Δt ξ` with `ξ ~ N(0, I)` drawn row by row.
pub fn euler_maruyama_step<F>(
    ensemble: &Ensemble,
    drift: F,
    dt: f64,
    t_next: f64,
    rng: &mut RngStream,
) -> Result<Ensemble>
where
    F: FnOnce(&Ensemble) -> Result<(Velocity, f64)>,
{
    check_dt(dt)?;
    let (v, sigma) = drift(ensemble)?;
    check_velocity(ensemble, &v)?;
    if sigma == 0.0 {
        return advance(ensemble, &v, dt, t_next);
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::NonFinite {
            what: "diffusion coefficient",
        });
    }
    let scale = sigma * dt.sqrt();
    let inc: Vec<f64> = v
        .as_slice()
        .iter()
        .map(|vi| dt * vi + scale * rng.standard_normal())
        .collect();
    ensemble.displaced(&inc, t_next)
}

/// One step of a sampler on a fixed schedule.
pub trait Stepper {
    /// Advances `ensemble` (at step `k`) to step `k + 1`.
    fn step(&mut self, ensemble: &Ensemble, k: usize, schedule: &Schedule) -> Result<Ensemble>;
}

/// Callback invoked at every grid time, including `t = 0` and the end.
pub trait Observer {
    /// `elapsed` is the wall time of the step that produced `ensemble`.
    fn observe(&mut self, k: usize, ensemble: &Ensemble, elapsed: Option<Duration>);
}

impl<F: FnMut(usize, &Ensemble, Option<Duration>)> Observer for F {
    fn observe(&mut self, k: usize, ensemble: &Ensemble, elapsed: Option<Duration>) {
        self(k, ensemble, elapsed)
    }
}

/// Stores every observed ensemble.
#[derive(Debug, Default)]
pub struct Snapshots {
    pub ensembles: Vec<Ensemble>,
}

impl Observer for Snapshots {
    fn observe(&mut self, _k: usize, ensemble: &Ensemble, _elapsed: Option<Duration>) {
        self.ensembles.push(ensemble.clone());
    }
}

/// Outcome of [`run_unit_time`]; on failure `last` is the last good state.
#[derive(Debug)]
pub struct Trajectory {
    pub last: Ensemble,
    pub steps_completed: usize,
    pub failure: Option<Error>,
}

impl Trajectory {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    pub fn into_result(self) -> Result<Ensemble> {
        match self.failure {
            None => Ok(self.last),
            Some(e) => Err(e),
        }
    }
}

/// Runs `schedule.n_steps()` steps from `initial` (which must sit at
/// `t = 0`). The ensemble time after step `k` is exactly `k / N`.
pub fn run_unit_time(
    initial: Ensemble,
    stepper: &mut dyn Stepper,
    schedule: &Schedule,
    observers: &mut [&mut dyn Observer],
) -> Trajectory {
    let mut current = initial.with_time(0.0);
    for obs in observers.iter_mut() {
        obs.observe(0, &current, None);
    }
    for k in 0..schedule.n_steps() {
        let start = Instant::now();
        let next = stepper.step(&current, k, schedule);
        let elapsed = start.elapsed();
        match next {
            Ok(next) => {
                current = next.with_time(schedule.progress(k + 1));
                for obs in observers.iter_mut() {
                    obs.observe(k + 1, &current, Some(elapsed));
                }
            }
            Err(e) => {
                return Trajectory {
                    last: current,
                    steps_completed: k,
                    failure: Some(e.at_step(k)),
                };
            }
        }
    }
    Trajectory {
        last: current,
        steps_completed: schedule.n_steps(),
        failure: None,
    }
}

/// Forward-Euler KFRFlow.
pub struct KfrflowEuler {
    pub target: DynTarget,
    pub kernel: KernelSpec,
    pub lambda: f64,
}

impl Stepper for KfrflowEuler {
    fn step(&mut self, ensemble: &Ensemble, k: usize, schedule: &Schedule) -> Result<Ensemble> {
        euler_step(
            ensemble,
            |e| kfrflow_velocity(e, &*self.target, &self.kernel, self.lambda),
            schedule.dt(),
            schedule.progress(k + 1),
        )
    }
}

/// Adams–Bashforth KFRFlow; the first three steps are forward Euler.
pub struct KfrflowAb4 {
    pub target: DynTarget,
    pub kernel: KernelSpec,
    pub lambda: f64,
    history: Ab4History,
}

impl KfrflowAb4 {
    pub fn new(target: DynTarget, kernel: KernelSpec, lambda: f64) -> Self {
        Self {
            target,
            kernel,
            lambda,
            history: Ab4History::new(),
        }
    }
}

impl Stepper for KfrflowAb4 {
    fn step(&mut self, ensemble: &Ensemble, k: usize, schedule: &Schedule) -> Result<Ensemble> {
        if k == 0 {
            self.history = Ab4History::new();
        }
        let v = kfrflow_velocity(ensemble, &*self.target, &self.kernel, self.lambda)?;
        self.history.push(v);
        let (dt, t_next) = (schedule.dt(), schedule.progress(k + 1));
        if self.history.is_full() {
            ab4_step(&self.history, ensemble, dt, t_next)
        } else {
            let v = self.history.newest().expect("just pushed").clone();
            euler_step(ensemble, |_| Ok(v), dt, t_next)
        }
    }
}

/// KFRFlow-I with `newton_iters` Newton iterations per step.
pub struct KfrflowImportance {
    pub target: DynTarget,
    pub kernel: KernelSpec,
    pub lambda: f64,
    pub newton_iters: usize,
}

impl Stepper for KfrflowImportance {
    fn step(&mut self, ensemble: &Ensemble, _k: usize, schedule: &Schedule) -> Result<Ensemble> {
        let dt = schedule.dt();
        if self.newton_iters <= 1 {
            kfrflow_i_step(ensemble, &*self.target, &self.kernel, dt, self.lambda)
        } else {
            sample_ot_newton(
                ensemble,
                &*self.target,
                &self.kernel,
                dt,
                self.lambda,
                self.newton_iters,
            )
            .map(|s| s.ensemble)
        }
    }
}

/// Euler–Maruyama KFRD.
pub struct Kfrd {
    pub target: DynTarget,
    pub kernel: KernelSpec,
    pub config: FlowConfig,
    pub rng: RngStream,
}

impl Stepper for Kfrd {
    fn step(&mut self, ensemble: &Ensemble, k: usize, schedule: &Schedule) -> Result<Ensemble> {
        let t = schedule.progress(k);
        let (target, kernel, config) = (&*self.target, &self.kernel, &self.config);
        euler_maruyama_step(
            ensemble,
            |e| kfrd_drift(e, target, kernel, config, t),
            schedule.dt(),
            schedule.progress(k + 1),
            &mut self.rng,
        )
    }
}
