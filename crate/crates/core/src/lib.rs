//! Kernel Fisher–Rao flow samplers.
//!
//! Particles drawn from a standard Gaussian reference `π₀` are moved in
//! unit time along the geometric mixture `π_t ∝ π₀^{1-t} π₁^t` towards a
//! target `π₁` known only through the unnormalized ratio `π₁/π₀`:
//!
//! * [`flows::kfrflow_velocity`] gives the deterministic particle velocity;
//! * [`flows::kfrflow_i_step`] is the importance-weighted discrete step,
//!   refined by Newton iterations in [`flows::sample_ot_newton`];
//! * [`flows::kfrd_drift`] adds Langevin noise when scores are available.
//!
//! SVGD, ULA and random-walk Metropolis are in [`baselines`], kernel Stein
//! discrepancy in [`diagnostics`], and the experiment harness behind the
//! `kfrflow` binary in [`harness`].

pub mod baselines;
pub mod diagnostics;
pub mod error;
pub mod flows;
pub mod harness;
pub mod integrators;
pub mod kernels;
pub mod particles;
pub mod targets;

pub use error::{Error, Result};
pub use flows::{kfrd_drift, kfrflow_i_step, kfrflow_velocity, sample_ot_newton, FlowConfig, Velocity};
pub use integrators::{run_unit_time, RngStream, Schedule, Stepper};
pub use kernels::{BandwidthPolicy, KernelSpec};
pub use particles::{Ensemble, FlowWorkspace};
pub use targets::{target_from_name, DynTarget, TargetModel};
