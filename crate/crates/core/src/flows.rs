//! Update rules of the kernel Fisher–Rao samplers.
//!
//! * [`kfrflow_velocity`]: the gradient-free interacting-particle ODE
//!   right-hand side, `ẋ_j = ∇K_t(x_j)ᵀ M_t⁻¹ (1/J) Σ_k c_k K_t(x_k)` with
//!   `c_k` the centered log density ratio.
//! * [`kfrflow_i_step`]: the importance-weighted discrete-time map, one
//!   Newton step on the sample-equivalence equations `G(s) = b`.
//! * [`sample_ot_newton`]: the same map with several Newton iterations.
//! * [`kfrd_drift`]: drift and diffusion of the stochastic variant.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{imq, imq_grad1_into, KernelSpec};
use crate::particles::{
    log_ratios, solve_regularized, uniform_weights, weights_from_log_ratios, Ensemble,
    FlowWorkspace,
};
use crate::targets::TargetModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub newton_iters: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            epsilon: 0.0,
            newton_iters: 1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be nonnegative, got {}",
                self.epsilon
            )));
        }
        if self.newton_iters == 0 {
            return Err(Error::InvalidParameter("newton_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// One velocity vector per particle, J×d row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    values: Vec<f64>,
    len: usize,
    dim: usize,
}

impl Velocity {
    pub fn from_rows(values: Vec<f64>, len: usize, dim: usize) -> Result<Self> {
        if values.len() != len * dim {
            return Err(Error::DimensionMismatch {
                expected: len * dim,
                found: values.len(),
            });
        }
        Ok(Self { values, len, dim })
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        Self {
            values: vec![0.0; len * dim],
            len,
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Velocity) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// `(rhs, f)` with `rhs = (1/J) Σ_k c_k K_t(X⁽ᵏ⁾)` and `(M + λI) f = rhs`.
pub fn kfrflow_coefficients(
    workspace: &FlowWorkspace,
    ratios: &[f64],
    lambda: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = workspace.len();
    let mean = ratios.iter().sum::<f64>() / n as f64;
    let centered = DVector::from_iterator(n, ratios.iter().map(|r| r - mean));
    let mut rhs = &workspace.kmat * centered;
    rhs /= n as f64;
    let f = solve_or_zero(workspace, lambda, &rhs)?;
    Ok((rhs, f))
}

fn solve_or_zero(
    workspace: &FlowWorkspace,
    lambda: f64,
    rhs: &DVector<f64>,
) -> Result<DVector<f64>> {
    if rhs.iter().all(|&v| v == 0.0) {
        return Ok(DVector::zeros(rhs.len()));
    }
    solve_regularized(&workspace.m, lambda, rhs)
}

pub fn kfrflow_velocity(
    ensemble: &Ensemble,
    target: &dyn TargetModel,
    spec: &KernelSpec,
    lambda: f64,
) -> Result<Velocity> {
    let workspace = FlowWorkspace::new(ensemble, spec);
    let ratios = log_ratios(ensemble, target)?;
    velocity_from_workspace(&workspace, &ratios, lambda)
}

pub(crate) fn velocity_from_workspace(
    workspace: &FlowWorkspace,
    ratios: &[f64],
    lambda: f64,
) -> Result<Velocity> {
    let (_, f) = kfrflow_coefficients(workspace, ratios, lambda)?;
    let values = workspace.map_displacement(&f);
    let dim = values.len() / workspace.len();
    let v = Velocity::from_rows(values, workspace.len(), dim)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what: "velocity" })
    }
}

fn check_time(ensemble: &Ensemble, dt: f64) -> Result<()> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "time step must be nonnegative, got {dt}"
        )));
    }
    if ensemble.t() + dt > 1.0 + 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "step from t = {} by {dt} overshoots unit time",
            ensemble.t()
        )));
    }
    Ok(())
}

fn importance_rhs(
    workspace: &FlowWorkspace,
    ratios: &[f64],
    dt: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = workspace.len();
    let weights = weights_from_log_ratios(ratios, dt)?;
    let top = weights.max();
    if top > 0.5 {
        log::warn!("importance weights degenerate: max weight {top:.3} with J = {n}");
    }
    let deficit = uniform_weights(n) - &weights;
    Ok((&workspace.kmat * deficit, weights))
}

/// One KFRFlow-I transport step from `t` to `t + Δt`.
pub fn kfrflow_i_step(
    ensemble: &Ensemble,
    target: &dyn TargetModel,
    spec: &KernelSpec,
    dt: f64,
    lambda: f64,
) -> Result<Ensemble> {
    check_time(ensemble, dt)?;
    let workspace = FlowWorkspace::new(ensemble, spec);
    let ratios = log_ratios(ensemble, target)?;
    let (rhs, _) = importance_rhs(&workspace, &ratios, dt)?;
    let s = -solve_or_zero(&workspace, lambda, &rhs)?;
    ensemble.displaced(&workspace.map_displacement(&s), ensemble.t() + dt)
}

/// Result of [`sample_ot_newton`].
#[derive(Debug, Clone)]
pub struct NewtonStep {
    pub ensemble: Ensemble,
    /// `‖G(s_k) - b‖` for `k = 0, 1, ..., iterations performed`, where
    /// `s_k` is the k-th Newton iterate.
    pub residuals: Vec<f64>,
    pub diverged: bool,
}

/// `Y_j = X⁽ʲ⁾ + ∇K_t(X⁽ʲ⁾)ᵀ s`.
fn displaced_point(ensemble: &Ensemble, displacement: &[f64], j: usize, out: &mut [f64]) {
    let d = ensemble.dim();
    for ((o, x), dx) in out
        .iter_mut()
        .zip(ensemble.particle(j))
        .zip(&displacement[j * d..(j + 1) * d])
    {
        *o = x + dx;
    }
}

/// `G(s) - b`, with `G(s) = (1/J) Σ_j K_t(X⁽ʲ⁾ + ∇K_t(X⁽ʲ⁾)ᵀ s)`; basis
/// centers stay at the step's original positions.
fn newton_residual(
    ensemble: &Ensemble,
    workspace: &FlowWorkspace,
    displacement: &[f64],
    b: &DVector<f64>,
) -> DVector<f64> {
    let (n, d) = (ensemble.len(), ensemble.dim());
    let mut g = DVector::zeros(n);
    let mut y = vec![0.0; d];
    for j in 0..n {
        displaced_point(ensemble, displacement, j, &mut y);
        let y = &y[..];
        for l in 0..n {
            g[l] += imq(y, ensemble.particle(l), workspace.h);
        }
    }
    g /= n as f64;
    g - b
}

fn newton_jacobian(
    ensemble: &Ensemble,
    workspace: &FlowWorkspace,
    displacement: &[f64],
) -> nalgebra::DMatrix<f64> {
    let (n, d) = (ensemble.len(), ensemble.dim());
    let mut at_displaced = nalgebra::DMatrix::zeros(n, n * d);
    let mut g = vec![0.0; d];
    let mut y = vec![0.0; d];
    for j in 0..n {
        displaced_point(ensemble, displacement, j, &mut y);
        for l in 0..n {
            imq_grad1_into(&y, ensemble.particle(l), workspace.h, &mut g);
            for k in 0..d {
                at_displaced[(l, j * d + k)] = g[k];
            }
        }
    }
    let mut jac = at_displaced * workspace.grads.transpose();
    jac /= n as f64;
    jac
}

/// Transport step solving `G(s) = b` with `iters` Newton iterations from
/// `s = 0`. With `iters = 1` this is exactly [`kfrflow_i_step`].
pub fn sample_ot_newton(
    ensemble: &Ensemble,
    target: &dyn TargetModel,
    spec: &KernelSpec,
    dt: f64,
    lambda: f64,
    iters: usize,
) -> Result<NewtonStep> {
    if iters == 0 {
        return Err(Error::InvalidParameter("newton iterations must be at least 1".into()));
    }
    check_time(ensemble, dt)?;
    let n = ensemble.len();
    let workspace = FlowWorkspace::new(ensemble, spec);
    let ratios = log_ratios(ensemble, target)?;
    let (rhs0, weights) = importance_rhs(&workspace, &ratios, dt)?;
    // G(s) - b is evaluated as (G(s) - G(0)) + (G(0) - b) so that the
    // zero iterate reproduces the closed-form right-hand side exactly
    let g0 = newton_residual(ensemble, &workspace, &vec![0.0; n * ensemble.dim()], &DVector::zeros(n));
    let _ = weights;

    let mut residuals = vec![rhs0.norm()];
    let mut s = -solve_or_zero(&workspace, lambda, &rhs0)?;
    let mut displacement = workspace.map_displacement(&s);
    let mut best = (residuals[0], DVector::zeros(n), vec![0.0; displacement.len()]);
    let mut growth_streak = 0;
    let mut diverged = false;

    for iter in 1..=iters {
        let residual = newton_residual(ensemble, &workspace, &displacement, &g0) + &rhs0;
        let norm = residual.norm();
        if norm < best.0 {
            best = (norm, s.clone(), displacement.clone());
        }
        growth_streak = if norm > residuals[iter - 1] {
            growth_streak + 1
        } else {
            0
        };
        residuals.push(norm);
        if growth_streak >= 2 {
            log::warn!("Newton residual grew twice in a row; keeping best iterate");
            diverged = true;
            displacement = best.2.clone();
            break;
        }
        if iter == iters || norm == 0.0 {
            break;
        }
        let mut jac = newton_jacobian(ensemble, &workspace, &displacement);
        for i in 0..n {
            jac[(i, i)] += lambda;
        }
        let delta = jac
            .lu()
            .solve(&residual)
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .ok_or(Error::SingularSystem { size: n })?;
        s -= delta;
        displacement = workspace.map_displacement(&s);
    }

    let ensemble = ensemble.displaced(&displacement, ensemble.t() + dt)?;
    Ok(NewtonStep {
        ensemble,
        residuals,
        diverged,
    })
}

/// `∇ log π_t = (1 - t) ∇ log π₀ + t ∇ log π₁`.
pub fn tempered_score(target: &dyn TargetModel, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let s0 = target
        .score_reference(x)
        .ok_or(Error::MissingScores("the tempered score"))?;
    let s1 = target
        .score_target(x)
        .ok_or(Error::MissingScores("the tempered score"))?;
    Ok(s0
        .iter()
        .zip(&s1)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect())
}

/// Drift `v_t + ε ∇ log π_t` and diffusion coefficient `√(2ε)` of KFRD.
pub fn kfrd_drift(
    ensemble: &Ensemble,
    target: &dyn TargetModel,
    spec: &KernelSpec,
    cfg: &FlowConfig,
    t: f64,
) -> Result<(Velocity, f64)> {
    cfg.validate()?;
    if cfg.epsilon > 0.0 && !target.has_scores() {
        return Err(Error::MissingScores("KFRD"));
    }
    let mut drift = kfrflow_velocity(ensemble, target, spec, cfg.lambda)?;
    if cfg.epsilon == 0.0 {
        return Ok((drift, 0.0));
    }
    let d = ensemble.dim();
    for (j, x) in ensemble.rows().enumerate() {
        let score = tempered_score(target, x, t).map_err(|_| Error::MissingScores("KFRD"))?;
        for (v, s) in drift.values[j * d..(j + 1) * d].iter_mut().zip(&score) {
            *v += cfg.epsilon * s;
        }
    }
    if !drift.is_finite() {
        return Err(Error::NonFinite { what: "KFRD drift" });
    }
    Ok((drift, (2.0 * cfg.epsilon).sqrt()))
}
