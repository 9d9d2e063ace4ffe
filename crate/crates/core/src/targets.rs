//! Benchmark targets. Every target shares the standard Gaussian
//! reference `π₀ = N(0, I_d)` and is described to the samplers through the
//! unnormalized log density ratio `log(π₁/π₀)`, plus scores where known.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::particles::Ensemble;

pub trait TargetModel: Send + Sync {
    fn dim(&self) -> usize;

    fn name(&self) -> String;

    /// Unnormalized `log(π₁(x) / π₀(x))`.
    fn log_ratio(&self, x: &[f64]) -> f64;

    /// `∇ log π₀`. The bundled reference is standard Gaussian.
    fn score_reference(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(x.iter().map(|v| -v).collect())
    }

    /// `∇ log π₁`, when available.
    fn score_target(&self, x: &[f64]) -> Option<Vec<f64>>;

    fn has_scores(&self) -> bool {
        let origin = vec![0.0; self.dim()];
        self.score_reference(&origin).is_some() && self.score_target(&origin).is_some()
    }

    /// Unnormalized `log π₁(x) = log_ratio(x) + log π₀(x)`, up to a constant.
    fn log_target(&self, x: &[f64]) -> f64 {
        self.log_ratio(x) - 0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }

    /// `count` i.i.d. draws from `N(0, I_d)` at pseudo-time `t = 0`.
    fn sample_reference(&self, rng: &mut dyn rand::RngCore, count: usize) -> Ensemble {
        let d = self.dim();
        let data: Vec<f64> = (0..count * d).map(|_| rng.sample(StandardNormal)).collect();
        Ensemble::from_rows(data, count, d).expect("reference draws are finite")
    }
}

impl<T: TargetModel + ?Sized> TargetModel for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn name(&self) -> String {
        (**self).name()
    }
    fn log_ratio(&self, x: &[f64]) -> f64 {
        (**self).log_ratio(x)
    }
    fn score_reference(&self, x: &[f64]) -> Option<Vec<f64>> {
        (**self).score_reference(x)
    }
    fn score_target(&self, x: &[f64]) -> Option<Vec<f64>> {
        (**self).score_target(x)
    }
    fn has_scores(&self) -> bool {
        (**self).has_scores()
    }
    fn log_target(&self, x: &[f64]) -> f64 {
        (**self).log_target(x)
    }
}

/// Forward map of the two-dimensional Bayesian examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bayesian2dKind {
    Donut,
    Butterfly,
    Spaceships,
}

impl fmt::Display for Bayesian2dKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bayesian2dKind::Donut => "donut",
            Bayesian2dKind::Butterfly => "butterfly",
            Bayesian2dKind::Spaceships => "spaceships",
        })
    }
}

/// Posterior `π₁ ∝ π₀ · exp(-(y* - G(x))² / σ²)` on `R²`.
///
/// The exponent carries no factor of one half.
#[derive(Debug, Clone, Copy)]
pub struct Bayesian2d {
    pub kind: Bayesian2dKind,
    pub observation: f64,
    pub noise_var: f64,
}

impl Bayesian2d {
    pub fn forward(&self, x: &[f64]) -> f64 {
        match self.kind {
            Bayesian2dKind::Donut => (x[0] * x[0] + x[1] * x[1]).sqrt(),
            Bayesian2dKind::Butterfly => x[1].sin() + x[0].cos(),
            Bayesian2dKind::Spaceships => {
                let u = x[0] * x[1];
                u.sin() + u.cos()
            }
        }
    }

    pub fn forward_grad(&self, x: &[f64]) -> [f64; 2] {
        match self.kind {
            Bayesian2dKind::Donut => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                if r == 0.0 {
                    [0.0, 0.0]
                } else {
                    [x[0] / r, x[1] / r]
                }
            }
            Bayesian2dKind::Butterfly => [-x[0].sin(), x[1].cos()],
            Bayesian2dKind::Spaceships => {
                let u = x[0] * x[1];
                let dg = u.cos() - u.sin();
                [dg * x[1], dg * x[0]]
            }
        }
    }
}

pub fn make_bayesian_2d(kind: Bayesian2dKind) -> Bayesian2d {
    let (observation, sigma) = match kind {
        Bayesian2dKind::Donut => (2.0, 0.25),
        Bayesian2dKind::Butterfly => (-1.0, 0.6),
        Bayesian2dKind::Spaceships => (-1.0, 0.5),
    };
    Bayesian2d {
        kind,
        observation,
        noise_var: sigma * sigma,
    }
}

impl TargetModel for Bayesian2d {
    fn dim(&self) -> usize {
        2
    }

    fn name(&self) -> String {
        self.kind.to_string()
    }

    fn log_ratio(&self, x: &[f64]) -> f64 {
        let misfit = self.observation - self.forward(x);
        -misfit * misfit / self.noise_var
    }

    fn score_target(&self, x: &[f64]) -> Option<Vec<f64>> {
        let misfit = self.observation - self.forward(x);
        let g = self.forward_grad(x);
        let c = 2.0 * misfit / self.noise_var;
        Some(vec![-x[0] + c * g[0], -x[1] + c * g[1]])
    }
}

/// Neal's funnel `N(x₁; 0, 9) · N(x₂..x_d; 0, exp(x₁) I)`.
#[derive(Debug, Clone, Copy)]
pub struct Funnel {
    dim: usize,
}

pub fn make_funnel(dim: usize) -> Result<Funnel> {
    if dim < 2 {
        return Err(Error::InvalidParameter(format!(
            "funnel dimension must be at least 2, got {dim}"
        )));
    }
    Ok(Funnel { dim })
}

fn log_normal(x: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * x * x / var
}

impl Funnel {
    /// Normalized `log π₁(x)`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let v = x[0].exp();
        log_normal(x[0], 9.0) + x[1..].iter().map(|&xi| log_normal(xi, v)).sum::<f64>()
    }
}

impl TargetModel for Funnel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> String {
        format!("funnel:{}", self.dim)
    }

    fn log_ratio(&self, x: &[f64]) -> f64 {
        let reference: f64 = x.iter().map(|&xi| log_normal(xi, 1.0)).sum();
        self.log_density(x) - reference
    }

    fn log_target(&self, x: &[f64]) -> f64 {
        self.log_density(x)
    }

    fn score_target(&self, x: &[f64]) -> Option<Vec<f64>> {
        let inv_v = (-x[0]).exp();
        let tail_sq: f64 = x[1..].iter().map(|v| v * v).sum();
        let mut s = Vec::with_capacity(self.dim);
        s.push(-x[0] / 9.0 - 0.5 * (self.dim - 1) as f64 + 0.5 * inv_v * tail_sq);
        s.extend(x[1..].iter().map(|&xi| -xi * inv_v));
        Some(s)
    }
}

/// Isotropic Gaussian `N(mean, s² I)`. The tempered path between two
/// Gaussians stays Gaussian, so its moments are known at every `t`.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: Vec<f64>,
    stdev: f64,
}

/// Exact mean and (isotropic) variance of the tempered density `π_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperedMoments {
    pub mean: Vec<f64>,
    pub variance: f64,
}

pub fn make_gaussian(mean: Vec<f64>, stdev: f64) -> Result<GaussianTarget> {
    if !(stdev > 0.0 && stdev.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gaussian standard deviation must be positive, got {stdev}"
        )));
    }
    if mean.is_empty() || mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::InvalidParameter(
            "gaussian mean must be a non-empty finite vector".into(),
        ));
    }
    Ok(GaussianTarget { mean, stdev })
}

impl GaussianTarget {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn stdev(&self) -> f64 {
        self.stdev
    }

    pub fn tempered_moments(&self, t: f64) -> TemperedMoments {
        let s2 = self.stdev * self.stdev;
        let precision = (1.0 - t) + t / s2;
        TemperedMoments {
            mean: self.mean.iter().map(|m| (t / s2) * m / precision).collect(),
            variance: 1.0 / precision,
        }
    }
}

impl TargetModel for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn name(&self) -> String {
        let mut parts: Vec<String> = self.mean.iter().map(|m| m.to_string()).collect();
        parts.push(self.stdev.to_string());
        format!("gaussian:{}", parts.join(","))
    }

    fn log_ratio(&self, x: &[f64]) -> f64 {
        let s2 = self.stdev * self.stdev;
        let d = self.dim() as f64;
        let mut dev = 0.0;
        let mut norm = 0.0;
        for (xi, mi) in x.iter().zip(&self.mean) {
            dev += (xi - mi) * (xi - mi);
            norm += xi * xi;
        }
        -0.5 * d * s2.ln() - dev / (2.0 * s2) + 0.5 * norm
    }

    fn score_target(&self, x: &[f64]) -> Option<Vec<f64>> {
        let s2 = self.stdev * self.stdev;
        Some(x.iter().zip(&self.mean).map(|(xi, mi)| -(xi - mi) / s2).collect())
    }
}

/// Hides the scores of a target, leaving only the density ratio.
#[derive(Debug, Clone)]
pub struct RatioOnly<T>(pub T);

impl<T: TargetModel> TargetModel for RatioOnly<T> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn name(&self) -> String {
        self.0.name()
    }
    fn log_ratio(&self, x: &[f64]) -> f64 {
        self.0.log_ratio(x)
    }
    fn score_reference(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
    fn score_target(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
    fn log_target(&self, x: &[f64]) -> f64 {
        self.0.log_target(x)
    }
}

/// Adds a constant to the log density ratio of a target.
#[derive(Debug, Clone)]
pub struct ShiftedRatio<T> {
    pub inner: T,
    pub shift: f64,
}

impl<T: TargetModel> TargetModel for ShiftedRatio<T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn name(&self) -> String {
        format!("{}+{}", self.inner.name(), self.shift)
    }
    fn log_ratio(&self, x: &[f64]) -> f64 {
        self.inner.log_ratio(x) + self.shift
    }
    fn score_reference(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.inner.score_reference(x)
    }
    fn score_target(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.inner.score_target(x)
    }
}

/// A target chosen by name, as used in run configurations.
pub type DynTarget = Arc<dyn TargetModel>;

/// Resolves `donut`, `butterfly`, `spaceships`, `funnel:<d>` or
/// `gaussian:<m1>,...,<md>,<s>` (the last number is the standard deviation).
pub fn target_from_name(name: &str) -> Result<DynTarget> {
    let bad = |msg: String| Error::config("target", msg);
    let name = name.trim();
    let (head, args) = match name.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (name, None),
    };
    match (head, args) {
        ("donut", None) => Ok(Arc::new(make_bayesian_2d(Bayesian2dKind::Donut))),
        ("butterfly", None) => Ok(Arc::new(make_bayesian_2d(Bayesian2dKind::Butterfly))),
        ("spaceships", None) => Ok(Arc::new(make_bayesian_2d(Bayesian2dKind::Spaceships))),
        ("funnel", Some(d)) => {
            let d: usize = d
                .trim()
                .parse()
                .map_err(|_| bad(format!("cannot parse funnel dimension `{d}`")))?;
            Ok(Arc::new(make_funnel(d).map_err(|e| bad(e.to_string()))?))
        }
        ("gaussian", Some(list)) => {
            let values = list
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("cannot parse gaussian parameters `{list}`")))?;
            if values.len() < 2 {
                return Err(bad("gaussian needs at least one mean entry and a stdev".into()));
            }
            let (mean, s) = values.split_at(values.len() - 1);
            Ok(Arc::new(
                make_gaussian(mean.to_vec(), s[0]).map_err(|e| bad(e.to_string()))?,
            ))
        }
        _ => Err(bad(format!("unknown target `{name}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[k] += step;
                xm[k] -= step;
                (f(&xp) - f(&xm)) / (2.0 * step)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-12)
    }

    fn check_scores(target: &dyn TargetModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = target.sample_reference(&mut rng, 10);
        for x in pts.rows() {
            let fd = fd_gradient(|y| target.log_target(y), x, 1e-5);
            let s = target.score_target(x).unwrap();
            assert!(rel_err(&s, &fd) < 1e-5, "{}: {s:?} vs {fd:?}", target.name());
            let fd0 = fd_gradient(|y| -0.5 * y.iter().map(|v| v * v).sum::<f64>(), x, 1e-5);
            assert!(rel_err(&target.score_reference(x).unwrap(), &fd0) < 1e-5);
        }
    }

    #[test]
    fn bayesian_values() {
        let donut = make_bayesian_2d(Bayesian2dKind::Donut);
        assert_eq!(donut.log_ratio(&[2.0, 0.0]), 0.0);
        assert_relative_eq!(donut.log_ratio(&[0.0, 0.0]), -64.0, max_relative = 1e-14);
        let butterfly = make_bayesian_2d(Bayesian2dKind::Butterfly);
        assert_relative_eq!(butterfly.log_ratio(&[0.0, 0.0]), -4.0 / 0.36, max_relative = 1e-14);
        assert_relative_eq!(butterfly.log_ratio(&[0.0, 0.0]), -11.1111, epsilon = 1e-4);
        let ships = make_bayesian_2d(Bayesian2dKind::Spaceships);
        assert_relative_eq!(ships.log_ratio(&[0.0, 0.0]), -16.0, max_relative = 1e-14);
    }

    #[test]
    fn funnel_values() {
        for d in [2, 5, 20] {
            let f = make_funnel(d).unwrap();
            let zero = vec![0.0; d];
            assert_relative_eq!(f.log_ratio(&zero), -(3f64.ln()), max_relative = 1e-13);
            let s = f.score_target(&zero).unwrap();
            assert_eq!(s[0], -((d - 1) as f64) / 2.0);
            assert!(s[1..].iter().all(|&v| v == 0.0));
        }
        assert!(make_funnel(1).is_err());
    }

    #[test]
    fn gaussian_values() {
        let g = make_gaussian(vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(g.log_ratio(&[0.7, -1.3]), 0.0);
        let half = make_gaussian(vec![0.0], 0.5).unwrap();
        assert_relative_eq!(half.log_ratio(&[1.0]), 2f64.ln() - 1.5, max_relative = 1e-14);
        assert_relative_eq!(half.tempered_moments(1.0).variance, 0.25);
        assert_eq!(half.tempered_moments(0.0).variance, 1.0);
        let shifted = make_gaussian(vec![1.0, 0.0], 0.5).unwrap();
        let m = shifted.tempered_moments(0.5);
        assert_relative_eq!(m.variance, 0.4, max_relative = 1e-14);
        assert_relative_eq!(m.mean[0], 0.8, max_relative = 1e-14);
        assert!(make_gaussian(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn gaussian_normalization_by_quadrature() {
        // ∫ exp(log_ratio) dπ₀ = Z₁/Z₀ = 1 for normalized densities.
        for (m, s) in [(0.0, 0.5), (1.0, 0.8), (-0.5, 1.3)] {
            let g = make_gaussian(vec![m], s).unwrap();
            let (lo, hi, n) = (-12.0, 12.0, 24_000);
            let w = (hi - lo) / n as f64;
            let mut total = 0.0;
            for i in 0..=n {
                let x = lo + w * i as f64;
                let weight = if i == 0 || i == n { 0.5 } else { 1.0 };
                let ref_pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
                total += weight * g.log_ratio(&[x]).exp() * ref_pdf;
            }
            assert!((total * w - 1.0).abs() < 1e-6, "{m} {s}: {}", total * w);
        }
    }

    #[test]
    fn all_scores_match_finite_differences() {
        for kind in [
            Bayesian2dKind::Donut,
            Bayesian2dKind::Butterfly,
            Bayesian2dKind::Spaceships,
        ] {
            check_scores(&make_bayesian_2d(kind), 3);
        }
        for d in [2, 5, 10] {
            check_scores(&make_funnel(d).unwrap(), 5);
        }
        check_scores(&make_gaussian(vec![1.0, -2.0, 0.5], 0.7).unwrap(), 9);
    }

    #[test]
    fn ratio_only_hides_scores() {
        let t = RatioOnly(make_bayesian_2d(Bayesian2dKind::Donut));
        assert!(!t.has_scores());
        assert_eq!(t.log_ratio(&[1.0, 1.0]), t.0.log_ratio(&[1.0, 1.0]));
    }

    #[test]
    fn names_resolve() {
        for (name, d) in [
            ("donut", 2),
            ("butterfly", 2),
            ("spaceships", 2),
            ("funnel:7", 7),
            ("gaussian:1,0,0.5", 2),
        ] {
            let t = target_from_name(name).unwrap();
            assert_eq!(t.dim(), d);
        }
        assert_eq!(target_from_name("gaussian:1,0,0.5").unwrap().name(), "gaussian:1,0,0.5");
        assert!(target_from_name("funnel:1").is_err());
        assert!(target_from_name("funnel").is_err());
        assert!(target_from_name("gaussian:0.5").is_err());
        assert!(target_from_name("banana").is_err());
    }

    #[test]
    fn reference_draws_are_standard_normal() {
        let t = make_funnel(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = t.sample_reference(&mut rng, 20_000);
        for k in 0..3 {
            let col: Vec<f64> = e.rows().map(|r| r[k]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!(mean.abs() < 0.03 && (var - 1.0).abs() < 0.04);
        }
        assert_eq!(e.t(), 0.0);
    }
}
