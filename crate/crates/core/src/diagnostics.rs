//! Sample-quality diagnostics: kernel Stein discrepancy with the IMQ base
//! kernel, ensemble moments, and a loop-based reference implementation of
//! the KFRFlow velocity used to cross-check the optimized path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{tempered_score, Velocity};
use crate::kernels::KernelSpec;
use crate::particles::Ensemble;
use crate::targets::TargetModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KsdEstimator {
    #[serde(alias = "v")]
    VStatistic,
    #[serde(alias = "u")]
    UStatistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsdConfig {
    pub h: f64,
    pub estimator: KsdEstimator,
}

impl Default for KsdConfig {
    fn default() -> Self {
        Self {
            h: 1.0,
            estimator: KsdEstimator::VStatistic,
        }
    }
}

/// Derivatives of the IMQ base kernel entering the Langevin Stein kernel.
pub mod stein {
    /// `q = (1 + |x - y|² / h²)^(-1/2)`
    pub fn base(x: &[f64], y: &[f64], h: f64) -> f64 {
        crate::kernels::imq(x, y, h)
    }

    /// `∇ₓK(x, y) = -u q³ / h²`, `u = x - y`.
    pub fn grad_x(x: &[f64], y: &[f64], h: f64) -> Vec<f64> {
        let q = base(x, y, h);
        let c = -q * q * q / (h * h);
        x.iter().zip(y).map(|(a, b)| c * (a - b)).collect()
    }

    /// `∇_yK(x, y) = +u q³ / h²`.
    pub fn grad_y(x: &[f64], y: &[f64], h: f64) -> Vec<f64> {
        grad_x(x, y, h).into_iter().map(|v| -v).collect()
    }

    /// `tr ∇ₓ∇_y K = (d / h²) q³ - (3 |u|² / h⁴) q⁵`.
    pub fn trace_cross(x: &[f64], y: &[f64], h: f64) -> f64 {
        let u2 = crate::kernels::sq_dist(x, y);
        let q = base(x, y, h);
        let q3 = q * q * q;
        let h2 = h * h;
        x.len() as f64 / h2 * q3 - 3.0 * u2 / (h2 * h2) * q3 * q * q
    }

    /// Langevin Stein kernel `k₀(x, y)` for scores `sx = s(x)`, `sy = s(y)`.
    pub fn kernel(x: &[f64], y: &[f64], sx: &[f64], sy: &[f64], h: f64) -> f64 {
        let h2 = h * h;
        let u2 = crate::kernels::sq_dist(x, y);
        let q = base(x, y, h);
        let q3 = q * q * q;
        let trace = x.len() as f64 / h2 * q3 - 3.0 * u2 / (h2 * h2) * q3 * q * q;
        let c = q3 / h2;
        let mut cross = 0.0;
        let mut dot = 0.0;
        for k in 0..x.len() {
            let u = x[k] - y[k];
            // ∇ₓK·s(y) + ∇_yK·s(x) = (u q³/h²)·(s(x) - s(y))
            cross += c * u * (sx[k] - sy[k]);
            dot += sx[k] * sy[k];
        }
        trace + cross + q * dot
    }
}

/// Kernel Stein discrepancy of `samples` against the density whose score
/// is `score`.
pub fn ksd<F>(samples: &Ensemble, score: F, cfg: &KsdConfig) -> Result<f64>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    if !(cfg.h > 0.0 && cfg.h.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "KSD bandwidth must be positive, got {}",
            cfg.h
        )));
    }
    let n = samples.len();
    let scores = samples
        .rows()
        .map(|x| score(x).ok_or(Error::MissingScores("KSD")))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for i in 0..n {
        let xi = samples.particle(i);
        if cfg.estimator == KsdEstimator::VStatistic {
            total += stein::kernel(xi, xi, &scores[i], &scores[i], cfg.h);
        }
        for j in (i + 1)..n {
            total += 2.0 * stein::kernel(xi, samples.particle(j), &scores[i], &scores[j], cfg.h);
        }
    }
    let value = match cfg.estimator {
        KsdEstimator::VStatistic => {
            let v = total / (n * n) as f64;
            debug_assert!(v >= -1e-10, "V-statistic {v} below zero");
            v
        }
        KsdEstimator::UStatistic => {
            if n < 2 {
                return Err(Error::InvalidParameter(
                    "U-statistic KSD needs at least two samples".into(),
                ));
            }
            total / (n * (n - 1)) as f64
        }
    };
    if !value.is_finite() {
        return Err(Error::NonFinite { what: "KSD" });
    }
    Ok(value.max(0.0).sqrt())
}

/// KSD against the target `π₁`.
pub fn ksd_target(samples: &Ensemble, target: &dyn TargetModel, cfg: &KsdConfig) -> Result<f64> {
    ksd(samples, |x| target.score_target(x), cfg)
}

/// KSD against the tempered density `π_t`.
pub fn ksd_tempered(
    samples: &Ensemble,
    target: &dyn TargetModel,
    t: f64,
    cfg: &KsdConfig,
) -> Result<f64> {
    if !target.has_scores() {
        return Err(Error::MissingScores("KSD"));
    }
    ksd(samples, |x| tempered_score(target, x, t).ok(), cfg)
}

/// `(t, KSD(snapshot, π_t))` for every snapshot in order.
pub fn tempered_ksd_trace(
    snapshots: &[Ensemble],
    target: &dyn TargetModel,
    cfg: &KsdConfig,
) -> Result<Vec<(f64, f64)>> {
    snapshots
        .iter()
        .map(|e| Ok((e.t(), ksd_tempered(e, target, e.t(), cfg)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    /// d×d row-major unbiased covariance.
    pub covariance: Vec<f64>,
    pub dim: usize,
}

impl Moments {
    pub fn variance(&self, k: usize) -> f64 {
        self.covariance[k * self.dim + k]
    }

    pub fn variances(&self) -> Vec<f64> {
        (0..self.dim).map(|k| self.variance(k)).collect()
    }
}

pub fn mean(ensemble: &Ensemble) -> Vec<f64> {
    let d = ensemble.dim();
    let mut m = vec![0.0; d];
    for x in ensemble.rows() {
        for k in 0..d {
            m[k] += x[k];
        }
    }
    let n = ensemble.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

pub fn moments(ensemble: &Ensemble) -> Result<Moments> {
    let (n, d) = (ensemble.len(), ensemble.dim());
    if n < 2 {
        return Err(Error::InvalidParameter(
            "sample covariance needs at least two particles".into(),
        ));
    }
    let m = mean(ensemble);
    let mut cov = vec![0.0; d * d];
    for x in ensemble.rows() {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (x[a] - m[a]) * (x[b] - m[b]);
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    Ok(Moments {
        mean: m,
        covariance: cov,
        dim: d,
    })
}

/// Reference KFRFlow velocity written as explicit loops over the entry
/// formulas, with `(M + λI)⁻¹` formed by Gauss–Jordan elimination. Slow;
/// meant for cross-checking [`crate::flows::kfrflow_velocity`].
pub fn velocity_oracle(
    ensemble: &Ensemble,
    target: &dyn TargetModel,
    spec: &KernelSpec,
    lambda: f64,
) -> Result<Velocity> {
    let (n, d) = (ensemble.len(), ensemble.dim());
    let h = spec.bandwidth_for(ensemble);
    let x = |j: usize| ensemble.particle(j);
    let kern = |a: &[f64], b: &[f64]| -> f64 {
        let mut r2 = 0.0;
        for k in 0..a.len() {
            r2 += (a[k] - b[k]) * (a[k] - b[k]);
        }
        1.0 / (1.0 + r2 / (h * h)).sqrt()
    };
    let grad = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let q = kern(a, b);
        (0..a.len()).map(|k| -(a[k] - b[k]) / (h * h) * q * q * q).collect()
    };

    let mut r = vec![0.0; n];
    for j in 0..n {
        r[j] = target.log_ratio(x(j));
        if !r[j].is_finite() {
            return Err(Error::NonFiniteLogRatio { particle: j });
        }
    }
    let mut rbar = 0.0;
    for j in 0..n {
        rbar += r[j];
    }
    rbar /= n as f64;

    let mut m = vec![vec![0.0; n]; n];
    for l in 0..n {
        for mm in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                let gl = grad(x(i), x(l));
                let gm = grad(x(i), x(mm));
                for k in 0..d {
                    s += gl[k] * gm[k];
                }
            }
            m[l][mm] = s / n as f64;
        }
        m[l][l] += lambda;
    }

    let mut rhs = vec![0.0; n];
    for l in 0..n {
        let mut s = 0.0;
        for k in 0..n {
            s += (r[k] - rbar) * kern(x(k), x(l));
        }
        rhs[l] = s / n as f64;
    }

    let inv = gauss_jordan_inverse(m).ok_or(Error::NotPositiveDefinite { size: n, lambda })?;
    let mut f = vec![0.0; n];
    for l in 0..n {
        for mm in 0..n {
            f[l] += inv[l][mm] * rhs[mm];
        }
    }

    let mut v = vec![0.0; n * d];
    for j in 0..n {
        for l in 0..n {
            let g = grad(x(j), x(l));
            for k in 0..d {
                v[j * d + k] += g[k] * f[l];
            }
        }
    }
    Velocity::from_rows(v, n, d)
}

fn gauss_jordan_inverse(mut a: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
        if a[pivot][col] == 0.0 || !a[pivot][col].is_finite() {
            return None;
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for j in 0..n {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for row in 0..n {
            if row != col {
                let factor = a[row][col];
                if factor != 0.0 {
                    for j in 0..n {
                        a[row][j] -= factor * a[col][j];
                        inv[row][j] -= factor * inv[col][j];
                    }
                }
            }
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{make_bayesian_2d, make_gaussian, Bayesian2dKind, RatioOnly};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_zero_score_sample() {
        for d in 1..4 {
            let e = Ensemble::from_rows(vec![0.0; d], 1, d).unwrap();
            let v = ksd(&e, |x| Some(vec![0.0; x.len()]), &KsdConfig::default()).unwrap();
            assert_relative_eq!(v, (d as f64).sqrt(), max_relative = 1e-15);
        }
    }

    #[test]
    fn stein_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        use rand::Rng;
        let step = 1e-5;
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h = rng.random_range(0.5..2.0);
            let gx = stein::grad_x(&x, &y, h);
            let gy = stein::grad_y(&x, &y, h);
            let mut trace_fd = 0.0;
            for k in 0..3 {
                let (mut xp, mut xm, mut yp, mut ym) = (x.clone(), x.clone(), y.clone(), y.clone());
                xp[k] += step;
                xm[k] -= step;
                yp[k] += step;
                ym[k] -= step;
                let fdx = (stein::base(&xp, &y, h) - stein::base(&xm, &y, h)) / (2.0 * step);
                let fdy = (stein::base(&x, &yp, h) - stein::base(&x, &ym, h)) / (2.0 * step);
                assert!((fdx - gx[k]).abs() <= 1e-6 * gx[k].abs().max(1e-4));
                assert!((fdy - gy[k]).abs() <= 1e-6 * gy[k].abs().max(1e-4));
                trace_fd += (stein::grad_x(&x, &yp, h)[k] - stein::grad_x(&x, &ym, h)[k])
                    / (2.0 * step);
            }
            let tr = stein::trace_cross(&x, &y, h);
            assert!((trace_fd - tr).abs() <= 1e-6 * tr.abs().max(1e-4));
        }
    }

    #[test]
    fn ksd_discriminates_shifted_samples() {
        let target = make_gaussian(vec![0.0], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let good = target.sample_reference(&mut rng, 200);
        let bad = Ensemble::from_rows(good.as_slice().iter().map(|v| v + 3.0).collect(), 200, 1)
            .unwrap();
        let cfg = KsdConfig::default();
        let kg = ksd_target(&good, &target, &cfg).unwrap();
        let kb = ksd_target(&bad, &target, &cfg).unwrap();
        assert!(kb > 5.0 * kg, "{kg} {kb}");
    }

    #[test]
    fn ksd_invariances() {
        let target = make_bayesian_2d(Bayesian2dKind::Butterfly);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = target.sample_reference(&mut rng, 40);
        let cfg = KsdConfig::default();
        let base = ksd_target(&e, &target, &cfg).unwrap();
        let order: Vec<usize> = (0..40).map(|j| (j * 7) % 40).collect();
        let p = ksd_target(&e.permuted(&order), &target, &cfg).unwrap();
        assert_relative_eq!(base, p, max_relative = 1e-12);
        let u = ksd_target(
            &e,
            &target,
            &KsdConfig {
                estimator: KsdEstimator::UStatistic,
                ..cfg
            },
        )
        .unwrap();
        assert!(u >= 0.0 && u.is_finite());
        assert!(matches!(
            ksd_target(&e, &RatioOnly(target), &cfg),
            Err(Error::MissingScores(_))
        ));
    }

    #[test]
    fn moments_cases() {
        let e = Ensemble::from_rows(vec![-1.0, 1.0], 2, 1).unwrap();
        let m = moments(&e).unwrap();
        assert_eq!(m.mean, vec![0.0]);
        assert_eq!(m.covariance, vec![2.0]);
        let rep = Ensemble::from_rows(vec![0.5, 2.0, 0.5, 2.0, 0.5, 2.0], 3, 2).unwrap();
        assert!(moments(&rep).unwrap().covariance.iter().all(|&v| v == 0.0));
        assert!(moments(&Ensemble::from_rows(vec![1.0], 1, 1).unwrap()).is_err());

        let t = make_gaussian(vec![0.0], 1.0).unwrap();
        let big = t.sample_reference(&mut ChaCha8Rng::seed_from_u64(7), 10_000);
        let m = moments(&big).unwrap();
        assert!(m.mean[0].abs() < 0.05 && (m.variance(0) - 1.0).abs() < 0.05);
    }

    #[test]
    fn oracle_zero_for_constant_ratio() {
        let t = make_gaussian(vec![0.0, 0.0], 1.0).unwrap();
        let e = t.sample_reference(&mut ChaCha8Rng::seed_from_u64(8), 6);
        let v = velocity_oracle(&e, &t, &KernelSpec::median(), 0.0).unwrap();
        assert_eq!(v.max_abs(), 0.0);
    }

    #[test]
    fn oracle_permutation_equivariant() {
        let t = make_bayesian_2d(Bayesian2dKind::Donut);
        let e = t.sample_reference(&mut ChaCha8Rng::seed_from_u64(9), 6);
        let spec = KernelSpec::median();
        let order = [5, 3, 1, 0, 2, 4];
        let v = velocity_oracle(&e, &t, &spec, 1e-3).unwrap();
        let vp = velocity_oracle(&e.permuted(&order), &t, &spec, 1e-3).unwrap();
        for (a, &b) in order.iter().enumerate() {
            for k in 0..2 {
                assert!((vp.row(a)[k] - v.row(b)[k]).abs() <= 1e-9 * v.max_abs());
            }
        }
    }

    #[test]
    fn gauss_jordan_inverts() {
        let a = vec![vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 2.0]];
        let inv = gauss_jordan_inverse(a.clone()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|k| a[i][k] * inv[k][j]).sum();
                assert!((s - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
        assert!(gauss_jordan_inverse(vec![vec![0.0, 0.0], vec![0.0, 0.0]]).is_none());
    }
}
