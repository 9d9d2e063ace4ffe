//! Inverse-multiquadric kernel, its first-argument gradient, batch
//! kernel matrices and Jacobians, and bandwidth selection.
//!
//! The IMQ kernel is
//!
//! ```text
//! K(x, y) = (1 + |x - y|^2 / h^2)^(-1/2)
//! ∇₁K(x, y) = -(x - y) / h^2 · (1 + |x - y|^2 / h^2)^(-3/2)
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particles::Ensemble;

/// Lower clamp applied to every bandwidth produced by the median heuristic.
pub const DEFAULT_H_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Imq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandwidthPolicy {
    Fixed(f64),
    /// Recomputed from the ensemble at every step, see [`MedianRule`].
    MedianHeuristic,
}

/// How the median pairwise distance `med` becomes a bandwidth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MedianRule {
    /// `h² = med² / log(J + 1)`
    #[default]
    LogJPlusOne,
    /// `h² = med² / log J`
    LogJ,
    /// `h = med`
    Plain,
}

impl MedianRule {
    fn divisor(self, n: usize) -> f64 {
        match self {
            MedianRule::LogJPlusOne => ((n + 1) as f64).ln(),
            MedianRule::LogJ => (n as f64).ln(),
            MedianRule::Plain => 1.0,
        }
    }
}

impl std::str::FromStr for MedianRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log-j-plus-one" => Ok(MedianRule::LogJPlusOne),
            "log-j" => Ok(MedianRule::LogJ),
            "plain" => Ok(MedianRule::Plain),
            other => Err(Error::InvalidParameter(format!(
                "unknown median rule `{other}` (log-j-plus-one | log-j | plain)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: BandwidthPolicy,
    pub median_rule: MedianRule,
    pub h_floor: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            family: KernelFamily::Imq,
            bandwidth: BandwidthPolicy::MedianHeuristic,
            median_rule: MedianRule::default(),
            h_floor: DEFAULT_H_FLOOR,
        }
    }
}

impl KernelSpec {
    pub fn median() -> Self {
        Self::default()
    }

    pub fn fixed(h: f64) -> Result<Self> {
        let spec = Self {
            bandwidth: BandwidthPolicy::Fixed(h),
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h_floor > 0.0 && self.h_floor.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "h_floor must be positive, got {}",
                self.h_floor
            )));
        }
        if let BandwidthPolicy::Fixed(h) = self.bandwidth {
            check_bandwidth(h)?;
        }
        Ok(())
    }

    /// Bandwidth to use for one step on `ensemble`.
    pub fn bandwidth_for(&self, ensemble: &Ensemble) -> f64 {
        match self.bandwidth {
            BandwidthPolicy::Fixed(h) => h,
            BandwidthPolicy::MedianHeuristic => {
                median_bandwidth_with(ensemble, self.median_rule, self.h_floor)
            }
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64], h: f64) -> f64 {
        match self.family {
            KernelFamily::Imq => imq(x, y, h),
        }
    }
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "bandwidth must be positive and finite, got {h}"
        )))
    }
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() == y.len() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        })
    }
}

#[inline]
pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
pub(crate) fn imq(x: &[f64], y: &[f64], h: f64) -> f64 {
    (1.0 + sq_dist(x, y) / (h * h)).sqrt().recip()
}

/// Writes `∇₁K(x, y)` into `out`.
#[inline]
pub(crate) fn imq_grad1_into(x: &[f64], y: &[f64], h: f64, out: &mut [f64]) {
    let h2 = h * h;
    let q = imq(x, y, h);
    let scale = -q * q * q / h2;
    for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
        *o = scale * (a - b);
    }
}

pub fn imq_eval(x: &[f64], y: &[f64], h: f64) -> Result<f64> {
    check_dims(x, y)?;
    check_bandwidth(h)?;
    Ok(imq(x, y, h))
}

pub fn imq_grad1(x: &[f64], y: &[f64], h: f64) -> Result<Vec<f64>> {
    check_dims(x, y)?;
    check_bandwidth(h)?;
    let mut out = vec![0.0; x.len()];
    imq_grad1_into(x, y, h, &mut out);
    Ok(out)
}

/// J×J matrix with entries `K(X⁽ⁱ⁾, X⁽ʲ⁾)`.
pub fn kernel_matrix(ensemble: &Ensemble, h: f64) -> DMatrix<f64> {
    let n = ensemble.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        let xi = ensemble.particle(i);
        for j in (i + 1)..n {
            let v = imq(xi, ensemble.particle(j), h);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Jacobian of the basis-kernel vector at particle `i`: a J×d matrix
/// whose row `j` is `∇₁K(X⁽ⁱ⁾, X⁽ʲ⁾)`.
pub fn kernel_jacobian(ensemble: &Ensemble, h: f64, i: usize) -> Result<DMatrix<f64>> {
    let (n, d) = (ensemble.len(), ensemble.dim());
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    let xi = ensemble.particle(i);
    let mut jac = DMatrix::zeros(n, d);
    let mut g = vec![0.0; d];
    for j in 0..n {
        imq_grad1_into(xi, ensemble.particle(j), h, &mut g);
        for k in 0..d {
            jac[(j, k)] = g[k];
        }
    }
    Ok(jac)
}

/// Median-heuristic bandwidth `max(h_floor, sqrt(med² / log(J + 1)))`.
///
/// The median is taken exactly over all `J(J-1)/2` pairwise distances;
/// for an even count it is the mean of the two central values.
pub fn median_bandwidth(ensemble: &Ensemble, h_floor: f64) -> f64 {
    median_bandwidth_with(ensemble, MedianRule::LogJPlusOne, h_floor)
}

pub fn median_bandwidth_with(ensemble: &Ensemble, rule: MedianRule, h_floor: f64) -> f64 {
    let n = ensemble.len();
    if n < 2 {
        return h_floor;
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let xi = ensemble.particle(i);
        for j in (i + 1)..n {
            dists.push(sq_dist(xi, ensemble.particle(j)).sqrt());
        }
    }
    let med = median_in_place(&mut dists);
    let h = (med * med / rule.divisor(n)).sqrt();
    if h.is_finite() {
        h.max(h_floor)
    } else {
        h_floor
    }
}

fn median_in_place(values: &mut [f64]) -> f64 {
    let m = values.len();
    let cmp = |a: &f64, b: &f64| a.total_cmp(b);
    let (_, upper, _) = values.select_nth_unstable_by(m / 2, cmp);
    let upper = *upper;
    if m % 2 == 1 {
        upper
    } else {
        let lower = values[..m / 2]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_ensemble(n: usize, d: usize, seed: u64) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ensemble::from_rows(data, n, d).unwrap()
    }

    #[test]
    fn imq_identity_and_unit_distance() {
        assert_eq!(imq_eval(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0], 1.0).unwrap(), 1.0);
        assert_relative_eq!(
            imq_eval(&[1.5], &[0.0], 1.5).unwrap(),
            0.5f64.sqrt(),
            max_relative = 1e-15
        );
        // (1 + 25/4)^(-1/2)
        assert_relative_eq!(
            imq_eval(&[3.0, 0.0], &[0.0, 4.0], 2.0).unwrap(),
            0.371_390_676_354_103_7,
            max_relative = 1e-12
        );
    }

    #[test]
    fn imq_rejects_bad_input() {
        assert!(matches!(
            imq_eval(&[0.0], &[0.0, 1.0], 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(imq_eval(&[0.0], &[1.0], 0.0).is_err());
        assert!(imq_grad1(&[0.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn grad_values() {
        assert_eq!(imq_grad1(&[2.0, 1.0], &[2.0, 1.0], 0.7).unwrap(), vec![0.0, 0.0]);
        assert_relative_eq!(
            imq_grad1(&[1.0], &[0.0], 1.0).unwrap()[0],
            -0.353_553_390_593_273_8,
            max_relative = 1e-12
        );
    }

    #[test]
    fn kernel_matrix_shapes() {
        let one = Ensemble::from_rows(vec![0.4, 0.1], 1, 2).unwrap();
        assert_eq!(kernel_matrix(&one, 1.0), DMatrix::from_element(1, 1, 1.0));
        let twin = Ensemble::from_rows(vec![1.0, 2.0, 1.0, 2.0], 2, 2).unwrap();
        assert_eq!(kernel_matrix(&twin, 0.3), DMatrix::from_element(2, 2, 1.0));

        let e = random_ensemble(3, 2, 4);
        let k = kernel_matrix(&e, 0.8);
        for i in 0..3 {
            assert_eq!(k[(i, i)], 1.0);
            for j in 0..3 {
                assert_eq!(k[(i, j)], k[(j, i)]);
                if i != j {
                    assert!(k[(i, j)] > 0.0 && k[(i, j)] < 1.0);
                }
            }
        }
    }

    #[test]
    fn jacobian_rows_match_grad() {
        let e = random_ensemble(5, 3, 11);
        let jac = kernel_jacobian(&e, 0.9, 2).unwrap();
        for j in 0..5 {
            let g = imq_grad1(e.particle(2), e.particle(j), 0.9).unwrap();
            for k in 0..3 {
                assert_eq!(jac[(j, k)], g[k]);
            }
        }
        let single = Ensemble::from_rows(vec![1.0, 2.0], 1, 2).unwrap();
        assert_eq!(kernel_jacobian(&single, 1.0, 0).unwrap(), DMatrix::zeros(1, 2));
        assert!(matches!(
            kernel_jacobian(&e, 1.0, 5),
            Err(Error::IndexOutOfRange { index: 5, len: 5 })
        ));
    }

    #[test]
    fn jacobian_translation_invariant() {
        let e = random_ensemble(6, 2, 3);
        let shifted: Vec<f64> = e
            .rows()
            .flat_map(|p| [p[0] + 0.25, p[1] - 4.0])
            .collect();
        let s = Ensemble::from_rows(shifted, 6, 2).unwrap();
        let a = kernel_jacobian(&e, 1.1, 4).unwrap();
        let b = kernel_jacobian(&s, 1.1, 4).unwrap();
        assert!((a - b).amax() < 1e-14);
    }

    #[test]
    fn median_bandwidth_cases() {
        let two = Ensemble::from_rows(vec![0.0, 0.0, 2.0, 0.0], 2, 2).unwrap();
        assert_relative_eq!(
            median_bandwidth(&two, DEFAULT_H_FLOOR),
            (4.0 / 3f64.ln()).sqrt(),
            max_relative = 1e-14
        );
        assert_relative_eq!(median_bandwidth(&two, DEFAULT_H_FLOOR), 1.90813, epsilon = 1e-5);

        let same = Ensemble::from_rows(vec![1.0; 8], 4, 2).unwrap();
        assert_eq!(median_bandwidth(&same, 1e-6), 1e-6);
        let single = Ensemble::from_rows(vec![1.0, 1.0], 1, 2).unwrap();
        assert_eq!(median_bandwidth(&single, 0.5), 0.5);

        let e = random_ensemble(9, 2, 8);
        let scaled = Ensemble::from_rows(e.as_slice().iter().map(|v| 3.0 * v).collect(), 9, 2)
            .unwrap();
        assert_relative_eq!(
            median_bandwidth(&scaled, 1e-6),
            3.0 * median_bandwidth(&e, 1e-6),
            max_relative = 1e-13
        );
    }

    #[test]
    fn median_rules() {
        // three collinear points at 0, 1, 3: distances 1, 2, 3
        let e = Ensemble::from_rows(vec![0.0, 1.0, 3.0], 3, 1).unwrap();
        let h = |r| median_bandwidth_with(&e, r, 1e-6);
        assert_relative_eq!(h(MedianRule::LogJPlusOne), 2.0 / 4f64.ln().sqrt(), max_relative = 1e-15);
        assert_relative_eq!(h(MedianRule::LogJ), 2.0 / 3f64.ln().sqrt(), max_relative = 1e-15);
        assert_eq!(h(MedianRule::Plain), 2.0);
        assert_eq!("log-j".parse::<MedianRule>().unwrap(), MedianRule::LogJ);
        assert!("median".parse::<MedianRule>().is_err());
        let spec = KernelSpec {
            median_rule: MedianRule::Plain,
            ..KernelSpec::default()
        };
        assert_eq!(spec.bandwidth_for(&e), 2.0);
    }

    #[test]
    fn median_even_count_averages_center() {
        // 4 particles on a line: distances {1,2,3,1,2,1} -> sorted 1,1,1,2,2,3 -> median 1.5
        let e = Ensemble::from_rows(vec![0.0, 1.0, 2.0, 3.0], 4, 1).unwrap();
        let expected = (1.5f64 * 1.5 / 5f64.ln()).sqrt();
        assert_relative_eq!(median_bandwidth(&e, 1e-6), expected, max_relative = 1e-14);
    }

    proptest! {
        #[test]
        fn imq_symmetric_bounded(
            x in prop::collection::vec(-5.0f64..5.0, 3),
            y in prop::collection::vec(-5.0f64..5.0, 3),
            h in 0.1f64..4.0,
        ) {
            let kxy = imq_eval(&x, &y, h).unwrap();
            prop_assert!(kxy > 0.0 && kxy <= 1.0);
            prop_assert_eq!(kxy, imq_eval(&y, &x, h).unwrap());
            if x != y {
                prop_assert!(kxy < 1.0);
            }
            let gx = imq_grad1(&x, &y, h).unwrap();
            let gy = imq_grad1(&y, &x, h).unwrap();
            for (a, b) in gx.iter().zip(&gy) {
                prop_assert!((a + b).abs() <= 1e-15 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn grad_matches_central_differences(
            x in prop::collection::vec(-3.0f64..3.0, 2),
            y in prop::collection::vec(-3.0f64..3.0, 2),
            h in 0.3f64..3.0,
        ) {
            let g = imq_grad1(&x, &y, h).unwrap();
            let step = 1e-5;
            for k in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += step;
                xm[k] -= step;
                let fd = (imq(&xp, &y, h) - imq(&xm, &y, h)) / (2.0 * step);
                prop_assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1e-3));
            }
        }

        #[test]
        fn median_permutation_invariant(seed in 0u64..500, shift in 0usize..7) {
            let e = random_ensemble(7, 2, seed);
            let mut rows: Vec<Vec<f64>> = e.rows().map(|r| r.to_vec()).collect();
            rows.rotate_left(shift);
            let p = Ensemble::from_rows(rows.concat(), 7, 2).unwrap();
            prop_assert_eq!(median_bandwidth(&e, 1e-6), median_bandwidth(&p, 1e-6));
        }
    }
}
