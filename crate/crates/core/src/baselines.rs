//! Comparison samplers: SVGD, the unadjusted Langevin algorithm with
//! independent chains, and random-walk Metropolis tuned to a target
//! acceptance rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::{euler_step, RngStream, Schedule, Stepper};
use crate::kernels::{imq, imq_grad1_into, KernelSpec};
use crate::particles::Ensemble;
use crate::flows::Velocity;
use crate::targets::{DynTarget, TargetModel};

fn target_scores(ensemble: &Ensemble, target: &dyn TargetModel, who: &'static str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ensemble.len() * ensemble.dim());
    for x in ensemble.rows() {
        let s = target.score_target(x).ok_or(Error::MissingScores(who))?;
        out.extend_from_slice(&s);
    }
    Ok(out)
}

/// SVGD direction `φ(xᵢ) = (1/J) Σⱼ [K(xⱼ, xᵢ) ∇log π₁(xⱼ) + ∇₁K(xⱼ, xᵢ)]`.
pub fn svgd_direction(
    ensemble: &Ensemble,
    target: &dyn TargetModel,
    spec: &KernelSpec,
) -> Result<Velocity> {
    spec.validate()?;
    let (n, d) = (ensemble.len(), ensemble.dim());
    let scores = target_scores(ensemble, target, "SVGD")?;
    let h = spec.bandwidth_for(ensemble);
    let mut phi = vec![0.0; n * d];
    let mut g = vec![0.0; d];
    for i in 0..n {
        let xi = ensemble.particle(i);
        let out = &mut phi[i * d..(i + 1) * d];
        for j in 0..n {
            let xj = ensemble.particle(j);
            let k = imq(xj, xi, h);
            imq_grad1_into(xj, xi, h, &mut g);
            for c in 0..d {
                out[c] += k * scores[j * d + c] + g[c];
            }
        }
        for v in out.iter_mut() {
            *v /= n as f64;
        }
    }
    Velocity::from_rows(phi, n, d)
}

/// `X ← X + step_size · φ(X)`. Time is left unchanged.
pub fn svgd_step(
    ensemble: &Ensemble,
    target: &dyn TargetModel,
    spec: &KernelSpec,
    step_size: f64,
) -> Result<Ensemble> {
    euler_step(
        ensemble,
        |e| svgd_direction(e, target, spec),
        step_size,
        ensemble.t(),
    )
}

/// One ULA step per chain; chain `j` draws its noise from `rngs[j]` only.
pub fn ula_step(
    ensemble: &Ensemble,
    target: &dyn TargetModel,
    step_size: f64,
    rngs: &mut [RngStream],
) -> Result<Ensemble> {
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "step size must be positive, got {step_size}"
        )));
    }
    if rngs.len() != ensemble.len() {
        return Err(Error::DimensionMismatch {
            expected: ensemble.len(),
            found: rngs.len(),
        });
    }
    let scores = target_scores(ensemble, target, "ULA")?;
    let d = ensemble.dim();
    let scale = (2.0 * step_size).sqrt();
    let mut inc = Vec::with_capacity(scores.len());
    for (j, rng) in rngs.iter_mut().enumerate() {
        for c in 0..d {
            inc.push(step_size * scores[j * d + c] + scale * rng.standard_normal());
        }
    }
    ensemble.displaced(&inc, ensemble.t())
}

/// One independent stream per chain, split from the run seed.
pub fn chain_streams(seed: u64, chains: usize) -> Vec<RngStream> {
    (0..chains)
        .map(|j| RngStream::substream(seed, CHAIN_STREAM_BASE + j as u64))
        .collect()
}

/// Stream ids below this are reserved for per-run purposes.
pub const CHAIN_STREAM_BASE: u64 = 1 << 32;

/// Fixed-step SVGD with step size `T / N`.
pub struct SvgdStepper {
    pub target: DynTarget,
    pub kernel: KernelSpec,
}

impl Stepper for SvgdStepper {
    fn step(&mut self, ensemble: &Ensemble, _k: usize, schedule: &Schedule) -> Result<Ensemble> {
        svgd_step(ensemble, &*self.target, &self.kernel, schedule.dt())
    }
}

/// `J` independent ULA chains with step size `T / N`.
pub struct UlaStepper {
    pub target: DynTarget,
    pub rngs: Vec<RngStream>,
}

impl Stepper for UlaStepper {
    fn step(&mut self, ensemble: &Ensemble, _k: usize, schedule: &Schedule) -> Result<Ensemble> {
        ula_step(ensemble, &*self.target, schedule.dt(), &mut self.rngs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RwmMode {
    /// One chain run for `steps × chains` iterations; the last `chains`
    /// states are returned.
    Serial,
    /// `chains` independent chains run for `steps` iterations each; the
    /// final state of each is returned.
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RwmConfig {
    /// Initial proposal standard deviation.
    pub proposal_std: f64,
    pub target_acceptance: f64,
    pub tune_rounds: usize,
    /// Proposals per tuning round (summed over chains in parallel mode).
    pub tune_batch: usize,
    /// `N`, the per-chain step budget.
    pub steps: usize,
    /// `J`, the number of returned samples.
    pub chains: usize,
    pub mode: RwmMode,
}

impl RwmConfig {
    pub fn new(dim: usize, chains: usize, steps: usize, mode: RwmMode) -> Self {
        Self {
            proposal_std: 2.38 / (dim.max(1) as f64).sqrt(),
            target_acceptance: 0.23,
            tune_rounds: 20,
            tune_batch: 1000,
            steps,
            chains,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.proposal_std > 0.0 && self.proposal_std.is_finite()) {
            return Err(Error::InvalidParameter("proposal std must be positive".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::InvalidParameter(
                "target acceptance must lie in (0, 1)".into(),
            ));
        }
        if self.chains == 0 || self.steps == 0 || self.tune_batch == 0 {
            return Err(Error::InvalidParameter(
                "chains, steps and tuning batch must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Accepts with probability `min(1, exp(log_alpha))`.
pub fn metropolis_accept(log_alpha: f64, rng: &mut RngStream) -> bool {
    if log_alpha >= 0.0 {
        return true;
    }
    let u: f64 = rand::Rng::random(rng);
    u.ln() < log_alpha
}

struct Chain {
    x: Vec<f64>,
    logp: f64,
    rng: RngStream,
}

impl Chain {
    fn start(target: &dyn TargetModel, mut rng: RngStream) -> Self {
        let x: Vec<f64> = (0..target.dim()).map(|_| rng.standard_normal()).collect();
        let logp = target.log_target(&x);
        Self { x, logp, rng }
    }

    fn step(&mut self, target: &dyn TargetModel, std: f64, prop: &mut [f64]) -> bool {
        for (p, x) in prop.iter_mut().zip(&self.x) {
            *p = x + std * self.rng.standard_normal();
        }
        let lp = target.log_target(prop);
        // NaN log densities reject
        if lp.is_nan() || !metropolis_accept(lp - self.logp, &mut self.rng) {
            return false;
        }
        self.x.copy_from_slice(prop);
        self.logp = lp;
        true
    }
}

#[derive(Debug, Clone)]
pub struct RwmOutcome {
    pub samples: Ensemble,
    /// Frozen proposal std used in the measurement phase.
    pub proposal_std: f64,
    pub tuning_rounds: usize,
    /// Whether a tuning round landed in the acceptance band.
    pub tuned: bool,
    /// Acceptance fraction of the last tuning round.
    pub tuning_acceptance: f64,
    pub accepted: u64,
    pub proposed: u64,
}

impl RwmOutcome {
    /// Acceptance fraction of the measurement phase.
    pub fn acceptance(&self) -> f64 {
        self.accepted as f64 / self.proposed as f64
    }
}

/// Acceptance band within which tuning stops.
pub const RWM_BAND: (f64, f64) = (0.20, 0.26);

/// Random-walk Metropolis with isotropic Gaussian proposals. Chains start
/// from `N(0, I)` draws; chain `j` uses stream `CHAIN_STREAM_BASE + j` of
/// `seed`.
pub fn rwm_run(target: &dyn TargetModel, config: &RwmConfig, seed: u64) -> Result<RwmOutcome> {
    config.validate()?;
    let d = target.dim();
    let n_chains = match config.mode {
        RwmMode::Serial => 1,
        RwmMode::Parallel => config.chains,
    };
    let mut chains: Vec<Chain> = chain_streams(seed, n_chains)
        .into_iter()
        .map(|rng| Chain::start(target, rng))
        .collect();
    let mut prop = vec![0.0; d];

    let mut std = config.proposal_std;
    let per_chain = config.tune_batch.div_ceil(n_chains);
    let (mut tuned, mut rounds, mut last_acc) = (false, 0, f64::NAN);
    while rounds < config.tune_rounds {
        rounds += 1;
        let mut acc = 0u64;
        for chain in chains.iter_mut() {
            for _ in 0..per_chain {
                acc += chain.step(target, std, &mut prop) as u64;
            }
        }
        last_acc = acc as f64 / (per_chain * n_chains) as f64;
        if (RWM_BAND.0..=RWM_BAND.1).contains(&last_acc) {
            tuned = true;
            break;
        }
        std *= (last_acc - config.target_acceptance).exp();
    }
    if !tuned {
        log::warn!(
            "RWM tuning did not reach the acceptance band in {rounds} rounds \
             (last acceptance {last_acc:.3}); continuing with std {std:.4}"
        );
    }

    let mut accepted = 0u64;
    let mut proposed = 0u64;
    let mut data = Vec::with_capacity(config.chains * d);
    match config.mode {
        RwmMode::Serial => {
            let total = config.steps * config.chains;
            let chain = &mut chains[0];
            for it in 0..total {
                accepted += chain.step(target, std, &mut prop) as u64;
                proposed += 1;
                if it >= total - config.chains {
                    data.extend_from_slice(&chain.x);
                }
            }
        }
        RwmMode::Parallel => {
            for chain in chains.iter_mut() {
                for _ in 0..config.steps {
                    accepted += chain.step(target, std, &mut prop) as u64;
                    proposed += 1;
                }
                data.extend_from_slice(&chain.x);
            }
        }
    }
    Ok(RwmOutcome {
        samples: Ensemble::from_rows(data, config.chains, d)?,
        proposal_std: std,
        tuning_rounds: rounds,
        tuned,
        tuning_acceptance: last_acc,
        accepted,
        proposed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::moments;
    use crate::targets::{make_bayesian_2d, make_gaussian, Bayesian2dKind, RatioOnly};
    use std::sync::Arc;

    fn std_normal(d: usize) -> DynTarget {
        Arc::new(make_gaussian(vec![0.0; d], 1.0).unwrap())
    }

    fn pairwise_mean(e: &Ensemble) -> f64 {
        let mut s = 0.0;
        let mut c = 0;
        for i in 0..e.len() {
            for j in (i + 1)..e.len() {
                let d: f64 = e
                    .particle(i)
                    .iter()
                    .zip(e.particle(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                s += d.sqrt();
                c += 1;
            }
        }
        s / c as f64
    }

    #[test]
    fn svgd_single_particle() {
        let t = std_normal(1);
        let spec = KernelSpec::median();
        let at_mode = Ensemble::from_rows(vec![0.0], 1, 1).unwrap();
        assert_eq!(svgd_step(&at_mode, &*t, &spec, 0.1).unwrap().as_slice(), &[0.0]);
        let x = Ensemble::from_rows(vec![2.0], 1, 1).unwrap();
        let d = svgd_direction(&x, &*t, &spec).unwrap();
        assert_eq!(d.as_slice(), &[-2.0]);
        let next = svgd_step(&x, &*t, &spec, 0.1).unwrap();
        assert!((next.as_slice()[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn svgd_permutation_equivariant() {
        let t: DynTarget = Arc::new(make_bayesian_2d(Bayesian2dKind::Butterfly));
        let e = t.sample_reference(&mut RngStream::new(5), 12);
        let order: Vec<usize> = (0..12).rev().collect();
        let spec = KernelSpec::median();
        let a = svgd_step(&e, &*t, &spec, 0.05).unwrap().permuted(&order);
        let b = svgd_step(&e.permuted(&order), &*t, &spec, 0.05).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    struct ZeroScore;
    impl TargetModel for ZeroScore {
        fn dim(&self) -> usize {
            2
        }
        fn name(&self) -> String {
            "zero".into()
        }
        fn log_ratio(&self, x: &[f64]) -> f64 {
            0.5 * x.iter().map(|v| v * v).sum::<f64>()
        }
        fn score_target(&self, x: &[f64]) -> Option<Vec<f64>> {
            Some(vec![0.0; x.len()])
        }
    }

    #[test]
    fn svgd_pure_repulsion_spreads() {
        let e = ZeroScore.sample_reference(&mut RngStream::new(8), 20);
        let next = svgd_step(&e, &ZeroScore, &KernelSpec::median(), 0.1).unwrap();
        assert!(pairwise_mean(&next) >= pairwise_mean(&e));
    }

    #[test]
    fn svgd_needs_scores() {
        let t = RatioOnly(make_gaussian(vec![0.0], 1.0).unwrap());
        let e = Ensemble::from_rows(vec![0.5], 1, 1).unwrap();
        assert!(matches!(
            svgd_step(&e, &t, &KernelSpec::median(), 0.1),
            Err(Error::MissingScores(_))
        ));
    }

    /// Stream whose first normal draw is replaced by a fixed value.
    fn fixed_noise_step(x: f64, step: f64, xi: f64) -> f64 {
        let t = std_normal(1);
        let s = t.score_target(&[x]).unwrap()[0];
        x + step * s + (2.0 * step).sqrt() * xi
    }

    #[test]
    fn ula_formula() {
        assert!((fixed_noise_step(0.0, 0.01, 1.0) - 0.141_421).abs() < 1e-6);
        // check the library against the same formula with the real draw
        let t = std_normal(1);
        let mut rngs = chain_streams(3, 1);
        let xi = rngs[0].clone().standard_normal();
        let e = Ensemble::from_rows(vec![0.7], 1, 1).unwrap();
        let next = ula_step(&e, &*t, 0.01, &mut rngs).unwrap();
        assert!((next.as_slice()[0] - fixed_noise_step(0.7, 0.01, xi)).abs() < 1e-15);
        // displacement scales as √step for fixed noise at the mode
        let a = fixed_noise_step(0.0, 0.04, xi);
        let b = fixed_noise_step(0.0, 0.01, xi);
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ula_chains_are_independent() {
        let t = std_normal(2);
        let e = t.sample_reference(&mut RngStream::new(1), 4);
        let mut a = chain_streams(11, 4);
        let mut b = chain_streams(11, 4);
        b[2] = RngStream::substream(999, 0);
        let xa = ula_step(&e, &*t, 0.1, &mut a).unwrap();
        let xb = ula_step(&e, &*t, 0.1, &mut b).unwrap();
        for j in [0, 1, 3] {
            assert_eq!(xa.particle(j), xb.particle(j));
        }
        assert_ne!(xa.particle(2), xb.particle(2));
        assert!(ula_step(&e, &*t, 0.1, &mut a[..3]).is_err());
    }

    #[test]
    fn ula_long_run_variance() {
        let t = std_normal(1);
        let mut e = t.sample_reference(&mut RngStream::new(2), 200);
        let mut rngs = chain_streams(2, 200);
        for _ in 0..10_000 {
            e = ula_step(&e, &*t, 0.01, &mut rngs).unwrap();
        }
        let v = moments(&e).unwrap().variance(0);
        assert!((v - 1.0).abs() < 0.1 * 1.0 + 0.0, "{v}");
    }

    #[test]
    fn rwm_tiny_proposals_are_accepted_and_grown() {
        let t = std_normal(1);
        let mut cfg = RwmConfig::new(1, 10, 10, RwmMode::Parallel);
        cfg.proposal_std = 1e-6;
        cfg.tune_rounds = 1;
        let out = rwm_run(&*t, &cfg, 1).unwrap();
        assert!(out.tuning_acceptance > 0.99);
        assert!(out.proposal_std > 1e-6);
    }

    #[test]
    fn rwm_tunes_on_gaussian() {
        let t = std_normal(1);
        let mut cfg = RwmConfig::new(1, 200, 100, RwmMode::Serial);
        cfg.proposal_std = 0.5;
        let out = rwm_run(&*t, &cfg, 4).unwrap();
        assert!(out.tuned);
        assert!((0.20..=0.26).contains(&out.tuning_acceptance));
        assert!((0.18..=0.28).contains(&out.acceptance()), "{}", out.acceptance());
        assert_eq!(out.proposed, 200 * 100);
        assert_eq!(out.samples.len(), 200);
    }

    #[test]
    fn rwm_parallel_mean_is_centred() {
        let t = std_normal(1);
        let cfg = RwmConfig::new(1, 10_000, 50, RwmMode::Parallel);
        let out = rwm_run(&*t, &cfg, 6).unwrap();
        let m = moments(&out.samples).unwrap();
        let se = (m.variance(0) / 10_000.0).sqrt();
        assert!(m.mean[0].abs() < 3.0 * se, "{} vs {se}", m.mean[0]);
        assert_eq!(out.proposed, 10_000 * 50);
    }

    #[test]
    fn rwm_is_deterministic() {
        let t: DynTarget = Arc::new(make_bayesian_2d(Bayesian2dKind::Butterfly));
        let cfg = RwmConfig::new(2, 16, 20, RwmMode::Serial);
        let a = rwm_run(&*t, &cfg, 3).unwrap();
        let b = rwm_run(&*t, &cfg, 3).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn metropolis_detailed_balance_on_three_states() {
        // π ∝ (1, 2, 3) on a cycle with symmetric ±1 proposals
        let p = [1.0f64, 2.0, 3.0];
        let mut rng = RngStream::new(21);
        let mut counts = [0usize; 3];
        let mut s = 0usize;
        let steps = 100_000;
        for _ in 0..steps {
            let up: bool = rand::Rng::random(&mut rng);
            let prop = if up { (s + 1) % 3 } else { (s + 2) % 3 };
            if metropolis_accept((p[prop] / p[s]).ln(), &mut rng) {
                s = prop;
            }
            counts[s] += 1;
        }
        let tv: f64 = (0..3)
            .map(|i| (counts[i] as f64 / steps as f64 - p[i] / 6.0).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.05, "{tv}");
    }
}
