//! Run configuration: a TOML file with `[run]`, `[sweep]` and `[bench]`
//! sections, every key of which can be overridden from the command line.
//!
//! ```toml
//! [run]
//! target = "donut"        # donut | butterfly | spaceships | funnel:<d> | gaussian:<m1,..,md,s>
//! sampler = "kfrflow-i"   # see SamplerKind
//! J = 300                 # particles
//! N = 100                 # steps
//! seed = 7
//! # T = 1.0               # stopping time; infinite-time samplers only
//! # lambda = 1e-3        # 0 for kfrflow-i
//! # epsilon = 0.0         # KFRD noise level
//! # trials = 30
//! # observe_every = 10
//! # bandwidth = 0.5       # fixed kernel bandwidth; median heuristic if absent
//! # median_rule = "log-j-plus-one"  # log-j-plus-one | log-j | plain
//! # h_floor = 1e-6
//! # ksd_h = 1.0
//! # ksd_estimator = "v"   # v | u
//! # timings = false       # record per-step wall time (breaks byte-identical output)
//! # rwm_std = 1.68        # initial RWM proposal std
//! # rwm_tune_rounds = 20
//! # rwm_tune_batch = 1000
//!
//! [sweep]                 # any subset of axes
//! J = [25, 100]
//! N = [8, 64]
//! lambda = [0.0, 0.1]
//!
//! [bench]
//! warmup = 3
//! repeats = 30
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{KsdConfig, KsdEstimator};
use crate::error::{Error, Result};
use crate::kernels::{BandwidthPolicy, KernelSpec, MedianRule, DEFAULT_H_FLOOR};

pub const DEFAULT_TRIALS: usize = 30;
pub const DEFAULT_OBSERVE_EVERY: usize = 10;
pub const DEFAULT_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    KfrflowEuler,
    KfrflowAb4,
    KfrflowI,
    /// KFRFlow-I with the given number of Newton iterations per step.
    KfrflowINewton(usize),
    Kfrd,
    Svgd,
    Ula,
    RwmSerial,
    RwmParallel,
}

impl SamplerKind {
    /// Samplers that transport in unit time and so fix `T = 1`.
    pub fn is_unit_time(self) -> bool {
        !matches!(
            self,
            SamplerKind::Svgd | SamplerKind::Ula | SamplerKind::RwmSerial | SamplerKind::RwmParallel
        )
    }

    pub fn is_rwm(self) -> bool {
        matches!(self, SamplerKind::RwmSerial | SamplerKind::RwmParallel)
    }

    pub fn needs_scores(self) -> bool {
        matches!(self, SamplerKind::Svgd | SamplerKind::Ula)
    }

    /// KFRFlow-I runs unregularized unless told otherwise.
    pub fn default_lambda(self) -> f64 {
        match self {
            SamplerKind::KfrflowI | SamplerKind::KfrflowINewton(_) => 0.0,
            _ => DEFAULT_LAMBDA,
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerKind::KfrflowEuler => f.write_str("kfrflow-euler"),
            SamplerKind::KfrflowAb4 => f.write_str("kfrflow-ab4"),
            SamplerKind::KfrflowI => f.write_str("kfrflow-i"),
            SamplerKind::KfrflowINewton(n) => write!(f, "kfrflow-i-newton:{n}"),
            SamplerKind::Kfrd => f.write_str("kfrd"),
            SamplerKind::Svgd => f.write_str("svgd"),
            SamplerKind::Ula => f.write_str("ula"),
            SamplerKind::RwmSerial => f.write_str("rwm-serial"),
            SamplerKind::RwmParallel => f.write_str("rwm-parallel"),
        }
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "kfrflow-euler" | "kfrflow" => SamplerKind::KfrflowEuler,
            "kfrflow-ab4" => SamplerKind::KfrflowAb4,
            "kfrflow-i" => SamplerKind::KfrflowI,
            "kfrd" => SamplerKind::Kfrd,
            "svgd" => SamplerKind::Svgd,
            "ula" => SamplerKind::Ula,
            "rwm-serial" => SamplerKind::RwmSerial,
            "rwm-parallel" => SamplerKind::RwmParallel,
            other => match other.strip_prefix("kfrflow-i-newton:") {
                Some(n) => match n.parse::<usize>() {
                    Ok(n) if n >= 1 => SamplerKind::KfrflowINewton(n),
                    _ => {
                        return Err(Error::config(
                            "run.sampler",
                            format!("Newton iteration count must be a positive integer, got `{n}`"),
                        ))
                    }
                },
                None => {
                    return Err(Error::config(
                        "run.sampler",
                        format!(
                            "unknown sampler `{other}`; expected one of kfrflow-euler, kfrflow-ab4, \
                             kfrflow-i, kfrflow-i-newton:<iters>, kfrd, svgd, ula, rwm-serial, \
                             rwm-parallel"
                        ),
                    ))
                }
            },
        };
        Ok(kind)
    }
}

impl Serialize for SamplerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SamplerKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `[run]` as written by the user; every field optional so that file and
/// flags can be layered.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub target: Option<String>,
    pub sampler: Option<String>,
    #[serde(rename = "J")]
    pub particles: Option<usize>,
    #[serde(rename = "N")]
    pub steps: Option<usize>,
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub observe_every: Option<usize>,
    pub bandwidth: Option<f64>,
    pub median_rule: Option<MedianRule>,
    pub h_floor: Option<f64>,
    pub ksd_h: Option<f64>,
    pub ksd_estimator: Option<KsdEstimator>,
    pub timings: Option<bool>,
    pub rwm_std: Option<f64>,
    pub rwm_tune_rounds: Option<usize>,
    pub rwm_tune_batch: Option<usize>,
}

impl RunSection {
    /// Fields set in `other` replace those in `self`.
    pub fn overlay(&mut self, other: &RunSection) {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f.clone(); } )* };
        }
        take!(
            target, sampler, particles, steps, horizon, lambda, epsilon, seed, trials,
            observe_every, bandwidth, median_rule, h_floor, ksd_h, ksd_estimator, timings, rwm_std,
            rwm_tune_rounds, rwm_tune_batch
        );
    }
}

/// Axes of a sweep. Absent axes keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(rename = "J")]
    pub particles: Option<Vec<usize>>,
    #[serde(rename = "N")]
    pub steps: Option<Vec<usize>>,
    pub lambda: Option<Vec<f64>>,
    pub epsilon: Option<Vec<f64>>,
    #[serde(rename = "T")]
    pub horizon: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "BenchConfig::default_warmup")]
    pub warmup: usize,
    #[serde(default = "BenchConfig::default_repeats")]
    pub repeats: usize,
}

impl BenchConfig {
    fn default_warmup() -> usize {
        3
    }
    fn default_repeats() -> usize {
        30
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: Self::default_warmup(),
            repeats: Self::default_repeats(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub run: RunSection,
    pub sweep: Option<SweepGrid>,
    pub bench: Option<BenchConfig>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = e
                .span()
                .and_then(|s| text.get(s))
                .map(|s| s.trim().to_string())
                .unwrap_or_default();
            Error::config(key, msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }
}

/// Fully resolved and validated configuration of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub target: String,
    pub sampler: SamplerKind,
    #[serde(rename = "J")]
    pub particles: usize,
    #[serde(rename = "N")]
    pub steps: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub trials: usize,
    pub observe_every: usize,
    pub bandwidth: Option<f64>,
    pub median_rule: MedianRule,
    pub h_floor: f64,
    pub ksd_h: f64,
    pub ksd_estimator: KsdEstimator,
    pub timings: bool,
    pub rwm_std: Option<f64>,
    pub rwm_tune_rounds: usize,
    pub rwm_tune_batch: usize,
}

fn required<T>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(format!("run.{key}"), "missing required key"))
}

fn positive(v: f64, key: &str) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(format!("run.{key}"), format!("must be positive, got {v}")))
    }
}

fn nonnegative(v: f64, key: &str) -> Result<f64> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(format!("run.{key}"), format!("must be nonnegative, got {v}")))
    }
}

fn at_least_one(v: usize, key: &str) -> Result<usize> {
    if v >= 1 {
        Ok(v)
    } else {
        Err(Error::config(format!("run.{key}"), "must be at least 1"))
    }
}

impl RunConfig {
    pub fn resolve(section: &RunSection) -> Result<Self> {
        let target = required(section.target.clone(), "target")?;
        crate::targets::target_from_name(&target)
            .map_err(|e| Error::config("run.target", e.to_string()))?;
        let sampler: SamplerKind = required(section.sampler.clone(), "sampler")?.parse()?;
        let particles = at_least_one(required(section.particles, "J")?, "J")?;
        let steps = at_least_one(required(section.steps, "N")?, "N")?;
        let horizon = match (sampler.is_unit_time(), section.horizon) {
            (true, Some(t)) if t != 1.0 => {
                return Err(Error::config(
                    "run.T",
                    format!("{sampler} transports in unit time; T must be 1, got {t}"),
                ))
            }
            (_, Some(t)) => positive(t, "T")?,
            (_, None) => 1.0,
        };
        let cfg = Self {
            target,
            sampler,
            particles,
            steps,
            horizon,
            lambda: nonnegative(section.lambda.unwrap_or(sampler.default_lambda()), "lambda")?,
            epsilon: nonnegative(section.epsilon.unwrap_or(0.0), "epsilon")?,
            seed: required(section.seed, "seed")?,
            trials: at_least_one(section.trials.unwrap_or(DEFAULT_TRIALS), "trials")?,
            observe_every: at_least_one(
                section.observe_every.unwrap_or(DEFAULT_OBSERVE_EVERY),
                "observe_every",
            )?,
            bandwidth: section.bandwidth.map(|h| positive(h, "bandwidth")).transpose()?,
            median_rule: section.median_rule.unwrap_or_default(),
            h_floor: positive(section.h_floor.unwrap_or(DEFAULT_H_FLOOR), "h_floor")?,
            ksd_h: positive(section.ksd_h.unwrap_or(1.0), "ksd_h")?,
            ksd_estimator: section.ksd_estimator.unwrap_or(KsdEstimator::VStatistic),
            timings: section.timings.unwrap_or(false),
            rwm_std: section.rwm_std.map(|s| positive(s, "rwm_std")).transpose()?,
            rwm_tune_rounds: section.rwm_tune_rounds.unwrap_or(20),
            rwm_tune_batch: at_least_one(section.rwm_tune_batch.unwrap_or(1000), "rwm_tune_batch")?,
        };
        Ok(cfg)
    }

    /// `Δt = T / N`.
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn kernel(&self) -> KernelSpec {
        KernelSpec {
            bandwidth: match self.bandwidth {
                Some(h) => BandwidthPolicy::Fixed(h),
                None => BandwidthPolicy::MedianHeuristic,
            },
            median_rule: self.median_rule,
            h_floor: self.h_floor,
            ..KernelSpec::default()
        }
    }

    pub fn ksd(&self) -> KsdConfig {
        KsdConfig {
            h: self.ksd_h,
            estimator: self.ksd_estimator,
        }
    }

    /// Back to the layered form, e.g. to apply a sweep cell.
    pub fn to_section(&self) -> RunSection {
        RunSection {
            target: Some(self.target.clone()),
            sampler: Some(self.sampler.to_string()),
            particles: Some(self.particles),
            steps: Some(self.steps),
            horizon: (!self.sampler.is_unit_time()).then_some(self.horizon),
            lambda: Some(self.lambda),
            epsilon: Some(self.epsilon),
            seed: Some(self.seed),
            trials: Some(self.trials),
            observe_every: Some(self.observe_every),
            bandwidth: self.bandwidth,
            median_rule: Some(self.median_rule),
            h_floor: Some(self.h_floor),
            ksd_h: Some(self.ksd_h),
            ksd_estimator: Some(self.ksd_estimator),
            timings: Some(self.timings),
            rwm_std: self.rwm_std,
            rwm_tune_rounds: Some(self.rwm_tune_rounds),
            rwm_tune_batch: Some(self.rwm_tune_batch),
        }
    }
}

/// Reads a config file (when given), layers `overrides` on its `[run]`
/// section and resolves the result.
pub fn parse_config(path: Option<&Path>, overrides: &RunSection) -> Result<(RunConfig, ConfigFile)> {
    let mut file = match path {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    file.run.overlay(overrides);
    let cfg = RunConfig::resolve(&file.run)?;
    Ok((cfg, file))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
target = "donut"
sampler = "kfrflow-i"
J = 300
N = 100
seed = 7
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let file = ConfigFile::parse(MINIMAL).unwrap();
        let cfg = RunConfig::resolve(&file.run).unwrap();
        assert_eq!(cfg.dt(), 0.01);
        assert_eq!(cfg.trials, 30);
        assert_eq!(cfg.horizon, 1.0);
        assert_eq!(cfg.sampler, SamplerKind::KfrflowI);
        assert_eq!(cfg.ksd().h, 1.0);
        assert!(matches!(cfg.kernel().bandwidth, BandwidthPolicy::MedianHeuristic));
        assert_eq!(cfg.lambda, 0.0);
        assert_eq!(cfg.kernel().median_rule, MedianRule::LogJPlusOne);
        let plain = format!("{MINIMAL}median_rule = \"plain\"\n");
        let plain = RunConfig::resolve(&ConfigFile::parse(&plain).unwrap().run).unwrap();
        assert_eq!(plain.kernel().median_rule, MedianRule::Plain);

        let mut s = file.run;
        s.sampler = Some("kfrflow-euler".into());
        assert_eq!(RunConfig::resolve(&s).unwrap().lambda, DEFAULT_LAMBDA);
    }

    #[test]
    fn unit_time_rejects_other_horizons() {
        let text = format!("{MINIMAL}T = 5.0\n");
        let file = ConfigFile::parse(&text).unwrap();
        let err = RunConfig::resolve(&file.run).unwrap_err();
        assert!(err.to_string().contains("run.T"), "{err}");
        let ok = format!("{MINIMAL}T = 1.0\n");
        assert!(RunConfig::resolve(&ConfigFile::parse(&ok).unwrap().run).is_ok());

        let mut s = ConfigFile::parse(MINIMAL).unwrap().run;
        s.sampler = Some("ula".into());
        s.horizon = Some(5.0);
        assert_eq!(RunConfig::resolve(&s).unwrap().dt(), 0.05);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}lamda = 0.1\n");
        let err = ConfigFile::parse(&text).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        assert!(ConfigFile::parse("[runn]\n").is_err());
    }

    #[test]
    fn schema_errors_name_the_key() {
        let mut s = ConfigFile::parse(MINIMAL).unwrap().run;
        s.trials = Some(0);
        assert!(RunConfig::resolve(&s).unwrap_err().to_string().contains("run.trials"));
        s.trials = None;
        s.lambda = Some(-1.0);
        assert!(RunConfig::resolve(&s).unwrap_err().to_string().contains("run.lambda"));
        s.lambda = None;
        s.target = Some("banana".into());
        assert!(RunConfig::resolve(&s).unwrap_err().to_string().contains("run.target"));
        s.target = None;
        assert!(RunConfig::resolve(&s).unwrap_err().to_string().contains("run.target"));
    }

    #[test]
    fn flags_override_file() {
        let file = ConfigFile::parse(MINIMAL).unwrap();
        let mut run = file.run.clone();
        run.overlay(&RunSection {
            particles: Some(50),
            sampler: Some("kfrflow-i-newton:3".into()),
            ..RunSection::default()
        });
        let cfg = RunConfig::resolve(&run).unwrap();
        assert_eq!(cfg.particles, 50);
        assert_eq!(cfg.steps, 100);
        assert_eq!(cfg.sampler, SamplerKind::KfrflowINewton(3));
    }

    #[test]
    fn sampler_names_round_trip() {
        for name in [
            "kfrflow-euler",
            "kfrflow-ab4",
            "kfrflow-i",
            "kfrflow-i-newton:4",
            "kfrd",
            "svgd",
            "ula",
            "rwm-serial",
            "rwm-parallel",
        ] {
            let k: SamplerKind = name.parse().unwrap();
            assert_eq!(k.to_string(), name);
        }
        assert!("kfrflow-i-newton:0".parse::<SamplerKind>().is_err());
        assert!("mala".parse::<SamplerKind>().is_err());
    }

    #[test]
    fn resolved_config_round_trips_through_section() {
        let cfg = RunConfig::resolve(&ConfigFile::parse(MINIMAL).unwrap().run).unwrap();
        assert_eq!(RunConfig::resolve(&cfg.to_section()).unwrap(), cfg);
    }

    #[test]
    fn sweep_and_bench_sections() {
        let text = format!("{MINIMAL}\n[sweep]\nJ = [25, 100]\nlambda = [0.0, 0.1]\n\n[bench]\nrepeats = 40\n");
        let file = ConfigFile::parse(&text).unwrap();
        let sweep = file.sweep.unwrap();
        assert_eq!(sweep.particles, Some(vec![25, 100]));
        assert_eq!(sweep.steps, None);
        let bench = file.bench.unwrap();
        assert_eq!((bench.warmup, bench.repeats), (3, 40));
    }
}
