use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kfrflow::diagnostics::{ksd_target, ksd_tempered, KsdConfig, KsdEstimator};
use kfrflow::harness::config::{parse_config, BenchConfig, RunSection};
use kfrflow::harness::{bench_step, run_experiment, sweep, write_record, RunRecord};
use kfrflow::{target_from_name, Ensemble, Error, Result};

#[derive(Parser)]
#[command(name = "kfrflow", version, about = "Kernel Fisher-Rao flow samplers and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (all trials).
    Run {
        #[command(flatten)]
        run: RunFlags,
        /// Observation CSV; a `.summary.csv` and a `.json` are written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the `[sweep]` grid and report the best setting per (J, N).
    Sweep {
        #[command(flatten)]
        run: RunFlags,
        /// Directory receiving one CSV triple per grid point.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Median single-step time.
    Bench {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// KSD between a sample CSV (one particle per row) and a named target.
    Ksd {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        target: String,
        /// Compare against the intermediate density at this pseudo-time.
        #[arg(long)]
        tempered: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        h: f64,
        #[arg(long, default_value = "v")]
        estimator: String,
    },
}

/// Every `[run]` key, overriding the config file.
#[derive(Args)]
struct RunFlags {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    sampler: Option<String>,
    #[arg(short = 'J', long = "particles")]
    particles: Option<usize>,
    #[arg(short = 'N', long = "steps")]
    steps: Option<usize>,
    #[arg(short = 'T', long = "horizon")]
    horizon: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    observe_every: Option<usize>,
    #[arg(long)]
    bandwidth: Option<f64>,
    /// log-j-plus-one | log-j | plain
    #[arg(long)]
    median_rule: Option<String>,
    #[arg(long)]
    h_floor: Option<f64>,
    #[arg(long)]
    ksd_h: Option<f64>,
    #[arg(long)]
    ksd_estimator: Option<String>,
    #[arg(long)]
    timings: Option<bool>,
    #[arg(long)]
    rwm_std: Option<f64>,
    #[arg(long)]
    rwm_tune_rounds: Option<usize>,
    #[arg(long)]
    rwm_tune_batch: Option<usize>,
}

fn estimator(s: &str) -> Result<KsdEstimator> {
    match s {
        "v" | "VStatistic" => Ok(KsdEstimator::VStatistic),
        "u" | "UStatistic" => Ok(KsdEstimator::UStatistic),
        other => Err(Error::config("ksd_estimator", format!("expected `v` or `u`, got `{other}`"))),
    }
}

impl RunFlags {
    fn section(&self) -> Result<RunSection> {
        Ok(RunSection {
            target: self.target.clone(),
            sampler: self.sampler.clone(),
            particles: self.particles,
            steps: self.steps,
            horizon: self.horizon,
            lambda: self.lambda,
            epsilon: self.epsilon,
            seed: self.seed,
            trials: self.trials,
            observe_every: self.observe_every,
            bandwidth: self.bandwidth,
            median_rule: self
                .median_rule
                .as_deref()
                .map(|r| r.parse().map_err(|e: Error| Error::config("median_rule", e.to_string())))
                .transpose()?,
            h_floor: self.h_floor,
            ksd_h: self.ksd_h,
            ksd_estimator: self.ksd_estimator.as_deref().map(estimator).transpose()?,
            timings: self.timings,
            rwm_std: self.rwm_std,
            rwm_tune_rounds: self.rwm_tune_rounds,
            rwm_tune_batch: self.rwm_tune_batch,
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

fn print_summary(record: &RunRecord) {
    let c = &record.config;
    println!(
        "{} on {}: J={} N={} T={} lambda={} epsilon={} trials={} ({} stable)",
        c.sampler,
        c.target,
        c.particles,
        c.steps,
        c.horizon,
        c.lambda,
        c.epsilon,
        c.trials,
        record.stable_trials()
    );
    println!("{:>6} {:>10} {:>12} {:>12}", "step", "t", "ksd_target", "ksd_tempered");
    for s in &record.summary {
        println!(
            "{:>6} {:>10.4} {:>12} {:>12}",
            s.step,
            s.t,
            fmt_opt(s.ksd_target),
            fmt_opt(s.ksd_tempered)
        );
    }
}

/// Reads a CSV of particles; a first row that does not parse as numbers
/// is taken as a header.
fn read_samples(path: &Path) -> Result<Ensemble> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::InvalidParameter(format!(
                    "{}: row {}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        };
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: values.len(),
                })
            }
            _ => {}
        }
        data.extend(values);
        rows += 1;
    }
    let dim = dim.ok_or_else(|| Error::InvalidParameter(format!("{}: no samples", path.display())))?;
    Ensemble::from_rows(data, rows, dim)
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Run { run, out } => {
            let (cfg, _) = parse_config(run.config.as_deref(), &run.section()?)?;
            let record = run_experiment(&cfg)?;
            if let Some(path) = out {
                write_record(&record, &path)?;
            }
            print_summary(&record);
            Ok(record.all_stable())
        }
        Command::Sweep { run, out_dir } => {
            let (cfg, file) = parse_config(run.config.as_deref(), &run.section()?)?;
            let grid = file
                .sweep
                .ok_or_else(|| Error::config("sweep", "config has no [sweep] section"))?;
            let result = sweep(&cfg, &grid)?;
            if let Some(dir) = &out_dir {
                for (i, rec) in result.records.iter().enumerate() {
                    write_record(rec, &dir.join(format!("point_{i:03}.csv")))?;
                }
                let best = serde_json::to_string_pretty(&result.best).map_err(std::io::Error::from)?;
                std::fs::write(dir.join("best.json"), best + "\n")?;
            }
            println!("{:>6} {:>6} {:>10} {:>10} {:>8} {:>12}", "J", "N", "lambda", "epsilon", "T", "final_ksd");
            for b in &result.best {
                let p = b.point;
                println!(
                    "{:>6} {:>6} {:>10} {:>10} {:>8} {:>12.6}",
                    p.particles, p.steps, p.lambda, p.epsilon, p.horizon, b.final_ksd
                );
            }
            Ok(result.records.iter().all(RunRecord::all_stable))
        }
        Command::Bench {
            run,
            warmup,
            repeats,
        } => {
            let (cfg, file) = parse_config(run.config.as_deref(), &run.section()?)?;
            let mut bench = file.bench.unwrap_or_default();
            if let Some(w) = warmup {
                bench.warmup = w;
            }
            if let Some(r) = repeats {
                bench.repeats = r;
            }
            let BenchConfig { warmup, repeats } = bench;
            let res = bench_step(&cfg, &bench)?;
            println!(
                "{} on {} J={}: median step {} ns over {repeats} runs ({warmup} warm-up)",
                cfg.sampler, cfg.target, cfg.particles, res.median_ns
            );
            Ok(true)
        }
        Command::Ksd {
            samples,
            target,
            tempered,
            h,
            estimator: est,
        } => {
            let target = target_from_name(&target)?;
            let ens = read_samples(&samples)?;
            if ens.dim() != target.dim() {
                return Err(Error::DimensionMismatch {
                    expected: target.dim(),
                    found: ens.dim(),
                });
            }
            let cfg = KsdConfig {
                h,
                estimator: estimator(&est)?,
            };
            let value = match tempered {
                Some(t) => ksd_tempered(&ens, &*target, t, &cfg)?,
                None => ksd_target(&ens, &*target, &cfg)?,
            };
            println!("{value}");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some trials were unstable");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
