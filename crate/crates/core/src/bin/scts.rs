//! `scts` command-line front end.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on data errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use scts_core::bench::{
    emit_series, run_benchmark, run_inference_benchmark, simulate, write_inference_report, write_report,
    BenchmarkConfig, BenchmarkReport,
};
use scts_core::inference::{Grid, RerandomizationConfig, Rerandomizer};
use scts_core::policy::{DesignKind, ExperimentResult, SCHEMA_VERSION};
use scts_core::{Result, SctsError};

#[derive(Parser)]
#[command(name = "scts", version, about = "Synthetically controlled Thompson sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one design on one benchmark instance and store the history as JSON.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "scts")]
        design: DesignKind,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        instance: usize,
        /// Defaults to <output_dir>/history.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regret / RMSE / sign-accuracy benchmark.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the instance count of the config.
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Coverage / power table of the re-randomization test.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Re-randomization test of H_tau on a stored history.
    Test {
        history: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        tau: f64,
        #[command(flatten)]
        rr: RrArgs,
    },
    /// Confidence set by test inversion on a stored history.
    Ci {
        history: PathBuf,
        #[command(flatten)]
        rr: RrArgs,
        #[arg(long, allow_hyphen_values = true, requires_all = ["hi", "step"])]
        lo: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        hi: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Re-emit plot series from a stored benchmark report.json.
    EmitPlots {
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RrArgs {
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    two_sided: bool,
}

impl RrArgs {
    fn config(&self, grid: Option<Grid>) -> RerandomizationConfig {
        RerandomizationConfig {
            k: self.k,
            alpha: self.alpha,
            grid,
            base_seed: self.seed,
            two_sided: self.two_sided,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<BenchmarkConfig> {
    match path {
        Some(p) => BenchmarkConfig::from_file(p),
        None => Ok(BenchmarkConfig::desk_scale()),
    }
}

fn load_history(path: &Path) -> Result<ExperimentResult> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SctsError::Data(format!("cannot read {}: {e}", path.display())))?;
    ExperimentResult::from_json(&text)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

#[derive(Serialize)]
struct Envelope<T> {
    schema_version: u32,
    history: String,
    #[serde(flatten)]
    body: T,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            design,
            tau,
            instance,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let result = simulate(&cfg, design, tau, instance)?;
            let out = out.unwrap_or_else(|| cfg.resolve_output_dir().join("history.json"));
            write_json(&out, &result)?;
            let fit = result.final_fit.as_ref();
            println!(
                "design={} tau*={} treated={}/{} tau_hat={:.6} normalized_regret={:.4}",
                design.as_str(),
                result.tau_star.unwrap_or(f64::NAN),
                result.treated_set.len(),
                result.horizon(),
                fit.map_or(f64::NAN, |f| f.tau_hat),
                result.regret.as_ref().map_or(f64::NAN, |r| r.normalized()),
            );
            println!("wrote {}", out.display());
        }
        Command::Bench { config, instances } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(n) = instances {
                cfg.instances = n;
            }
            let report = run_benchmark(&cfg)?;
            for row in &report.rows {
                println!(
                    "{:<10} tau*={:+} regret={:.4} rmse_rel={:.4} sign_acc={:.3}",
                    row.design.as_str(),
                    row.tau_star,
                    row.normalized_regret_mean,
                    row.rmse_relative,
                    row.sign_accuracy,
                );
            }
            print_paths(&write_report(&report, &cfg.resolve_output_dir())?);
        }
        Command::Infer { config, instances } => {
            let mut cfg = load_config(config.as_deref())?;
            let section = cfg.inference.get_or_insert_with(Default::default);
            if let Some(n) = instances {
                section.instances = Some(n);
            }
            let report = run_inference_benchmark(&cfg)?;
            for row in &report.rows {
                println!(
                    "snr={:<5} coverage={:.3} power={:.3} empty_sets={}",
                    row.snr, row.coverage, row.power, row.empty_sets
                );
            }
            print_paths(&write_inference_report(&report, &cfg.resolve_output_dir())?);
        }
        Command::Test { history, tau, rr } => {
            let result = load_history(&history)?;
            let report = Rerandomizer::new(&result)?.test(tau, &rr.config(None))?;
            println!(
                "tau={} statistic={:.6} p={:.4} rejected={}",
                tau, report.statistic, report.p_value, report.rejected
            );
            let out = history.with_extension("test.json");
            write_json(
                &out,
                &Envelope {
                    schema_version: SCHEMA_VERSION,
                    history: history.display().to_string(),
                    body: report,
                },
            )?;
            println!("wrote {}", out.display());
        }
        Command::Ci {
            history,
            rr,
            lo,
            hi,
            step,
        } => {
            let result = load_history(&history)?;
            let grid = match (lo, hi, step) {
                (Some(lo), Some(hi), Some(step)) => Some(Grid { lo, hi, step }),
                _ => None,
            };
            let set = Rerandomizer::new(&result)?.invert(&rr.config(grid))?;
            match set.hull {
                Some((lo, hi)) => println!("accepted {} of {} points, hull [{lo:.6}, {hi:.6}]", set.accepted.len(), set.p_values.len()),
                None => println!("empty set: every grid point rejected"),
            }
            let out = history.with_extension("ci.json");
            write_json(
                &out,
                &Envelope {
                    schema_version: SCHEMA_VERSION,
                    history: history.display().to_string(),
                    body: set,
                },
            )?;
            println!("wrote {}", out.display());
        }
        Command::EmitPlots { report, out } => {
            let text = std::fs::read_to_string(&report)
                .map_err(|e| SctsError::Data(format!("cannot read {}: {e}", report.display())))?;
            let parsed: BenchmarkReport = serde_json::from_str(&text)?;
            let dir = out.unwrap_or_else(|| parsed.config.resolve_output_dir());
            print_paths(&emit_series(&parsed, &dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
