//! `coca`: synthetic data generation, source training, K selection,
//! target adaptation and evaluation over precomputed feature stores.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 missing validation split, 4 class-count mismatch, 5 misaligned ids.

mod commands;
mod config;
mod error;
mod table;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use commands::{AdaptArgs, EvalArgs, GenSynthArgs, SelectKArgs, TrainSourceArgs};
use config::{expand, Point, RunConfig, Sweep, SEED_ENV};
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "coca", version, about = "Source-free universal domain adaptation over frozen embeddings")]
struct Cli {
    /// Run seed; defaults to $COCA_SEED, then the config file, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run once per value, suffixing outputs with key-value; repeatable.
    #[arg(long, global = true, value_name = "KEY=V1,V2,...")]
    sweep: Vec<String>,
    /// Sweep points run in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Print tables as CSV.
    #[arg(long, global = true)]
    csv: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic source/target benchmark.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a source head on labeled source features.
    TrainSource {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        text: PathBuf,
        /// linear_probe, adapter or cross_modal.
        #[arg(long)]
        model: Option<String>,
        /// Manifest supplying class names.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the K candidates for a target store.
    SelectK {
        #[arg(long)]
        target: PathBuf,
        /// Number of source classes.
        #[arg(long)]
        cs: usize,
        /// silhouette, ch or db.
        #[arg(long)]
        method: Option<String>,
    },
    /// Adapt a source head to a target store and predict.
    Adapt {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        text: PathBuf,
        /// Manifest whose toy encoder produces masked views.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Drop the mask consistency loss.
        #[arg(long)]
        no_mieci: bool,
        /// Predict from the textual prototypes without training.
        #[arg(long)]
        zero_shot: bool,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a ground-truth sidecar.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        hist_bins: Option<usize>,
        /// Output directory; defaults to the directory of --pred.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth { .. } => "gen-synth",
            Command::TrainSource { .. } => "train-source",
            Command::SelectK { .. } => "select-k",
            Command::Adapt { .. } => "adapt",
            Command::Eval { .. } => "eval",
        }
    }

    /// Config keys set by subcommand flags.
    fn flag_pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        match self {
            Command::TrainSource { model: Some(m), .. } => v.push(("model", m.clone())),
            Command::SelectK { method: Some(m), .. } => v.push(("k_method", m.clone())),
            Command::Adapt {
                no_mieci,
                zero_shot,
                tau,
                mask_ratio,
                ..
            } => {
                if *no_mieci {
                    v.push(("mieci", "false".into()));
                }
                if *zero_shot {
                    v.push(("zero_shot", "true".into()));
                }
                if let Some(t) = tau {
                    v.push(("tau", t.to_string()));
                }
                if let Some(r) = mask_ratio {
                    v.push(("mask_ratio", r.to_string()));
                }
            }
            Command::Eval { hist_bins: Some(b), .. } => v.push(("hist_bins", b.to_string())),
            _ => {}
        }
        v
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.set("seed", &s).map_err(|e| e.context(SEED_ENV))?;
    }
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    for (k, v) in cli.command.flag_pairs() {
        cfg.set(k, &v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_point(cli: &Cli, point: &Point) -> Result<String, CliError> {
    let csv = cli.csv;
    match &cli.command {
        Command::GenSynth { out } => commands::gen_synth(point, &GenSynthArgs { out: out.clone() }, csv),
        Command::TrainSource {
            source,
            text,
            manifest,
            out,
            ..
        } => commands::train_source_cmd(
            point,
            &TrainSourceArgs {
                source: source.clone(),
                text: text.clone(),
                manifest: manifest.clone(),
                out: out.clone(),
            },
            csv,
        ),
        Command::SelectK { target, cs, .. } => commands::select_k_cmd(
            point,
            &SelectKArgs {
                target: target.clone(),
                cs: *cs,
            },
            csv,
        ),
        Command::Adapt {
            target,
            head,
            text,
            manifest,
            out,
            ..
        } => commands::adapt_cmd(
            point,
            &AdaptArgs {
                target: target.clone(),
                head: head.clone(),
                text: text.clone(),
                manifest: manifest.clone(),
                out: out.clone(),
            },
            csv,
        ),
        Command::Eval {
            pred,
            truth,
            manifest,
            out,
            ..
        } => commands::eval_cmd(
            point,
            &EvalArgs {
                pred: pred.clone(),
                truth: truth.clone(),
                manifest: manifest.clone(),
                out: out.clone(),
            },
            csv,
        ),
    }
}

/// Runs every point on up to `jobs` threads, returning results in point order.
fn run_all(cli: &Cli, points: &[Point]) -> Vec<Result<String, CliError>> {
    let jobs = cli.jobs.clamp(1, points.len().max(1));
    if jobs == 1 {
        return points.iter().map(|p| run_point(cli, p)).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<String, CliError>>>> = Mutex::new(vec![None; points.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let r = run_point(cli, &points[i]);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every point ran"))
        .collect()
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let base = base_config(cli)?;
    let sweeps = cli.sweep.iter().map(|s| Sweep::parse(s)).collect::<Result<Vec<_>, _>>()?;
    if cli.jobs == 0 {
        return Err(CliError::config("--jobs must be at least 1"));
    }
    let points = expand(&base, &sweeps)?;
    let mut stdout = std::io::stdout().lock();
    let mut first_err: Option<CliError> = None;
    for (point, result) in points.iter().zip(run_all(cli, &points)) {
        match result {
            Ok(text) => stdout.write_all(text.as_bytes())?,
            Err(e) => {
                let e = if point.label.is_empty() { e } else { e.context(&point.label) };
                match &first_err {
                    None => first_err = Some(e),
                    Some(_) => eprintln!("coca {}: {e}", cli.command.name()),
                }
            }
        }
    }
    stdout.flush()?;
    first_err.map_or(Ok(()), Err)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("coca {}: {e}", cli.command.name());
            ExitCode::from(u8::try_from(e.code).unwrap_or(1))
        }
    }
}
