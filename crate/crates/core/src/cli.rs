//! Command-line front end: train, sample, evaluate, oracle, export.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnf::{self, DivergenceMode, OdeConfig};
use crate::config::{self, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, EvalReport};
use crate::field::VectorFieldNet;
use crate::reference::mh_sample;
use crate::trainer::{Algorithm, MetricsRow, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Overrides the output directory of `train`.
pub const OUTPUT_DIR_ENV: &str = "EWFM_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "ewfm", version, about = "Energy-weighted flow matching for Boltzmann sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a flow from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["ewfm", "iewfm", "aewfm"])]
        algo: String,
        #[arg(long, env = OUTPUT_DIR_ENV)]
        output_dir: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        with_logdensity: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        ode_steps: usize,
    },
    /// Compare a checkpoint against reference samples.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Run manifest providing eval_count; defaults to manifest.toml next
        /// to the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Metropolis-Hastings reference samples for the configured system.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a built-in preset config.
    Export {
        #[arg(long, value_parser = config::PRESETS)]
        preset: String,
        /// Prints to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

// input and configuration problems are usage errors; the rest are runtime
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Csv(_) | Error::InvalidInput(_) => {
                Self::usage(e)
            }
            _ => Self::runtime(e),
        }
    }
}

type CliResult = std::result::Result<(), CliError>;

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Train {
            config,
            algo,
            output_dir,
        } => cmd_train(&config, &algo, output_dir.as_deref()),
        Command::Sample {
            checkpoint,
            n,
            out,
            with_logdensity,
            seed,
            ode_steps,
        } => cmd_sample(&checkpoint, n, &out, with_logdensity, seed, ode_steps),
        Command::Evaluate {
            checkpoint,
            reference,
            config,
            manifest,
            out_dir,
        } => cmd_evaluate(&checkpoint, &reference, &config, manifest.as_deref(), out_dir.as_deref()),
        Command::Oracle { config, out } => cmd_oracle(&config, &out),
        Command::Export { preset, out } => cmd_export(&preset, out.as_deref()),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// Contents of `manifest.toml` in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub algo: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config_file: String,
    pub proposal_source: String,
    pub refreshes: usize,
    pub eval_count: u64,
    pub epochs: usize,
    pub steps: usize,
    pub skipped_steps: usize,
    pub rejected_steps: usize,
    pub final_checkpoint: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn load_config(path: &Path) -> std::result::Result<(RunConfig, String), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let cfg = RunConfig::from_toml(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok((cfg, text))
}

fn cmd_train(config_path: &Path, algo: &str, output_dir: Option<&Path>) -> CliResult {
    let (cfg, text) = load_config(config_path)?;
    let algorithm: Algorithm = algo.parse().map_err(CliError::usage)?;
    if algorithm == Algorithm::Aewfm && cfg.anneal.is_none() {
        return Err(CliError::usage("--algo aewfm requires an [anneal] section"));
    }
    let dir = output_dir.map_or_else(|| PathBuf::from(&cfg.output_dir), Path::to_path_buf);
    fs::create_dir_all(&dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
    fs::write(dir.join("config.toml"), &text).map_err(CliError::usage)?;

    let system = cfg.system.build()?;
    let mut net = cfg.init_net()?;
    let seed = cfg.seed;
    let every = cfg.checkpoint_every;
    let ckpt_dir = dir.clone();
    let mut trainer = Trainer::new(&system, cfg.train_config(), algorithm).with_epoch_hook(Box::new(
        move |epoch: usize, net: &VectorFieldNet| {
            if every > 0 && epoch.is_multiple_of(every) {
                fs::write(ckpt_dir.join(format!("checkpoint_{epoch:06}.txt")), net.to_checkpoint(seed))?;
            }
            Ok(())
        },
    ));
    if algorithm == Algorithm::Aewfm {
        trainer = trainer.with_schedule(cfg.anneal.clone().expect("checked above"));
    }
    info!("training {algorithm} for {} epochs into {}", cfg.train.epochs, dir.display());
    let outcome = trainer.run(&mut net).map_err(|e| match e {
        Error::Config(_) => CliError::usage(e),
        other => CliError::runtime(other),
    })?;

    let write = |name: &str, body: String| fs::write(dir.join(name), body).map_err(CliError::runtime);
    write_metrics(&dir.join("metrics.csv"), &outcome.metrics).map_err(CliError::runtime)?;
    let mut buffers = String::from("generation,epoch,temperature,ess,size\n");
    for b in &outcome.buffers {
        buffers += &format!("{},{},{},{},{}\n", b.generation, b.epoch, b.temperature, b.ess, b.size);
    }
    write("buffers.csv", buffers)?;
    let final_name = "checkpoint_final.txt";
    write(final_name, net.to_checkpoint(seed))?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        algo: algorithm.to_string(),
        seed,
        config_sha256: sha256_hex(text.as_bytes()),
        config_file: "config.toml".into(),
        proposal_source: outcome.proposal_source.to_string(),
        refreshes: outcome.refreshes,
        eval_count: outcome.eval_count,
        epochs: cfg.train.epochs,
        steps: outcome.metrics.len(),
        skipped_steps: outcome.skipped_steps,
        rejected_steps: outcome.rejected_steps,
        final_checkpoint: final_name.into(),
    };
    write("manifest.toml", toml::to_string(&manifest).map_err(CliError::runtime)?)?;
    info!(
        "done: {} refreshes, {} energy evaluations",
        outcome.refreshes, outcome.eval_count
    );
    Ok(())
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MetricsRow::HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes samples as CSV with header `x_0,...,x_{d-1}[,log_q]`.
pub fn write_samples(path: &Path, dim: usize, samples: &[Vec<f64>], log_q: Option<&[f64]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dim).map(|i| format!("x_{i}")).collect();
    if log_q.is_some() {
        header.push("log_q".into());
    }
    w.write_record(&header)?;
    for (i, x) in samples.iter().enumerate() {
        let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        if let Some(l) = log_q {
            row.push(l[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the `x_*` columns of a samples CSV.
pub fn read_samples(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let cols: Vec<usize> = r
        .headers()?
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("x_"))
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no x_ columns", path.display())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let x = cols
            .iter()
            .map(|&c| {
                rec[c]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(x);
    }
    Ok(out)
}

fn load_checkpoint(path: &Path) -> std::result::Result<(VectorFieldNet, u64), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    VectorFieldNet::from_checkpoint(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn cmd_sample(checkpoint: &Path, n: usize, out: &Path, with_logdensity: bool, seed: u64, ode_steps: usize) -> CliResult {
    let (net, _) = load_checkpoint(checkpoint)?;
    let ode = OdeConfig::new(ode_steps)?;
    let d = net.dim();
    if with_logdensity {
        let pairs = cnf::sample_with_logdensity(&net, n, &ode, DivergenceMode::auto(d, 1), seed).map_err(CliError::runtime)?;
        let (xs, lq): (Vec<Vec<f64>>, Vec<f64>) = pairs.into_iter().unzip();
        write_samples(out, d, &xs, Some(&lq))?;
    } else {
        let xs = cnf::sample_forward(&net, n, &ode, seed).map_err(CliError::runtime)?;
        write_samples(out, d, &xs, None)?;
    }
    Ok(())
}

fn cmd_evaluate(
    checkpoint: &Path,
    reference: &Path,
    config_path: &Path,
    manifest: Option<&Path>,
    out_dir: Option<&Path>,
) -> CliResult {
    let (cfg, _) = load_config(config_path)?;
    let (net, _) = load_checkpoint(checkpoint)?;
    if !reference.exists() {
        return Err(CliError::usage(format!("reference file {} not found", reference.display())));
    }
    let refs = read_samples(reference)?;
    let system = cfg.system.build_for_eval()?;
    if net.dim() != system.dim() || refs.iter().any(|x| x.len() != net.dim()) {
        return Err(CliError::usage(format!(
            "dimension mismatch: checkpoint {}, system {}, reference {}",
            net.dim(),
            system.dim(),
            refs.first().map_or(0, |x| x.len())
        )));
    }
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    let manifest_path = manifest.map_or_else(|| parent.join("manifest.toml"), Path::to_path_buf);
    let eval_count = if manifest_path.exists() {
        Manifest::load(&manifest_path)?.eval_count
    } else {
        warn!("no manifest at {}; eval_count reported as 0", manifest_path.display());
        0
    };
    let (report, hist) = evaluate_model(&system, &net, &refs, &cfg.eval, eval_count).map_err(CliError::runtime)?;
    let dir = out_dir.unwrap_or(parent);
    fs::create_dir_all(dir).map_err(CliError::usage)?;
    let write = |name: &str, body: String| fs::write(dir.join(name), body).map_err(CliError::runtime);
    write("eval_report.txt", report.to_kv())?;
    write("eval_report.csv", format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row()))?;
    let hist_csv = |rows: &[(f64, f64, f64)]| {
        let mut s = String::from("bin_center,density_a,density_b\n");
        for (c, a, b) in rows {
            s += &format!("{c},{a},{b}\n");
        }
        s
    };
    write("energy_hist.csv", hist_csv(&hist.energy))?;
    if let Some(dist) = &hist.distance {
        write("dist_hist.csv", hist_csv(dist))?;
    }
    print!("{}", report.to_kv());
    Ok(())
}

fn cmd_oracle(config_path: &Path, out: &Path) -> CliResult {
    let (cfg, _) = load_config(config_path)?;
    let mh = cfg
        .oracle
        .as_ref()
        .ok_or_else(|| CliError::usage("config has no [oracle] section"))?;
    let system = cfg.system.build_for_eval()?;
    let result = mh_sample(&system, mh).map_err(CliError::runtime)?;
    write_samples(out, system.dim(), &result.samples, None)?;
    let mut summary = format!(
        "acceptance_rate = {}\nn_samples = {}\neval_count = {}\n",
        result.acceptance_rate,
        result.samples.len(),
        system.eval_count()
    );
    if let Some(w) = &result.warning {
        summary += &format!("warning = {w:?}\n");
    }
    let mut summary_path = out.as_os_str().to_owned();
    summary_path.push(".summary.txt");
    fs::write(&summary_path, &summary).map_err(CliError::runtime)?;
    print!("{summary}");
    Ok(())
}

fn cmd_export(name: &str, out: Option<&Path>) -> CliResult {
    let text = config::preset(name)?.to_toml()?;
    match out {
        Some(p) => fs::write(p, text).map_err(CliError::usage)?,
        None => print!("{text}"),
    }
    Ok(())
}
