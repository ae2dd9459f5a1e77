//! Command-line front end: `run`, `sweep` and `partition`.
//!
//! Exit codes: 0 on success, 1 when the run itself fails, 2 for invalid
//! invocations or configurations.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::write_atomic;
use crate::config::{Algorithm, ExperimentConfig};
use crate::error::Result;
use crate::metrics::{self, final_accuracy_stats, SweepAxis};
use crate::protocol::{write_checkpoint, RunOptions};

pub const OUT_DIR_ENV: &str = "FEDPER_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "fedper", version, about = "Federated training with client-private personalization layers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one federation and write its history and checkpoints.
    Run(CommonArgs),
    /// Re-run the experiment for each value along one axis.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated axis values, e.g. `0,1,2` or `fedavg,fedper`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Skip the averaging baseline run at each point.
        #[arg(long)]
        no_baseline: bool,
    },
    /// Write the client → sample-index manifest without training.
    Partition(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set rounds=5 --set partition.k=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (for `partition`, a `.json` path is used as the file).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_path(&self.config)?;
        cfg.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
            cfg.validate()?;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        if let Some(dir) = &cfg.output.dir {
            return dir.clone();
        }
        let root = std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("fedper_out"));
        root.join(&cfg.run_id)
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Sweep {
            common,
            axis,
            values,
            no_baseline,
        } => cmd_sweep(&common, axis, &values, !no_baseline),
        Command::Partition(args) => cmd_partition(&args),
    }
}

fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("config.json"), cfg.to_json()?.as_bytes())
}

pub fn cmd_run(args: &CommonArgs) -> Result<()> {
    let cfg = args.load()?;
    let out = args.out_dir(&cfg);
    echo_config(&cfg, &out)?;
    let opts = RunOptions {
        threads: args.threads,
        checkpoint_every: cfg.output.checkpoint_every,
        checkpoint_dir: Some(out.join("checkpoint")),
    };
    let outcome = cfg.execute(&opts)?;
    for &format in &cfg.output.formats {
        let path = out.join(format!("{}_history.{}", cfg.run_id, format.extension()));
        metrics::emit_history(&outcome.history, format, &path)?;
    }
    write_checkpoint(
        &out.join("checkpoint").join("final"),
        outcome.spec.k_personal,
        &outcome.base,
        &outcome.personal,
    )?;
    if cfg.algorithm == Algorithm::Fedper {
        let log = serde_json::to_string_pretty(&outcome.message_log)? + "\n";
        write_atomic(&out.join("message_log.json"), log.as_bytes())?;
    }
    let stats = final_accuracy_stats(&outcome.history)?;
    println!(
        "{}: {} rounds, final test accuracy mean {:.4} std {:.4} (min {:.4}, max {:.4}) -> {}",
        cfg.run_id,
        cfg.rounds,
        stats.mean,
        stats.std,
        stats.min,
        stats.max,
        out.display()
    );
    Ok(())
}

pub fn cmd_sweep(args: &CommonArgs, axis: SweepAxis, raw_values: &[String], with_baseline: bool) -> Result<()> {
    let cfg = args.load()?;
    let values = raw_values
        .iter()
        .map(|v| axis.parse_value(v))
        .collect::<Result<Vec<_>>>()?;
    let out = args.out_dir(&cfg);
    echo_config(&cfg, &out)?;
    let opts = RunOptions {
        threads: args.threads,
        ..RunOptions::default()
    };
    let result = metrics::run_sweep(&cfg, axis, &values, &opts, with_baseline)?;
    for &format in &cfg.output.formats {
        metrics::emit_sweep(&result, &cfg.run_id, format, &out)?;
    }
    for p in &result.points {
        match p.gap() {
            Some(gap) => println!(
                "{}={}: mean {:.4} std {:.4} gap {:+.4}",
                axis.name(),
                p.value,
                p.stats.mean,
                p.stats.std,
                gap
            ),
            None => println!("{}={}: mean {:.4} std {:.4}", axis.name(), p.value, p.stats.mean, p.stats.std),
        }
    }
    Ok(())
}

pub fn cmd_partition(args: &CommonArgs) -> Result<()> {
    let cfg = args.load()?;
    let manifest = cfg.partition_manifest()?;
    let path = match &args.out {
        Some(p) if p.extension().is_some_and(|e| e == "json") => p.clone(),
        _ => args.out_dir(&cfg).join(format!("{}_partition.json", cfg.run_id)),
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    write_atomic(&path, text.as_bytes())?;
    println!("{} clients -> {}", manifest.num_clients, path.display());
    Ok(())
}

/// Parses `args`, runs the command, reports errors on stderr and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fedper: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}
