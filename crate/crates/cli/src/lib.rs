//! Command-line driver: configs, checkpoints, the pretrain / finetune /
//! eval pipeline, sweeps, reports and the gradient oracle suite.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod fsio;
pub mod oracles;
pub mod report;
pub mod sweep;
pub mod synth;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::commands::{run_eval, run_finetune, run_pretrain, CHECKPOINT_FILE};
use crate::config::{RunConfig, OUTPUT_ROOT_ENV};
use crate::error::{CliError, CliResult};
use crate::sweep::SweepGrid;

#[derive(Debug, Parser)]
#[command(name = "varmae", version, about = "Variational masked autoencoder pre-training for domain-adaptive language understanding")]
pub struct Cli {
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root for relative output directories (default: the config's directory).
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Continual pre-training on the domain corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tunes every configured task from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Default: `<output_dir>/pretrained.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Re-scores task checkpoints (a file or a directory) without training.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Default: `<output_dir>/tasks`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretrain + finetune for every cell of a grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Runs the gradient, KL, masking, loss and protocol oracles.
    Gradcheck,
    /// Prints CSV outputs as aligned tables.
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Writes a synthetic corpus, tasks, config and sweep grids.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "tiny")]
        scale: synth::Scale,
    },
}

impl Cli {
    fn load(&self, path: &Path) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(path, self.output_root.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

/// Runs one command, printing progress to stdout.
pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Pretrain { config } => {
            let cfg = cli.load(config)?;
            let out = run_pretrain(&cfg)?;
            println!("wrote {}", out.checkpoint.display());
            for (k, v) in &out.manifest.final_metrics {
                println!("  {k} = {v}");
            }
        }
        Command::Finetune { config, checkpoint } => {
            let cfg = cli.load(config)?;
            let ck = checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE));
            let out = run_finetune(&cfg, &ck)?;
            for s in &out.scores {
                println!("{:<12} {} = {:.4} (mean of {} seeds)", s.task, s.metric, s.mean, s.per_seed.len());
            }
        }
        Command::Eval { config, checkpoint } => {
            let cfg = cli.load(config)?;
            let ck = checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join("tasks"));
            let out = run_eval(&cfg, &ck)?;
            println!("wrote {} ({} rows)", out.csv_path.display(), out.rows.len());
        }
        Command::Sweep { grid } => {
            let (g, mut base) = SweepGrid::load(grid, cli.output_root.as_deref())?;
            if let Some(s) = cli.seed {
                base.seed = s;
            }
            let (cells, path) = sweep::run_sweep(&g, &base, |c| match &c.result {
                Ok(scores) => println!(
                    "{}={} {}: average {:.4}",
                    g.axis.name(),
                    c.value,
                    c.objective,
                    sweep::average(scores).unwrap_or(f64::NAN)
                ),
                Err(e) => println!("{}={} {}: FAILED {e}", g.axis.name(), c.value, c.objective),
            })?;
            println!("wrote {}", path.display());
            let failed = cells.iter().filter(|c| c.result.is_err()).count();
            if failed > 0 {
                return Err(CliError::Runtime(anyhow::anyhow!("{failed} of {} sweep cells failed", cells.len())));
            }
        }
        Command::Gradcheck => {
            let outcomes = oracles::suite(cli.seed.unwrap_or(1));
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed > 0 {
                return Err(CliError::Runtime(anyhow::anyhow!("{failed} oracle(s) failed")));
            }
        }
        Command::Report { paths } => {
            for p in report::collect_csvs(paths)? {
                println!("{}", report::render_file(&p)?);
            }
        }
        Command::Synth { out, scale } => {
            let ws = synth::generate(out, *scale, cli.seed.unwrap_or(1))?;
            println!("wrote {}", ws.config.display());
        }
    }
    Ok(())
}
