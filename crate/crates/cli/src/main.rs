//! snapvit: single-shot structured pruning of vision transformers.
//!
//! `prune` scores every attention head and FFN neuron, searches cross-block
//! correlation factors, and writes one global ranking; `extract` cuts a
//! sub-network at any sparsity from that ranking without re-running the
//! search; `eval` reports fitness / k-NN metrics or a sparsity-sweep CSV;
//! `flops` prints theoretical compute.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::EvalMode;
use config::{parse_grid, RunConfig};
use snapvit_core::pruner::PruneBasis;
use snapvit_core::Result;

#[derive(Parser)]
#[command(name = "snapvit", version, about = "Elastic structured pruning of vision transformers")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores). The
    /// SNAPVIT_THREADS environment variable takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Score structures, search cross-block factors, write a ranking artifact.
    Prune {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's search seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of search iterations.
        #[arg(long)]
        iters: Option<usize>,
        /// Override the sparsity grid, e.g. "0.1,0.3,0.5,0.6".
        #[arg(long)]
        grid: Option<String>,
        /// Override the PCA dimension used by the fitness score.
        #[arg(long)]
        pca_k: Option<usize>,
        /// Override both the gradient and fitness sample counts.
        #[arg(long)]
        samples: Option<usize>,
        /// Ranking artifact path (default: the config's `out`, else ranking.snaprank).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cut one sub-network from a ranking artifact into a compacted checkpoint.
    Extract {
        /// Ranking artifact written by `prune`.
        ranking: PathBuf,
        /// Target sparsity in [0, 1).
        #[arg(long)]
        sparsity: f64,
        /// Budget basis (default: the ranking's search basis).
        #[arg(long)]
        basis: Option<PruneBasis>,
        /// Update surviving weights on calibration data before compaction.
        #[arg(long)]
        correct: bool,
        /// Calibration sample count for --correct.
        #[arg(long)]
        samples: Option<usize>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics for a checkpoint, or a sparsity-sweep CSV from a ranking.
    Eval {
        /// Checkpoint to evaluate (default: the config's own model).
        checkpoint: Option<PathBuf>,
        /// Run configuration naming the reference model and dataset.
        #[arg(long)]
        config: PathBuf,
        /// knn | fitness (ignored when --ranking sweeps).
        #[arg(long, default_value = "fitness")]
        mode: EvalMode,
        /// Sweep this ranking over the grid and emit CSV instead.
        #[arg(long)]
        ranking: Option<PathBuf>,
        /// Sweep grid override, e.g. "0.0,0.1,0.2".
        #[arg(long)]
        grid: Option<String>,
        /// Budget basis for sweep masks.
        #[arg(long)]
        basis: Option<PruneBasis>,
        /// Evaluation sample count (default: the config's fitness samples).
        #[arg(long)]
        samples: Option<usize>,
        /// PCA dimension override for the fitness score.
        #[arg(long)]
        pca_k: Option<usize>,
        /// Also write metrics JSON / sweep CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Theoretical FLOPs report for a model preset, run config, or checkpoint.
    Flops {
        /// Preset name: toy, vit-s16, vit-b16, vit-l16.
        model: Option<String>,
        /// Run configuration whose model to report on.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to report on (wins over --config and the preset).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn thread_count(flag: Option<usize>) -> Option<usize> {
    match std::env::var("SNAPVIT_THREADS") {
        Ok(v) => v.parse().ok().or(flag),
        Err(_) => flag,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.threads) {
        // Ignore the error: the pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match cli.cmd {
        Cmd::Prune { config, seed, iters, grid, pca_k, samples, out } => {
            let mut rc = RunConfig::from_file(&config)?;
            if let Some(s) = seed {
                rc.seed = s;
            }
            if let Some(t) = iters {
                rc.iterations = t;
            }
            if let Some(g) = grid {
                rc.grid = parse_grid(&g)?;
            }
            if let Some(k) = pca_k {
                rc.pca_k = k;
            }
            if let Some(n) = samples {
                rc.n_samples_grad = n;
                rc.n_samples_fitness = n;
            }
            commands::cmd_prune(&rc, out.as_deref())?;
            Ok(())
        }
        Cmd::Extract { ranking, sparsity, basis, correct, samples, out } => {
            commands::cmd_extract(&ranking, sparsity, basis, correct, samples, &out)
        }
        Cmd::Eval { checkpoint, config, mode, ranking, grid, basis, samples, pca_k, out } => {
            let rc = RunConfig::from_file(&config)?;
            let grid = grid.map(|g| parse_grid(&g)).transpose()?;
            match ranking {
                Some(r) => commands::cmd_eval_sweep(
                    &rc,
                    &r,
                    grid.as_deref(),
                    basis,
                    samples,
                    pca_k,
                    out.as_deref(),
                ),
                None => commands::cmd_eval(
                    &rc,
                    checkpoint.as_deref(),
                    &mode,
                    samples,
                    pca_k,
                    out.as_deref(),
                ),
            }
        }
        Cmd::Flops { model, config, checkpoint, out } => {
            let rc = config.map(|p| RunConfig::from_file(&p)).transpose()?;
            commands::cmd_flops(model.as_deref(), rc.as_ref(), checkpoint.as_deref(), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
