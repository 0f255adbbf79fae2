//! Command-line surface: generate, prepare, train, evaluate, ablate and
//! cost-model commands driven by one JSON config file. Flags override
//! config values.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msgat::run::{cmd_ablate, cmd_eval, cmd_prepare, cmd_synth, cmd_train, Partition, RunConfig};
use msgat::train::{estimate_cost, format_cost_table, AblationGrid};
use msgat::Error;

#[derive(Parser)]
#[command(
    name = "msgat",
    about = "Multi-scale graph attention + GRU accident-risk pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run-config file; missing fields take documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig, Error> {
        match &self.config {
            Some(path) => RunConfig::load(path),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator seed (overrides config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Ingest, interpolate, sample and split a dataset directory.
    Prepare {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory (six schema files).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for manifest.json and norm_stats.json.
        #[arg(long)]
        out: PathBuf,
        /// Sampling seed (overrides config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train against a prepared dataset.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Prepared dataset directory (from `prepare`).
        #[arg(long)]
        prepared: PathBuf,
        /// Root directory for run outputs.
        #[arg(long)]
        out: PathBuf,
        /// Fixed run-directory name instead of timestamp + config hash.
        #[arg(long)]
        run_id: Option<String>,
        /// Training seed (overrides config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a partition.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prepared dataset directory.
        #[arg(long)]
        prepared: PathBuf,
        /// Partition to evaluate: train, val or test.
        #[arg(long, default_value = "test")]
        partition: String,
        /// Classification threshold (defaults to the checkpoint's).
        #[arg(long)]
        threshold: Option<f64>,
        /// Root directory for run outputs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Train and evaluate the hop-configuration x GRU-depth grid.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        /// Prepared dataset directory.
        #[arg(long)]
        prepared: PathBuf,
        /// Root directory for run outputs.
        #[arg(long)]
        out: PathBuf,
        /// `full` or `row:<hops>` with hops one of 1, 1-2, 1-2-3.
        #[arg(long, default_value = "full")]
        grid: String,
        /// Seeds to average each cell over.
        #[arg(long, default_value = "3")]
        seeds: usize,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Print the closed-form cost model for a configuration and graph size.
    Cost {
        #[command(flatten)]
        config: ConfigArg,
        /// Number of nodes N.
        #[arg(long)]
        nodes: u64,
        /// Number of edges E.
        #[arg(long)]
        edges: u64,
        /// Spatial scales S (overrides config).
        #[arg(short = 'S', long)]
        scales: Option<usize>,
        /// Attention heads H (overrides config).
        #[arg(short = 'H', long)]
        heads: Option<usize>,
        /// Hidden width d (overrides config).
        #[arg(short = 'd', long)]
        hidden: Option<usize>,
        /// Lookback T (overrides config).
        #[arg(short = 'T', long)]
        lookback: Option<usize>,
    },
}

fn parse_grid(s: &str) -> Result<AblationGrid, Error> {
    if s == "full" {
        return Ok(AblationGrid::Full);
    }
    if let Some(row) = s.strip_prefix("row:") {
        let hops = match row {
            "1" => 1,
            "1-2" | "2" => 2,
            "1-2-3" | "3" => 3,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation row '{other}' (expected 1, 1-2 or 1-2-3)"
                )))
            }
        };
        return Ok(AblationGrid::Row(hops));
    }
    Err(Error::Config(format!(
        "unknown grid '{s}' (expected 'full' or 'row:<hops>')"
    )))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.seeds.gen = s;
            }
            let summary = cmd_synth(&cfg, &out)?;
            println!(
                "generated {} nodes, {} edges, {} hours, {} accidents, {:.1}% missing buckets -> {}",
                summary.nodes,
                summary.edges,
                summary.hours,
                summary.positives,
                summary.missing_fraction * 100.0,
                out.display()
            );
        }
        Command::Prepare {
            config,
            data,
            out,
            seed,
        } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.seeds.sample = s;
            }
            let summary = cmd_prepare(&data, &out, &cfg)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "prepared {} samples ({} positive): train {}, val {}, test {} -> {}",
                summary.total,
                summary.positives,
                summary.train,
                summary.val,
                summary.test,
                out.display()
            );
        }
        Command::Train {
            config,
            prepared,
            out,
            run_id,
            seed,
        } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let summary = cmd_train(&prepared, &out, run_id.as_deref(), &cfg)?;
            println!(
                "trained {} epochs (best {:?}{}), val F1 {:.4}, RMSE {:.4} -> {}",
                summary.epochs_run,
                summary.best_epoch,
                if summary.stopped_early {
                    ", stopped early"
                } else {
                    ""
                },
                summary.val_metrics.f1,
                summary.val_metrics.rmse,
                summary.run_dir.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            prepared,
            partition,
            threshold,
            out,
            run_id,
        } => {
            let cfg = config.load()?;
            let partition: Partition = partition.parse()?;
            let report = cmd_eval(
                &checkpoint,
                &prepared,
                partition,
                threshold,
                &out,
                run_id.as_deref(),
                &cfg,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate {
            config,
            prepared,
            out,
            grid,
            seeds,
            run_id,
        } => {
            let cfg = config.load()?;
            let grid = parse_grid(&grid)?;
            if seeds == 0 {
                return Err(Error::Config("need at least one ablation seed".into()));
            }
            let seed_list: Vec<u64> = (0..seeds as u64)
                .map(|i| cfg.train.seed.wrapping_add(i))
                .collect();
            let (result, dir) =
                cmd_ablate(&prepared, &out, run_id.as_deref(), grid, &seed_list, &cfg)?;
            println!("hops,gru_depth,rmse,precision,recall,f1");
            for cell in &result.cells {
                match &cell.outcome {
                    Ok(m) => println!(
                        "{},{},{:.4},{:.4},{:.4},{:.4}",
                        cell.hops, cell.gru_depth, m.rmse, m.precision, m.recall, m.f1
                    ),
                    Err(e) => println!("{},{},error: {e},,,", cell.hops, cell.gru_depth),
                }
            }
            println!("written to {}", dir.display());
        }
        Command::Cost {
            config,
            nodes,
            edges,
            scales,
            heads,
            hidden,
            lookback,
        } => {
            let mut cfg = config.load()?;
            if let Some(v) = scales {
                cfg.model.scales = v;
            }
            if let Some(v) = heads {
                cfg.model.heads = v;
            }
            if let Some(v) = hidden {
                cfg.model.hidden = v;
            }
            if let Some(v) = lookback {
                cfg.model.lookback = v;
            }
            let report = estimate_cost(&cfg.model, nodes, edges)?;
            print!("{}", format_cost_table(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
