use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coda::config::ExperimentConfig;
use coda::runner;

#[derive(Parser)]
#[command(
    name = "coda",
    about = "Cascaded head-colliding attention experiments at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config file (flat key = value text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's first seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint path for eval / analyze-jsd.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoints plus a metrics log.
    Train,
    /// Evaluate a checkpoint: perplexity (lm) or token accuracy (seq2seq).
    Eval,
    /// Compute JSD heatmaps and the diversity report.
    AnalyzeJsd,
    /// Train every variant for each head count and emit a comparison table.
    SweepHeads {
        /// Comma-separated head counts, e.g. 2,4,8.
        #[arg(long, default_value = "2,4,8")]
        heads: String,
        /// Keep d_model fixed so the per-head dimension shrinks.
        #[arg(long, default_value_t = true)]
        constant_budget: bool,
    },
    /// Run the four-variant ablation preset with shared data and seeds.
    Ablate,
}

fn load_config(cli: &Cli) -> coda::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> coda::Result<()> {
    let cfg = load_config(cli)?;
    let seed = cfg.seeds[0];
    match &cli.command {
        Command::Train => {
            runner::run_train(&cfg, seed)?;
        }
        Command::Eval => {
            let ckpt = cli.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoint.ckpt"));
            runner::run_eval(&cfg, &ckpt, seed)?;
        }
        Command::AnalyzeJsd => {
            runner::run_analyze(&cfg, cli.checkpoint.as_deref(), seed)?;
        }
        Command::SweepHeads { heads, constant_budget } => {
            let heads_list: Vec<usize> = heads
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| coda::Error::Config(format!("bad head count '{s}'")))
                })
                .collect::<coda::Result<_>>()?;
            let cells = runner::run_sweep(&cfg, &heads_list, *constant_budget)?;
            for c in &cells {
                println!(
                    "{} h={} d_model={} params={} metric={:.4} avg_jsd={:.4}",
                    c.variant.name(),
                    c.heads,
                    c.d_model,
                    c.params_total,
                    c.final_metric,
                    c.avg_jsd
                );
            }
        }
        Command::Ablate => {
            runner::run_ablate(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
