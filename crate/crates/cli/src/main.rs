use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use flea_core::pipeline::{self, ExperimentConfig, Phase};

#[derive(Parser, Debug)]
#[command(name = "flea", version, about = "Desk-scale frame-level emotion alignment pipeline")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `output_dir` from the configuration.
    #[arg(long, global = true, env = "FLEA_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,

    /// Worker threads for folds and grid cells.
    #[arg(long, global = true, env = "FLEA_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration as TOML.
    ShowConfig,
    /// Generate (or copy) the corpus into the output directory.
    GenCorpus,
    /// Phase 1: base-feature pseudo labels, TAPT pretraining and fine-tuning.
    Tapt(FoldArgs),
    /// Phase 2a: cluster tap-layer embeddings into pseudo labels.
    Cluster(FoldArgs),
    /// Phase 2b: continued pretraining on the pseudo labels.
    Pretrain(FoldArgs),
    /// Phase 3: fine-tune with the configured pooling.
    Finetune(FoldArgs),
    /// Aggregate fold metrics and write the report.
    Eval,
    /// Every phase for every fold, then evaluation.
    Run,
    /// Layer × cluster-count × pooling grid over the configured seeds.
    Ablation,
}

#[derive(clap::Args, Debug)]
struct FoldArgs {
    /// Fold indices (0–4); all folds when omitted.
    #[arg(long = "fold")]
    folds: Vec<usize>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = load_config(&cli)?;
    let phase = |phase, args: &FoldArgs| -> Result<()> {
        pipeline::run_phase(&cfg, phase, &args.folds)?;
        print_json(&serde_json::json!({ "phase": phase, "folds": args.folds }))
    };
    match &cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
        Command::GenCorpus => {
            let corpus = pipeline::cmd_gen_corpus(&cfg)?;
            print_json(&serde_json::json!({
                "corpus": pipeline::corpus_path(&cfg),
                "utterances": corpus.utterances.len(),
                "frames": corpus.total_frames(),
            }))?;
        }
        Command::Tapt(args) => phase(Phase::Tapt, args)?,
        Command::Cluster(args) => phase(Phase::Cluster, args)?,
        Command::Pretrain(args) => phase(Phase::Pretrain, args)?,
        Command::Finetune(args) => phase(Phase::Finetune, args)?,
        Command::Eval => print_json(&pipeline::cmd_eval(&cfg)?.aggregate)?,
        Command::Run => print_json(&pipeline::run_experiment(&cfg)?.aggregate)?,
        Command::Ablation => print_json(&pipeline::run_ablation(&cfg)?.grid)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = match err.downcast_ref::<flea_core::Error>() {
                Some(e) => pipeline::error_record(e),
                None => serde_json::json!({
                    "error": { "kind": "cli", "message": format!("{err:#}") }
                }),
            };
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
