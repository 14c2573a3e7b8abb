use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use forge_core::corpus::MixtureKind;
use forge_core::harness::{self, HarnessConfig, RunOptions, Workspace, MODELS, OUTPUT_ENV};
use forge_core::Result;

#[derive(Parser)]
#[command(name = "forge", version, about = "Build duplex-recorded speech mixtures and compare separators trained on them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the corpus seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite an existing corpus.
    #[arg(long)]
    force: bool,
    /// Full-size model and training schedule.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Synthetic,
    Realistic,
}

impl From<Kind> for MixtureKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Synthetic => MixtureKind::Synthetic,
            Kind::Realistic => MixtureKind::Realistic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    BuildCorpus(Common),
    Train {
        #[command(flatten)]
        common: Common,
        /// Variant to train; both when omitted.
        #[arg(long, value_enum)]
        mixtures: Option<Kind>,
    },
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "model", value_enum)]
        models: Vec<Kind>,
        #[arg(long = "testset", value_enum)]
        test_sets: Vec<Kind>,
    },
    DistanceSweep(Common),
    TwinExperiment(Common),
}

fn workspace(common: &Common) -> Result<Workspace> {
    let config = HarnessConfig::load(&common.config)?;
    let options = RunOptions {
        seed: common.seed,
        force: common.force,
        paper_scale: common.paper_scale,
        output_root: std::env::var_os(OUTPUT_ENV).map(PathBuf::from),
    };
    Ok(Workspace::new(config, &options))
}

fn kinds(chosen: &[Kind], fallback: &[MixtureKind]) -> Vec<MixtureKind> {
    if chosen.is_empty() {
        fallback.to_vec()
    } else {
        chosen.iter().map(|&k| k.into()).collect()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildCorpus(common) => {
            let ws = workspace(&common)?;
            let s = harness::build_corpus_cmd(&ws)?;
            println!(
                "{} mixtures ({} train / {} validation / {} test), {} retried captures, {:.1} s of audio -> {}",
                s.entries,
                s.train,
                s.validation,
                s.test,
                s.retried_captures,
                s.realmix_seconds,
                ws.manifest_path().display()
            );
        }
        Command::Train { common, mixtures } => {
            let ws = workspace(&common)?;
            let chosen: Vec<Kind> = mixtures.into_iter().collect();
            for model in kinds(&chosen, &MODELS) {
                let out = harness::train_cmd(&ws, model)?;
                println!(
                    "{model}: best validation loss {:.6} at epoch {} -> {}",
                    out.best_valid_loss,
                    out.best_epoch,
                    ws.checkpoint_path(model).display()
                );
            }
        }
        Command::Evaluate {
            common,
            models,
            test_sets,
        } => {
            let ws = workspace(&common)?;
            let test_sets = kinds(&test_sets, &ws.config.eval.test_sets);
            let rows = harness::evaluate_cmd(&ws, &kinds(&models, &MODELS), &test_sets)?;
            print!("{}", harness::comparison_csv(&rows));
        }
        Command::DistanceSweep(common) => {
            let ws = workspace(&common)?;
            let rows = harness::distance_sweep_cmd(&ws)?;
            print!("{}", harness::sweep_csv(&rows));
        }
        Command::TwinExperiment(common) => {
            let ws = workspace(&common)?;
            let v = harness::twin_experiment_cmd(&ws)?;
            print!("{}", harness::comparison_csv(&v.comparison));
            println!(
                "realistic test: realistic-model {:.3} dB vs synthetic-model {:.3} dB (gap {:+.3} dB)",
                v.realistic_test_realistic_model_db, v.realistic_test_synthetic_model_db, v.realistic_test_gap_db
            );
            if let Some(d) = &v.distance_drop {
                println!(
                    "drop {} m -> {} m: synthetic-model {:.3} dB, realistic-model {:.3} dB",
                    d.from_m, d.to_m, d.synthetic_model_drop_db, d.realistic_model_drop_db
                );
            }
            println!("paper_direction_reproduced: {}", v.paper_direction_reproduced);
            println!("verdict -> {}", ws.verdict_path().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = run(Cli::parse());
    if let Err(e) = &result {
        eprintln!("forge: {e}");
    }
    ExitCode::from(harness::exit_code(&result) as u8)
}
