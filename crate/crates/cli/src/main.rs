use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dispro::cohort::Modality;
use dispro::harness::{run, Command, RunConfig};
use dispro::multipro::Scenario;
use dispro::Error;

#[derive(Parser, Debug)]
#[command(name = "dispro", version, about = "Prompt-based survival prediction with missing modalities")]
struct Cli {
    /// Flat `key = value` config file; `DISPRO_*` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for manifests, checkpoints and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Replaces the seed list and the synthetic cohort seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic cohort manifest and its feature files.
    GenSynth,
    /// Train one modality's prompts and adapter.
    TrainStage1 {
        #[arg(long, value_enum)]
        modality: ModalityArg,
    },
    /// Train the fusion stage on top of both Stage-1 checkpoints.
    TrainStage2,
    /// C-index of the Stage-2 checkpoint on the held-out fold.
    Eval {
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
    },
    /// Per-position attention mass of one patient under each availability combo.
    DumpAttention {
        #[arg(long)]
        patient: String,
    },
    /// Every missing-rate combo × test scenario × fold.
    Grid,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModalityArg {
    P,
    G,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScenarioArg {
    #[value(name = "p-only")]
    POnly,
    #[value(name = "g-only")]
    GOnly,
    Complete,
}

fn config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
        cfg.synth.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn command(cmd: &Cmd) -> Command {
    match cmd {
        Cmd::GenSynth => Command::GenSynth,
        Cmd::TrainStage1 { modality } => Command::TrainStage1 {
            modality: match modality {
                ModalityArg::P => Modality::Pathology,
                ModalityArg::G => Modality::Genomics,
            },
        },
        Cmd::TrainStage2 => Command::TrainStage2,
        Cmd::Eval { scenario } => Command::Eval {
            scenario: match scenario {
                ScenarioArg::POnly => Scenario::PathologyOnly,
                ScenarioArg::GOnly => Scenario::GenomicsOnly,
                ScenarioArg::Complete => Scenario::Complete,
            },
        },
        Cmd::DumpAttention { patient } => Command::DumpAttention {
            patient: patient.clone(),
        },
        Cmd::Grid => Command::Grid,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match config(&cli).and_then(|cfg| run(&command(&cli.command), &cfg)) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            let record = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
