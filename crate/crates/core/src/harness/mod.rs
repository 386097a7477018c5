//! Run configuration, training pipelines, metric reports and the commands
//! behind the `dispro` binary.

pub mod attention;
pub mod config;
pub mod pipeline;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::cohort::{kfold_split, write_manifest, Cohort, Fold, Modality};
use crate::encoders::init_encoder;
use crate::error::{Error, Result};
use crate::multipro::{train_stage2, Scenario, Stage2Model};
use crate::params::ParamStore;
use crate::unipro::{train_stage1, Stage1Output};

pub use attention::{attention_profiles, cosine, dump_attention, AttentionDump, AttentionProfile};
pub use config::RunConfig;
pub use pipeline::{
    load_cohort, mask_complete, run_grid, train_pipeline, train_stage1_pair, untrained_model, untrained_with,
    TrainedPipeline,
};
pub use report::{mean_std, MetricRecord, MetricsReport, StageLosses, Summary};

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    GenSynth,
    TrainStage1 { modality: Modality },
    TrainStage2,
    Eval { scenario: Scenario },
    DumpAttention { patient: String },
    Grid,
}

pub fn stage1_path(out: &Path, modality: Modality) -> PathBuf {
    out.join(format!("stage1_{}.dspr", modality.tag()))
}

pub fn stage2_path(out: &Path) -> PathBuf {
    out.join("stage2.dspr")
}

/// Stage-1 state plus the frozen encoder it was trained against.
pub fn save_stage1(state: &Stage1Output, encoder: &ParamStore, path: &Path) -> Result<()> {
    let mut store = state.to_store();
    store.extend(encoder);
    save_checkpoint(&store, path)
}

pub fn load_stage1(path: &Path, modality: Modality, cfg: &RunConfig) -> Result<(Stage1Output, ParamStore)> {
    let store = load_checkpoint(path)?;
    let encoder = store.filter_prefix("encoder.");
    let mut rest = ParamStore::new();
    for (k, v) in store.iter().filter(|(k, _)| !k.starts_with("encoder.")) {
        rest.insert(k, v.clone());
    }
    Ok((Stage1Output::from_store(&rest, modality, cfg.encoder.vocab_size)?, encoder))
}

pub fn load_stage2(path: &Path, cfg: &RunConfig) -> Result<Stage2Model> {
    Stage2Model::from_store(&load_checkpoint(path)?, &cfg.encoder, &cfg.stage2, false)
}

/// Train/test split used by the single-run commands: fold 0 of the first seed.
fn holdout(cohort: &Cohort, cfg: &RunConfig) -> Result<(Cohort, Cohort, u64)> {
    let seed = cfg.seeds[0];
    let Fold { train, test } = kfold_split(&cohort.labels(), cfg.folds, seed)?.swap_remove(0);
    Ok((cohort.subset(&train), cohort.subset(&test), seed))
}

fn masked_train(cohort: &Cohort, cfg: &RunConfig) -> Result<(Cohort, crate::cohort::MissingMask, Cohort, u64)> {
    let (train, test, seed) = holdout(cohort, cfg)?;
    let mask = mask_complete(&train, cfg.combos[0], seed)?;
    Ok((train, mask, test, seed))
}

/// Runs one command and returns a JSON summary of what it produced.
pub fn run(command: &Command, cfg: &RunConfig) -> Result<serde_json::Value> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    match command {
        Command::GenSynth => {
            let cohort = crate::cohort::generate_synthetic_cohort(&cfg.synth)?;
            fs::create_dir_all(out)?;
            let manifest = write_manifest(&cohort, out)?;
            Ok(json!({"manifest": manifest, "patients": cohort.len()}))
        }
        Command::TrainStage1 { modality } => {
            let cohort = load_cohort(cfg)?;
            let (train, mask, _, seed) = masked_train(&cohort, cfg)?;
            let masked = train.apply_mask(&mask);
            let encoder = init_encoder(&cfg.encoder, cfg.encoder_seed)?;
            let state = train_stage1(&masked, *modality, &encoder, &cfg.encoder, &cfg.stage1_for(seed))?;
            let path = stage1_path(out, *modality);
            save_stage1(&state, &encoder, &path)?;
            Ok(json!({
                "checkpoint": path,
                "modality": modality.name(),
                "initial_loss": state.initial_loss,
                "final_loss": state.final_loss,
            }))
        }
        Command::TrainStage2 => {
            let cohort = load_cohort(cfg)?;
            let (train, mask, _, seed) = masked_train(&cohort, cfg)?;
            let (p, encoder) = load_stage1(&stage1_path(out, Modality::Pathology), Modality::Pathology, cfg)?;
            let (g, _) = load_stage1(&stage1_path(out, Modality::Genomics), Modality::Genomics, cfg)?;
            let model = train_stage2(&train, &mask, &p, &g, &encoder, &cfg.encoder, &cfg.stage2_for(seed))?;
            let path = stage2_path(out);
            save_checkpoint(&model.to_store(), &path)?;
            Ok(json!({
                "checkpoint": path,
                "final_loss": model.epoch_losses.last().map(|l| l.total),
            }))
        }
        Command::Eval { scenario } => {
            let model = load_stage2(&stage2_path(out), cfg)?;
            let cohort = load_cohort(cfg)?;
            let (_, test, seed) = holdout(&cohort, cfg)?;
            let record = MetricRecord {
                scenario: scenario.label().to_string(),
                fold: 0,
                cindex: model.evaluate(&test, *scenario)?,
                n_test: test.len(),
                seed,
                combo: cfg.combos[0].label(),
            };
            Ok(serde_json::to_value(record)?)
        }
        Command::DumpAttention { patient } => {
            let model = load_stage2(&stage2_path(out), cfg)?;
            let cohort = load_cohort(cfg)?;
            let p = cohort
                .find(patient)
                .ok_or_else(|| Error::Config(format!("no patient {patient:?} in the cohort")))?;
            let dump = dump_attention(&model, p)?;
            let path = out.join(format!("attention_{patient}.json"));
            fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
            Ok(json!({"dump": path, "cosine_to_complete": dump.cosine_to_complete}))
        }
        Command::Grid => {
            let cohort = load_cohort(cfg)?;
            let report = run_grid(&cohort, cfg)?;
            fs::create_dir_all(out)?;
            let jsonl = out.join("metrics.jsonl");
            fs::write(&jsonl, report.to_jsonl()?)?;
            let table = out.join("metrics.txt");
            fs::write(&table, report.to_table())?;
            Ok(json!({"records": report.records.len(), "metrics": jsonl, "table": table}))
        }
    }
}
