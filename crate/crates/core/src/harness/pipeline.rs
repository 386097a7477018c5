//! Two-stage training runs, cross-validated evaluation and the scenario grid.

use std::time::Instant;

use rayon::prelude::*;

use crate::cohort::{
    build_missing_mask, generate_synthetic_cohort, kfold_split, load_manifest, Cohort, Fold, MissingCombo,
    MissingMask, Modality,
};
use crate::encoders::init_encoder;
use crate::error::Result;
use crate::multipro::{train_stage2, Scenario, Stage2Config, Stage2Model};
use crate::params::ParamStore;
use crate::unipro::{init_stage1, train_stage1, Stage1Output};

use super::config::RunConfig;
use super::report::{MetricRecord, MetricsReport, StageLosses};

/// The manifest cohort if configured, else the synthetic one.
pub fn load_cohort(cfg: &RunConfig) -> Result<Cohort> {
    match &cfg.manifest {
        Some(path) => load_manifest(path, cfg.n_intervals),
        None => generate_synthetic_cohort(&cfg.synth),
    }
}

/// Missing mask over the complete patients of `cohort`, expressed in cohort positions.
pub fn mask_complete(cohort: &Cohort, combo: MissingCombo, seed: u64) -> Result<MissingMask> {
    let complete: Vec<usize> = (0..cohort.len()).filter(|&i| cohort.patients()[i].is_complete()).collect();
    let inner = build_missing_mask(complete.len(), combo, seed)?;
    Ok(MissingMask {
        drop_pathology: inner.drop_pathology.iter().map(|&i| complete[i]).collect(),
        drop_genomics: inner.drop_genomics.iter().map(|&i| complete[i]).collect(),
        combo,
    })
}

/// Both stages trained on one masked training set.
#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    pub encoder: ParamStore,
    pub stage1_p: Stage1Output,
    pub stage1_g: Stage1Output,
    pub model: Stage2Model,
}

pub fn train_stage1_pair(masked: &Cohort, cfg: &RunConfig, seed: u64) -> Result<(ParamStore, Stage1Output, Stage1Output)> {
    let encoder = init_encoder(&cfg.encoder, cfg.encoder_seed)?;
    let s1 = cfg.stage1_for(seed);
    let p = train_stage1(masked, Modality::Pathology, &encoder, &cfg.encoder, &s1)?;
    let g = train_stage1(masked, Modality::Genomics, &encoder, &cfg.encoder, &s1)?;
    Ok((encoder, p, g))
}

pub fn train_pipeline(train: &Cohort, mask: &MissingMask, cfg: &RunConfig, seed: u64) -> Result<TrainedPipeline> {
    let masked = train.apply_mask(mask);
    let (encoder, stage1_p, stage1_g) = train_stage1_pair(&masked, cfg, seed)?;
    let model = train_stage2(train, mask, &stage1_p, &stage1_g, &encoder, &cfg.encoder, &cfg.stage2_for(seed))?;
    Ok(TrainedPipeline {
        encoder,
        stage1_p,
        stage1_g,
        model,
    })
}

/// Stage-2 model on freshly initialized Stage-1 state, with no training at all.
pub fn untrained_model(cohort: &Cohort, cfg: &RunConfig, seed: u64) -> Result<Stage2Model> {
    untrained_with(cohort, cfg, &cfg.stage2_for(seed), seed)
}

pub fn untrained_with(cohort: &Cohort, cfg: &RunConfig, s2: &Stage2Config, seed: u64) -> Result<Stage2Model> {
    let encoder = init_encoder(&cfg.encoder, cfg.encoder_seed)?;
    let s1 = cfg.stage1_for(seed);
    let n = cohort.n_intervals();
    let p = init_stage1(Modality::Pathology, cohort.width(Modality::Pathology), n, &encoder, &cfg.encoder, &s1)?;
    let g = init_stage1(Modality::Genomics, cohort.width(Modality::Genomics), n, &encoder, &cfg.encoder, &s1)?;
    Stage2Model::init(&p, &g, &encoder, &cfg.encoder, s2)
}

fn fold_records(
    cohort: &Cohort,
    fold_index: usize,
    fold: &Fold,
    combo: MissingCombo,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(Vec<MetricRecord>, StageLosses)> {
    let train = cohort.subset(&fold.train);
    let test = cohort.subset(&fold.test);
    let mask = mask_complete(&train, combo, seed ^ (fold_index as u64).wrapping_mul(0x9e37))?;
    let run = train_pipeline(&train, &mask, cfg, seed)?;
    let records = Scenario::ALL
        .into_iter()
        .map(|scenario| {
            Ok(MetricRecord {
                scenario: scenario.label().to_string(),
                fold: fold_index,
                cindex: run.model.evaluate(&test, scenario)?,
                n_test: test.len(),
                seed,
                combo: combo.label(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let losses = StageLosses {
        combo: combo.label(),
        fold: fold_index,
        seed,
        stage1_pathology: run.stage1_p.final_loss,
        stage1_genomics: run.stage1_g.final_loss,
        stage2: run.model.epoch_losses.last().map_or(f64::NAN, |l| l.total),
    };
    Ok((records, losses))
}

/// Every configured combo × fold × test scenario, for each seed. Runs may
/// execute concurrently; records come back in (seed, combo, fold, scenario) order.
pub fn run_grid(cohort: &Cohort, cfg: &RunConfig) -> Result<MetricsReport> {
    let start = Instant::now();
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        let folds = kfold_split(&cohort.labels(), cfg.folds, seed)?;
        for &combo in &cfg.combos {
            for (i, fold) in folds.iter().enumerate() {
                jobs.push((seed, combo, i, fold.clone()));
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|(seed, combo, i, fold)| {
            log::info!("grid: seed {seed} combo {} fold {i}", combo.label());
            fold_records(cohort, *i, fold, *combo, cfg, *seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricsReport::default();
    for (records, losses) in results {
        report.records.extend(records);
        report.losses.push(losses);
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}
