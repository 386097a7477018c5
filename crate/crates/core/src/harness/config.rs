//! Flat `key = value` run configuration with `DISPRO_*` environment overrides.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cohort::{MissingCombo, SynthConfig, PAPER_COMBOS};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::multipro::{ScoreClass, Stage2Config};
use crate::unipro::Stage1Config;

pub const ENV_PREFIX: &str = "DISPRO_";

/// Every key accepted in a config file.
pub const KEYS: &[&str] = &[
    "manifest",
    "out_dir",
    "n_intervals",
    "synth.n_patients",
    "synth.bag_size_pathology",
    "synth.bag_size_genomics",
    "synth.d_pathology",
    "synth.d_genomics",
    "synth.informative_fraction",
    "synth.signal_strength",
    "synth.censor_rate",
    "synth.seed",
    "encoder.model_dim",
    "encoder.n_layers",
    "encoder.n_heads",
    "encoder.mlp_ratio",
    "encoder.max_seq_len",
    "encoder.vocab_size",
    "encoder.trainable",
    "encoder.seed",
    "context_len",
    "pool_k",
    "k_p",
    "k_g",
    "alpha1",
    "alpha2",
    "lr",
    "lr_stage2",
    "score_class",
    "weight_decay",
    "epochs_stage1",
    "epochs_stage2",
    "folds",
    "combos",
    "seeds",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Cohort manifest; a synthetic cohort is generated when absent.
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
    pub out_dir: PathBuf,
    pub encoder: EncoderConfig,
    /// Seed of the frozen encoder weights.
    pub encoder_seed: u64,
    pub n_intervals: usize,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub folds: usize,
    pub combos: Vec<MissingCombo>,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synth: SynthConfig::default(),
            out_dir: PathBuf::from("dispro-out"),
            encoder: EncoderConfig::default(),
            encoder_seed: 0,
            n_intervals: 4,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            folds: 5,
            combos: PAPER_COMBOS.to_vec(),
            seeds: vec![0],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// `"0:60,20:40"` → combos in percent.
pub fn parse_combos(value: &str) -> Result<Vec<MissingCombo>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (p, g) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("combos: expected p:g, got {pair:?}")))?;
            Ok(MissingCombo::new(parse("combos", p.trim())?, parse("combos", g.trim())?))
        })
        .collect()
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "n_intervals" => {
                self.n_intervals = parse(key, v)?;
                self.synth.n_intervals = self.n_intervals;
            }
            "synth.n_patients" => self.synth.n_patients = parse(key, v)?,
            "synth.bag_size_pathology" => self.synth.bag_size_pathology = parse(key, v)?,
            "synth.bag_size_genomics" => self.synth.bag_size_genomics = parse(key, v)?,
            "synth.d_pathology" => self.synth.d_pathology = parse(key, v)?,
            "synth.d_genomics" => self.synth.d_genomics = parse(key, v)?,
            "synth.informative_fraction" => self.synth.informative_fraction = parse(key, v)?,
            "synth.signal_strength" => self.synth.signal_strength = parse(key, v)?,
            "synth.censor_rate" => self.synth.censor_rate = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "encoder.model_dim" => self.encoder.model_dim = parse(key, v)?,
            "encoder.n_layers" => self.encoder.n_layers = parse(key, v)?,
            "encoder.n_heads" => self.encoder.n_heads = parse(key, v)?,
            "encoder.mlp_ratio" => self.encoder.mlp_ratio = parse(key, v)?,
            "encoder.max_seq_len" => self.encoder.max_seq_len = parse(key, v)?,
            "encoder.vocab_size" => self.encoder.vocab_size = parse(key, v)?,
            "encoder.trainable" => self.encoder.trainable_encoder = parse_bool(key, v)?,
            "encoder.seed" => self.encoder_seed = parse(key, v)?,
            "context_len" => self.stage1.context_len = parse(key, v)?,
            "pool_k" => {
                self.stage1.pool_k = parse(key, v)?;
                self.stage2.pool_k = self.stage1.pool_k;
            }
            "k_p" => self.stage2.k_p = parse(key, v)?,
            "k_g" => self.stage2.k_g = parse(key, v)?,
            "alpha1" => self.stage2.alpha1 = parse(key, v)?,
            "alpha2" => self.stage2.alpha2 = parse(key, v)?,
            "lr" => {
                self.stage1.adam.lr = parse(key, v)?;
                self.stage2.adam.lr = self.stage1.adam.lr;
            }
            "lr_stage2" => self.stage2.adam.lr = parse(key, v)?,
            "score_class" => {
                self.stage2.score_class = match v {
                    "label" => ScoreClass::Label,
                    "predicted" => ScoreClass::Predicted,
                    _ => return Err(Error::Config(format!("score_class must be label or predicted, got {v:?}"))),
                }
            }
            "weight_decay" => {
                self.stage1.adam.weight_decay = parse(key, v)?;
                self.stage2.adam.weight_decay = self.stage1.adam.weight_decay;
            }
            "epochs_stage1" => self.stage1.epochs = parse(key, v)?,
            "epochs_stage2" => self.stage2.epochs = parse(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            "combos" => self.combos = parse_combos(v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies `DISPRO_<KEY>` variables, where `<KEY>` is the upper-cased
    /// key with dots replaced by underscores.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let key = KEYS
                .iter()
                .find(|k| k.replace('.', "_").eq_ignore_ascii_case(rest))
                .ok_or_else(|| Error::Config(format!("unknown environment override {name}")))?;
            self.set(key, &value)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.synth.validate()?;
        self.stage2.validate(&self.encoder)?;
        if self.n_intervals < 2 {
            return Err(Error::Config("n_intervals must be at least 2".into()));
        }
        if self.synth.n_intervals != self.n_intervals {
            return Err(Error::Config("synthetic and model interval counts differ".into()));
        }
        if self.stage1.context_len == 0 || self.stage1.pool_k == 0 {
            return Err(Error::Config("context_len and pool_k must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if self.seeds.is_empty() || self.combos.is_empty() {
            return Err(Error::Config("seeds and combos must be non-empty".into()));
        }
        for c in &self.combos {
            if !(0.0..=100.0).contains(&c.pathology)
                || !(0.0..=100.0).contains(&c.genomics)
                || c.pathology + c.genomics > 100.0
            {
                return Err(Error::MissingRates {
                    pathology: c.pathology,
                    genomics: c.genomics,
                });
            }
        }
        for adam in [&self.stage1.adam, &self.stage2.adam] {
            if !(adam.lr > 0.0) || adam.weight_decay < 0.0 {
                return Err(Error::Config("lr must be positive and weight_decay nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Stage-1 settings for one run seed.
    pub fn stage1_for(&self, seed: u64) -> Stage1Config {
        Stage1Config { seed, ..self.stage1 }
    }

    pub fn stage2_for(&self, seed: u64) -> Stage2Config {
        Stage2Config { seed, ..self.stage2 }
    }
}
