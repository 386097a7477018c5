use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Bag, Cohort, Modality, PatientRecord};
use crate::error::{Error, Result};
use crate::survival::Censorship;

/// Median-ish time scale of the event process, in months.
const TIME_SCALE: f64 = 24.0;
/// Mean shift of informative instances along the shared risk direction.
const RISK_AMPLITUDE: f64 = 2.0;
/// Length of each modality's private mean offset.
const PRIVATE_OFFSET: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub bag_size_pathology: usize,
    pub bag_size_genomics: usize,
    pub d_pathology: usize,
    pub d_genomics: usize,
    /// Fraction of each bag drawn from the risk-dependent distribution.
    pub informative_fraction: f64,
    pub signal_strength: f64,
    pub censor_rate: f64,
    pub n_intervals: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 200,
            bag_size_pathology: 64,
            bag_size_genomics: 32,
            d_pathology: 16,
            d_genomics: 16,
            informative_fraction: 0.25,
            signal_strength: 2.0,
            censor_rate: 0.3,
            n_intervals: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_patients", self.n_patients),
            ("bag_size_pathology", self.bag_size_pathology),
            ("bag_size_genomics", self.bag_size_genomics),
            ("d_pathology", self.d_pathology),
            ("d_genomics", self.d_genomics),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.informative_fraction > 0.0 && self.informative_fraction <= 1.0) {
            return Err(Error::Config("informative_fraction must be in (0, 1]".into()));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(Error::Config("signal_strength must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(Error::Config("censor_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

struct ModalitySignal {
    risk_direction: Array1<f64>,
    private_offset: Array1<f64>,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let v = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
    let norm = v.dot(&v).sqrt().max(1e-12);
    v / norm
}

impl ModalitySignal {
    fn draw(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            risk_direction: unit_vector(rng, d),
            private_offset: unit_vector(rng, d) * PRIVATE_OFFSET,
        }
    }

    /// Informative rows center on `amplitude·z·u + o`; the rest are standard normal.
    fn bag(&self, rng: &mut ChaCha8Rng, size: usize, fraction: f64, z: f64) -> Array2<f32> {
        let d = self.risk_direction.len();
        let informative = ((fraction * size as f64).round() as usize).min(size);
        let mean = &self.risk_direction * (RISK_AMPLITUDE * z) + &self.private_offset;
        let mut rows: Vec<bool> = (0..size).map(|i| i < informative).collect();
        rows.shuffle(rng);
        let mut out = Array2::zeros((size, d));
        for (i, is_informative) in rows.into_iter().enumerate() {
            for j in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                let center = if is_informative { mean[j] } else { 0.0 };
                out[[i, j]] = (center + noise) as f32;
            }
        }
        out
    }
}

/// Synthetic cohort plus each patient's latent risk in `[0, 1)`.
pub fn generate_with_latent(cfg: &SynthConfig) -> Result<(Cohort, Vec<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pathology = ModalitySignal::draw(&mut rng, cfg.d_pathology);
    let genomics = ModalitySignal::draw(&mut rng, cfg.d_genomics);
    let mut records = Vec::with_capacity(cfg.n_patients);
    let mut latent = Vec::with_capacity(cfg.n_patients);
    for n in 0..cfg.n_patients {
        let r: f64 = rng.random();
        // centred latent so the log-rate spans [-s, s]
        let z = 2.0 * r - 1.0;
        let rate = (cfg.signal_strength * z).exp() / TIME_SCALE;
        let event_time = Exp::new(rate).expect("positive rate").sample(&mut rng);
        let censored = rng.random::<f64>() < cfg.censor_rate;
        let time = if censored {
            (1.0 - rng.random::<f64>()) * event_time
        } else {
            event_time
        };
        let id = format!("synth-{n:05}");
        let p = pathology.bag(&mut rng, cfg.bag_size_pathology, cfg.informative_fraction, z);
        let g = genomics.bag(&mut rng, cfg.bag_size_genomics, cfg.informative_fraction, z);
        records.push(PatientRecord {
            pathology: Some(Bag::new(id.clone(), Modality::Pathology, p)?),
            genomics: Some(Bag::new(id.clone(), Modality::Genomics, g)?),
            id,
            time_months: time.max(f64::MIN_POSITIVE),
            censorship: if censored { Censorship::Alive } else { Censorship::Dead },
        });
        latent.push(r);
    }
    let cohort = Cohort::new(records, cfg.n_intervals, cfg.d_pathology, cfg.d_genomics)?;
    Ok((cohort, latent))
}

/// Complete-modality cohort whose bags carry a shared latent risk signal and
/// a fixed per-modality offset.
pub fn generate_synthetic_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    generate_with_latent(cfg).map(|(c, _)| c)
}
