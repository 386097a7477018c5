//! Multimodal survival cohorts: bags of instance features per modality,
//! survival labels, interval discretization, missing-modality masks and
//! cross-validation folds.

mod manifest;
mod mask;
mod split;
mod synth;

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survival::Censorship;

pub use manifest::{load_manifest, read_bag, write_bag, write_manifest, BAGF_MAGIC, BAGF_VERSION};
pub use mask::{build_missing_mask, MissingCombo, MissingMask, PAPER_COMBOS};
pub use split::{kfold_split, Fold};
pub use synth::{generate_synthetic_cohort, generate_with_latent, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Pathology,
    Genomics,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Pathology, Modality::Genomics];

    /// One-letter tag used in parameter names and on the command line.
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Pathology => "p",
            Modality::Genomics => "g",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Pathology => "pathology",
            Modality::Genomics => "genomics",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Pathology => Modality::Genomics,
            Modality::Genomics => Modality::Pathology,
        }
    }

    pub fn from_tag(tag: &str) -> Option<Modality> {
        match tag {
            "p" | "pathology" => Some(Modality::Pathology),
            "g" | "genomics" => Some(Modality::Genomics),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One patient's instance features for one modality (`M × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    patient_id: String,
    modality: Modality,
    instances: Array2<f32>,
}

impl Bag {
    pub fn new(patient_id: impl Into<String>, modality: Modality, instances: Array2<f32>) -> Result<Self> {
        if instances.nrows() == 0 || instances.ncols() == 0 {
            return Err(Error::EmptyBag);
        }
        if instances.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("bag contains non-finite features".into()));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            modality,
            instances,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn instances(&self) -> &Array2<f32> {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.instances.ncols()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.instances.mapv(f64::from)
    }

    /// Same bag with instance rows reordered.
    pub fn permuted(&self, order: &[usize]) -> Bag {
        Bag {
            patient_id: self.patient_id.clone(),
            modality: self.modality,
            instances: self.instances.select(ndarray::Axis(0), order),
        }
    }
}

/// Censorship, time and the derived discrete labels. `interval` is 1-based
/// and `class_id = interval + I_t · censorship_bit`, also 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub censorship: Censorship,
    pub time_months: f64,
    pub interval: usize,
    pub class_id: usize,
}

impl SurvivalLabel {
    pub fn new(censorship: Censorship, time_months: f64, interval: usize, n_intervals: usize) -> Self {
        Self {
            censorship,
            time_months,
            interval,
            class_id: interval + n_intervals * censorship.bit() as usize,
        }
    }

    /// Zero-based column of this label's class.
    pub fn class_index(&self) -> usize {
        self.class_id - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: String,
    pub pathology: Option<Bag>,
    pub genomics: Option<Bag>,
    pub label: SurvivalLabel,
}

impl Patient {
    pub fn bag(&self, modality: Modality) -> Option<&Bag> {
        match modality {
            Modality::Pathology => self.pathology.as_ref(),
            Modality::Genomics => self.genomics.as_ref(),
        }
    }

    pub fn has(&self, modality: Modality) -> bool {
        self.bag(modality).is_some()
    }

    pub fn is_complete(&self) -> bool {
        self.pathology.is_some() && self.genomics.is_some()
    }

    /// Copy of this patient with `modality` removed.
    pub fn without(&self, modality: Modality) -> Patient {
        let mut p = self.clone();
        match modality {
            Modality::Pathology => p.pathology = None,
            Modality::Genomics => p.genomics = None,
        }
        p
    }
}

/// Raw per-patient record before discretization.
#[derive(Debug, Clone)]
pub struct PatientRecord {
    pub id: String,
    pub pathology: Option<Bag>,
    pub genomics: Option<Bag>,
    pub time_months: f64,
    pub censorship: Censorship,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    patients: Vec<Patient>,
    bin_edges: Vec<f64>,
    d_pathology: usize,
    d_genomics: usize,
}

impl Cohort {
    /// Validates the records and discretizes their times into `n_intervals` bands.
    pub fn new(
        records: Vec<PatientRecord>,
        n_intervals: usize,
        d_pathology: usize,
        d_genomics: usize,
    ) -> Result<Self> {
        for r in &records {
            if r.pathology.is_none() && r.genomics.is_none() {
                return Err(Error::Config(format!("patient {} has no modality", r.id)));
            }
            if !(r.time_months > 0.0 && r.time_months.is_finite()) {
                return Err(Error::NonPositiveTime {
                    patient: r.id.clone(),
                    time: r.time_months,
                });
            }
            for (bag, width) in [(&r.pathology, d_pathology), (&r.genomics, d_genomics)] {
                if let Some(bag) = bag {
                    if bag.width() != width {
                        return Err(Error::shape("bag width", width, bag.width()));
                    }
                }
            }
        }
        let outcomes: Vec<_> = records.iter().map(|r| (r.time_months, r.censorship)).collect();
        let (bin_edges, intervals) = discretize_times(&outcomes, n_intervals)?;
        let patients = records
            .into_iter()
            .zip(intervals)
            .map(|(r, interval)| Patient {
                label: SurvivalLabel::new(r.censorship, r.time_months, interval, n_intervals),
                id: r.id,
                pathology: r.pathology,
                genomics: r.genomics,
            })
            .collect();
        Ok(Self {
            patients,
            bin_edges,
            d_pathology,
            d_genomics,
        })
    }

    pub fn patients(&self) -> &[Patient] {
        &self.patients
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn n_intervals(&self) -> usize {
        self.bin_edges.len() + 1
    }

    pub fn n_classes(&self) -> usize {
        2 * self.n_intervals()
    }

    pub fn width(&self, modality: Modality) -> usize {
        match modality {
            Modality::Pathology => self.d_pathology,
            Modality::Genomics => self.d_genomics,
        }
    }

    pub fn labels(&self) -> Vec<SurvivalLabel> {
        self.patients.iter().map(|p| p.label).collect()
    }

    pub fn find(&self, id: &str) -> Option<&Patient> {
        self.patients.iter().find(|p| p.id == id)
    }

    /// Patients at `indices`, keeping this cohort's bin edges.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
            bin_edges: self.bin_edges.clone(),
            d_pathology: self.d_pathology,
            d_genomics: self.d_genomics,
        }
    }

    /// Same cohort with patients replaced, e.g. after masking modalities.
    pub fn with_patients(&self, patients: Vec<Patient>) -> Cohort {
        Cohort {
            patients,
            bin_edges: self.bin_edges.clone(),
            d_pathology: self.d_pathology,
            d_genomics: self.d_genomics,
        }
    }

    /// Removes the masked modalities. Mask indices refer to positions in this cohort.
    pub fn apply_mask(&self, mask: &MissingMask) -> Cohort {
        let patients = self
            .patients
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if mask.drop_pathology.contains(&i) {
                    p.without(Modality::Pathology)
                } else if mask.drop_genomics.contains(&i) {
                    p.without(Modality::Genomics)
                } else {
                    p.clone()
                }
            })
            .collect();
        self.with_patients(patients)
    }
}

/// Bin edges at the `1/I_t, …, (I_t-1)/I_t` linear-interpolation quantiles
/// of the uncensored times, and each patient's 1-based interval
/// (one plus the number of edges strictly below its time).
pub fn discretize_times(
    outcomes: &[(f64, Censorship)],
    n_intervals: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if n_intervals < 2 {
        return Err(Error::Config(format!("need at least 2 intervals, got {n_intervals}")));
    }
    if let Some((i, &(t, _))) = outcomes
        .iter()
        .enumerate()
        .find(|(_, (t, _))| !(*t > 0.0 && t.is_finite()))
    {
        return Err(Error::NonPositiveTime {
            patient: format!("#{i}"),
            time: t,
        });
    }
    let mut events: Vec<f64> = outcomes
        .iter()
        .filter(|(_, c)| !c.is_censored())
        .map(|(t, _)| *t)
        .collect();
    if events.len() < n_intervals {
        return Err(Error::TooFewEvents {
            needed: n_intervals,
            found: events.len(),
        });
    }
    events.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..n_intervals)
        .map(|q| quantile_sorted(&events, q as f64 / n_intervals as f64))
        .collect();
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::DegenerateBins(edges));
    }
    let intervals = outcomes
        .iter()
        .map(|(t, _)| 1 + edges.iter().filter(|e| **e < *t).count())
        .collect();
    Ok((edges, intervals))
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
