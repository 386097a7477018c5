use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training-time missing rates in percent for (pathology, genomics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingCombo {
    pub pathology: f64,
    pub genomics: f64,
}

impl MissingCombo {
    pub const fn new(pathology: f64, genomics: f64) -> Self {
        Self { pathology, genomics }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.pathology, self.genomics)
    }
}

/// The five train-time combinations sharing a 60% total missing rate.
pub const PAPER_COMBOS: [MissingCombo; 5] = [
    MissingCombo::new(0.0, 60.0),
    MissingCombo::new(20.0, 40.0),
    MissingCombo::new(30.0, 30.0),
    MissingCombo::new(40.0, 20.0),
    MissingCombo::new(60.0, 0.0),
];

/// Which patients (by position) lose which modality. The two sets are disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingMask {
    pub drop_pathology: BTreeSet<usize>,
    pub drop_genomics: BTreeSet<usize>,
    pub combo: MissingCombo,
}

fn count(rate: f64, n: usize) -> usize {
    // f64::round is half-away-from-zero
    (rate * n as f64 / 100.0).round() as usize
}

/// Draws a mask over positions `0..n`: `round(rate·n/100)` patients per
/// modality, never the same patient twice.
pub fn build_missing_mask(n: usize, combo: MissingCombo, seed: u64) -> Result<MissingMask> {
    let MissingCombo { pathology, genomics } = combo;
    if !(0.0..=100.0).contains(&pathology) || !(0.0..=100.0).contains(&genomics) || pathology + genomics > 100.0 {
        return Err(Error::MissingRates { pathology, genomics });
    }
    let n_p = count(pathology, n);
    let n_g = count(genomics, n);
    if n_p + n_g > n {
        return Err(Error::MissingRates { pathology, genomics });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(MissingMask {
        drop_pathology: order[..n_p].iter().copied().collect(),
        drop_genomics: order[n_p..n_p + n_g].iter().copied().collect(),
        combo,
    })
}
