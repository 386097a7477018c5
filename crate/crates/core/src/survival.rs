//! Discrete-time survival mathematics: cumulative survival, the hazard
//! negative log-likelihood, scalar risk, and Harrell's concordance index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied inside every logarithm of the likelihood.
pub const LOG_FLOOR: f64 = 1e-12;

/// Right-censoring status. `Alive` (bit 1) means the event was not observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Censorship {
    Dead,
    Alive,
}

impl Censorship {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Censorship::Dead),
            1 => Some(Censorship::Alive),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Censorship::Dead => 0,
            Censorship::Alive => 1,
        }
    }

    pub fn is_censored(self) -> bool {
        self == Censorship::Alive
    }
}

/// Per-interval event probabilities, one per discrete time interval.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardVector(Vec<f64>);

impl HazardVector {
    pub fn new(hazards: Vec<f64>) -> Result<Self> {
        if hazards.is_empty() || hazards.iter().any(|h| !(0.0..=1.0).contains(h)) {
            return Err(Error::Config(format!(
                "hazards must be non-empty and lie in [0, 1]: {hazards:?}"
            )));
        }
        Ok(Self(hazards))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `S(j)` for `j = 1..=I_t`; `S(0) = 1` is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCurve(Vec<f64>);

impl SurvivalCurve {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `S(j)` with the convention `S(0) = 1`.
    pub fn at(&self, j: usize) -> f64 {
        if j == 0 {
            1.0
        } else {
            self.0[j - 1]
        }
    }
}

pub fn cumulative_survival(h: &HazardVector) -> SurvivalCurve {
    SurvivalCurve(running_survival(h.as_slice()))
}

fn running_survival(h: &[f64]) -> Vec<f64> {
    h.iter()
        .scan(1.0, |s, hz| {
            *s *= 1.0 - hz;
            Some(*s)
        })
        .collect()
}

/// Per-patient loss
/// `-[c log S(τ) + (1-c) log S(τ-1) + (1-c) log h(τ)]`
/// with every log argument floored at [`LOG_FLOOR`]. `interval` is τ, 1-based.
pub fn nll_value(h: &[f64], interval: usize, censorship: Censorship) -> f64 {
    let survival = running_survival(h);
    let at = |j: usize| if j == 0 { 1.0 } else { survival[j - 1] };
    let log = |x: f64| x.max(LOG_FLOOR).ln();
    match censorship {
        Censorship::Alive => -log(at(interval)),
        Censorship::Dead => -(log(at(interval - 1)) + log(h[interval - 1])),
    }
}

/// Gradient of [`nll_value`] with respect to the hazards.
pub fn nll_grad(h: &[f64], interval: usize, censorship: Censorship) -> Vec<f64> {
    let mut grad = vec![0.0; h.len()];
    // d/dh_z of -log S(j) for z <= j, zero where the floor is active.
    let add_log_survival = |grad: &mut [f64], j: usize| {
        let s: f64 = h[..j].iter().map(|x| 1.0 - x).product();
        if s <= LOG_FLOOR {
            return;
        }
        for z in 0..j {
            let others: f64 = h[..j]
                .iter()
                .enumerate()
                .filter(|(w, _)| *w != z)
                .map(|(_, x)| 1.0 - x)
                .product();
            grad[z] += others / s;
        }
    };
    match censorship {
        Censorship::Alive => add_log_survival(&mut grad, interval),
        Censorship::Dead => {
            add_log_survival(&mut grad, interval - 1);
            let ht = h[interval - 1];
            if ht > LOG_FLOOR {
                grad[interval - 1] -= 1.0 / ht;
            }
        }
    }
    grad
}

/// Likelihood term of one patient. Fails when the interval is out of range.
pub fn nll_loss(h: &HazardVector, interval: usize, censorship: Censorship) -> Result<f64> {
    if interval == 0 || interval > h.len() {
        return Err(Error::Interval {
            interval,
            n_intervals: h.len(),
        });
    }
    Ok(nll_value(h.as_slice(), interval, censorship))
}

/// Summed loss over a batch of `(hazards, interval, censorship)` triples.
pub fn batch_nll<'a>(
    batch: impl IntoIterator<Item = (&'a HazardVector, usize, Censorship)>,
) -> Result<f64> {
    batch
        .into_iter()
        .map(|(h, interval, c)| nll_loss(h, interval, c))
        .sum()
}

/// Scalar risk `-Σ_j S(j)`; larger means shorter expected survival.
pub fn risk_score(h: &HazardVector) -> f64 {
    -running_survival(h.as_slice()).iter().sum::<f64>()
}

/// Harrell's C. A pair `(i, j)` is comparable when `t_i < t_j` and patient
/// `i` had an observed event; it is concordant when `risk_i > risk_j`, and
/// tied risks count one half.
pub fn concordance_index(risks: &[f64], times: &[f64], censorship: &[Censorship]) -> Result<f64> {
    assert_eq!(risks.len(), times.len());
    assert_eq!(risks.len(), censorship.len());
    let mut concordant = 0.0;
    let mut comparable = 0u64;
    for i in 0..risks.len() {
        if censorship[i].is_censored() {
            continue;
        }
        for j in 0..risks.len() {
            if times[i] < times[j] {
                comparable += 1;
                if risks[i] > risks[j] {
                    concordant += 1.0;
                } else if risks[i] == risks[j] {
                    concordant += 0.5;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok(concordant / comparable as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hv(v: &[f64]) -> HazardVector {
        HazardVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_hazard_keeps_everyone_alive() {
        assert_eq!(cumulative_survival(&hv(&[0.0; 4])).as_slice(), &[1.0; 4]);
    }

    #[test]
    fn half_hazards_halve_survival() {
        assert_eq!(cumulative_survival(&hv(&[0.5, 0.5])).as_slice(), &[0.5, 0.25]);
    }

    #[test]
    fn censored_first_interval_loss() {
        let loss = nll_loss(&hv(&[0.5, 0.3]), 1, Censorship::Alive).unwrap();
        assert!((loss - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn uncensored_first_interval_uses_unit_prior_survival() {
        let loss = nll_loss(&hv(&[0.5, 0.5]), 1, Censorship::Dead).unwrap();
        assert!((loss - 0.693_147_180_559_945_3).abs() < 1e-12);
    }

    #[test]
    fn three_patient_batch_matches_hand_sum() {
        let a = hv(&[0.2, 0.4, 0.1]);
        let b = hv(&[0.3, 0.5, 0.6]);
        let c = hv(&[0.9, 0.2, 0.3]);
        let total = batch_nll([
            (&a, 2, Censorship::Dead),
            (&b, 3, Censorship::Alive),
            (&c, 1, Censorship::Dead),
        ])
        .unwrap();
        // -[ln .8 + ln .4] - ln(.7 * .5 * .4) - ln .9
        assert!((total - 3.210_907_655_219_024).abs() < 1e-10);
    }

    #[test]
    fn interval_out_of_range_is_rejected() {
        assert!(matches!(
            nll_loss(&hv(&[0.5, 0.5]), 3, Censorship::Dead),
            Err(Error::Interval { .. })
        ));
        assert!(nll_loss(&hv(&[0.5, 0.5]), 0, Censorship::Dead).is_err());
    }

    #[test]
    fn risk_extremes() {
        assert!((risk_score(&hv(&[1e-15; 4])) + 4.0).abs() < 1e-12);
        let high = risk_score(&hv(&[1.0 - 1e-12; 4]));
        assert!(high > -1e-10 && high < 0.0);
        assert!(high > risk_score(&hv(&[1e-15; 4])));
    }

    #[test]
    fn risk_increases_with_any_hazard() {
        let base = [0.1, 0.3, 0.2, 0.6];
        for j in 0..4 {
            let mut prev = risk_score(&hv(&base));
            for step in 1..50 {
                let mut h = base;
                h[j] = base[j] + (0.99 - base[j]) * step as f64 / 50.0;
                let r = risk_score(&hv(&h));
                assert!(r > prev, "interval {j} step {step}");
                prev = r;
            }
        }
    }

    #[test]
    fn cindex_perfect_and_tied() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let dead = [Censorship::Dead; 4];
        assert_eq!(concordance_index(&[4.0, 3.0, 2.0, 1.0], &times, &dead).unwrap(), 1.0);
        assert_eq!(concordance_index(&[1.0; 4], &times, &dead).unwrap(), 0.5);
    }

    #[test]
    fn cindex_without_comparable_pairs_is_an_error() {
        let r = concordance_index(&[1.0, 2.0], &[1.0, 2.0], &[Censorship::Alive; 2]);
        assert!(matches!(r, Err(Error::NoComparablePairs)));
    }

    proptest! {
        #[test]
        fn curve_is_monotone(h in proptest::collection::vec(0.0f64..=1.0, 1..12)) {
            let s = cumulative_survival(&hv(&h));
            let mut prev = 1.0;
            for &v in s.as_slice() {
                prop_assert!(v <= prev && v >= 0.0);
                prev = v;
            }
        }

        #[test]
        fn nll_is_nonnegative(
            h in proptest::collection::vec(0.0f64..=1.0, 1..8),
            pick in 0usize..8,
            censored in any::<bool>(),
        ) {
            let tau = pick % h.len() + 1;
            let c = if censored { Censorship::Alive } else { Censorship::Dead };
            prop_assert!(nll_loss(&hv(&h), tau, c).unwrap() >= 0.0);
        }

        #[test]
        fn nll_gradient_matches_finite_differences(
            h in proptest::collection::vec(0.02f64..0.98, 1..6),
            pick in 0usize..6,
            censored in any::<bool>(),
        ) {
            let tau = pick % h.len() + 1;
            let c = if censored { Censorship::Alive } else { Censorship::Dead };
            let g = nll_grad(&h, tau, c);
            let eps = 1e-6;
            for z in 0..h.len() {
                let mut p = h.clone();
                p[z] += eps;
                let mut m = h.clone();
                m[z] -= eps;
                let numeric = (nll_value(&p, tau, c) - nll_value(&m, tau, c)) / (2.0 * eps);
                let rel = (g[z] - numeric).abs() / g[z].abs().max(numeric.abs()).max(1e-8);
                prop_assert!(rel < 1e-6, "z={} analytic={} numeric={}", z, g[z], numeric);
            }
        }

        #[test]
        fn cindex_invariant_under_increasing_transform(
            risks in proptest::collection::vec(-5.0f64..5.0, 10),
            times in proptest::collection::vec(0.1f64..100.0, 10),
            bits in proptest::collection::vec(any::<bool>(), 10),
        ) {
            let mut c: Vec<_> = bits.iter().map(|&b| if b { Censorship::Alive } else { Censorship::Dead }).collect();
            c[0] = Censorship::Dead;
            let mut t = times.clone();
            t[0] = 0.01;
            let base = concordance_index(&risks, &t, &c).unwrap();
            let warped: Vec<f64> = risks.iter().map(|r| r.exp() * 3.0 + r.powi(3)).collect();
            prop_assert_eq!(base, concordance_index(&warped, &t, &c).unwrap());
        }
    }
}
