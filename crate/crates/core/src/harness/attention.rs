//! Attention mass of one patient under each availability combo.

use serde::{Deserialize, Serialize};

use crate::cohort::Patient;
use crate::error::{Error, Result};
use crate::multipro::{Scenario, Stage2Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub scenario: String,
    /// `1 + K_p + K_g` values: mean attention received per fusion position.
    pub mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub patient: String,
    pub profiles: Vec<AttentionProfile>,
    /// Cosine of each profile against the complete-modality one.
    pub cosine_to_complete: Vec<(String, f64)>,
}

impl AttentionDump {
    pub fn cosine(&self, scenario: Scenario) -> f64 {
        self.cosine_to_complete
            .iter()
            .find(|(s, _)| s == scenario.label())
            .map(|(_, c)| *c)
            .expect("every scenario is profiled")
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Profiles of a complete patient under every scenario, trained or not.
pub fn attention_profiles(model: &Stage2Model, patient: &Patient) -> Result<AttentionDump> {
    if !patient.is_complete() {
        return Err(Error::Config(format!(
            "patient {} needs both modalities for an attention dump",
            patient.id
        )));
    }
    let profiles = Scenario::ALL
        .into_iter()
        .map(|s| {
            Ok(AttentionProfile {
                scenario: s.label().to_string(),
                mass: model.infer(&s.view(patient))?.attention_mass,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let complete = &profiles
        .iter()
        .find(|p| p.scenario == Scenario::Complete.label())
        .expect("complete scenario profiled")
        .mass;
    let cosine_to_complete = profiles
        .iter()
        .map(|p| (p.scenario.clone(), cosine(&p.mass, complete)))
        .collect();
    Ok(AttentionDump {
        patient: patient.id.clone(),
        profiles,
        cosine_to_complete,
    })
}

/// [`attention_profiles`] for a trained model only.
pub fn dump_attention(model: &Stage2Model, patient: &Patient) -> Result<AttentionDump> {
    if !model.trained {
        return Err(Error::Untrained("attention dumps need a trained Stage-2 model".into()));
    }
    attention_profiles(model, patient)
}
