//! Per-concept explainability reports for one patch.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Labeling;
use crate::index::QuantileThresholds;
use crate::mask::BinaryMask;
use crate::model::{InferenceResult, NeuronRef};
use crate::query::{neuron_masks, score_masks, QueryError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no neurons are labeled yet")]
    Unavailable,
    #[error("labeled neuron {0} is not part of this patch's dissection layer")]
    ForeignNeuron(NeuronRef),
    #[error(transparent)]
    Query(#[from] QueryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    /// Mean spatial-max activation of each concept's neurons.
    ActivationValue,
    /// Mean IoU between the user region and each concept's neuron masks.
    ActivationArea,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: String,
    pub mean: f64,
    pub neuron_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub kind: ReportKind,
    /// Concepts with at least one labeled neuron, in concept creation order.
    pub entries: Vec<ConceptScore>,
}

impl ConceptReport {
    pub fn get(&self, concept: &str) -> Option<&ConceptScore> {
        self.entries.iter().find(|e| e.concept == concept)
    }
}

/// Averages per-neuron values by concept. Concepts are ordered by their
/// position in `labeling`; the result does not depend on input order.
pub fn concept_means<'a>(labeling: &Labeling, values: impl IntoIterator<Item = (&'a str, f64)>) -> Vec<ConceptScore> {
    let mut grouped: HashMap<&str, Vec<f64>> = HashMap::new();
    for (concept, v) in values {
        grouped.entry(concept).or_default().push(v);
    }
    let mut entries: Vec<ConceptScore> = grouped
        .into_iter()
        .map(|(concept, mut vs)| {
            // fixed summation order keeps the mean bit-stable under shuffling
            vs.sort_by(f64::total_cmp);
            ConceptScore {
                concept: concept.to_string(),
                mean: vs.iter().sum::<f64>() / vs.len() as f64,
                neuron_count: vs.len(),
            }
        })
        .collect();
    entries.sort_by_key(|e| {
        (
            labeling.concept_rank(&e.concept).unwrap_or(usize::MAX),
            e.concept.clone(),
        )
    });
    entries
}

fn labeled_channels<'a>(
    result: &InferenceResult,
    labeling: &'a Labeling,
) -> Result<Vec<(usize, &'a str)>, ReportError> {
    if labeling.is_unlabeled() {
        return Err(ReportError::Unavailable);
    }
    labeling
        .assignments()
        .iter()
        .map(|(n, concept)| {
            if n.layer != result.dissection_layer || n.channel >= result.neuron_count() {
                Err(ReportError::ForeignNeuron(*n))
            } else {
                Ok((n.channel, concept.as_str()))
            }
        })
        .collect()
}

/// Mean spatial-max activation on this patch of the neurons under each concept.
pub fn activation_report(result: &InferenceResult, labeling: &Labeling) -> Result<ConceptReport, ReportError> {
    let labeled = labeled_channels(result, labeling)?;
    let maxima = result.max_activations();
    Ok(ConceptReport {
        kind: ReportKind::ActivationValue,
        entries: concept_means(
            labeling,
            labeled.into_iter().map(|(c, concept)| (concept, maxima[c] as f64)),
        ),
    })
}

/// Mean IoU between `region` and the activation masks of each concept's neurons.
pub fn region_report(
    result: &InferenceResult,
    region: &BinaryMask,
    thresholds: &QuantileThresholds,
    labeling: &Labeling,
) -> Result<ConceptReport, ReportError> {
    let labeled = labeled_channels(result, labeling)?;
    let masks = neuron_masks(result, thresholds)?;
    let scores = score_masks(result, region, &masks)?;
    Ok(ConceptReport {
        kind: ReportKind::ActivationArea,
        entries: concept_means(
            labeling,
            labeled.into_iter().map(|(c, concept)| (concept, scores[c].iou)),
        ),
    })
}
