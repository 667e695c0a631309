//! Region queries: which neurons' activation masks overlap a user-drawn region?
//!
//! Masks are derived on the fly from the retained dissection maps of the
//! patch under inspection, at the patch's input resolution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{threshold_plane, IndexError, QuantileThresholds};
use crate::mask::{iou, BinaryMask, MaskError};
use crate::model::{InferenceResult, NeuronRef};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.2;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("no region was drawn")]
    EmptyRegion,
    #[error("region is {}x{} but the patch is {}x{}", got.0, got.1, expected.0, expected.1)]
    ResolutionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("{thresholds} thresholds for {neurons} neurons")]
    ThresholdCount { thresholds: usize, neurons: usize },
    #[error("patch has no dissection maps")]
    NoNeurons,
    #[error("iou threshold must be a finite number, got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronScore {
    pub neuron: NeuronRef,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    /// Descending by IoU, ties by ascending channel; all entries pass the threshold.
    pub matches: Vec<NeuronScore>,
    pub query_mask: BinaryMask,
    pub iou_threshold: f64,
    pub patch_id: Option<String>,
}

impl QueryResult {
    pub fn with_patch_id(mut self, patch_id: impl Into<String>) -> Self {
        self.patch_id = Some(patch_id.into());
        self
    }

    pub fn neurons(&self) -> Vec<NeuronRef> {
        self.matches.iter().map(|m| m.neuron).collect()
    }
}

fn check_thresholds(result: &InferenceResult, thresholds: &QuantileThresholds) -> Result<(), QueryError> {
    if result.neuron_count() == 0 {
        return Err(QueryError::NoNeurons);
    }
    if thresholds.len() != result.neuron_count() {
        return Err(QueryError::ThresholdCount {
            thresholds: thresholds.len(),
            neurons: result.neuron_count(),
        });
    }
    Ok(())
}

fn check_region(result: &InferenceResult, region: &BinaryMask) -> Result<(), QueryError> {
    let expected = (result.input_width, result.input_height);
    let got = (region.width(), region.height());
    if expected != got {
        return Err(QueryError::ResolutionMismatch { expected, got });
    }
    if region.is_blank() {
        return Err(QueryError::EmptyRegion);
    }
    Ok(())
}

/// Activation mask of one neuron on the patch, at input resolution.
pub fn neuron_mask(
    result: &InferenceResult,
    thresholds: &QuantileThresholds,
    channel: usize,
) -> Result<BinaryMask, QueryError> {
    check_thresholds(result, thresholds)?;
    let maps = &result.dissection_maps;
    if channel >= maps.channels() {
        return Err(IndexError::UnknownNeuron(result.neuron(channel)).into());
    }
    Ok(threshold_plane(
        maps.channel(channel),
        maps.width(),
        maps.height(),
        thresholds.get(channel),
        result.input_width,
        result.input_height,
    )?)
}

/// Activation masks of every neuron, in channel order.
pub fn neuron_masks(result: &InferenceResult, thresholds: &QuantileThresholds) -> Result<Vec<BinaryMask>, QueryError> {
    check_thresholds(result, thresholds)?;
    (0..result.neuron_count())
        .into_par_iter()
        .map(|c| neuron_mask(result, thresholds, c))
        .collect()
}

/// IoU of `region` against each mask, in mask order.
pub fn iou_scan(region: &BinaryMask, masks: &[BinaryMask]) -> Result<Vec<f64>, MaskError> {
    masks.par_iter().map(|m| iou(region, m)).collect()
}

/// Sorts descending by IoU with ascending channel as the tie-break and drops
/// everything below `threshold`.
pub fn rank_scores(mut scores: Vec<NeuronScore>, threshold: f64) -> Vec<NeuronScore> {
    scores.retain(|s| s.iou >= threshold);
    scores.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.neuron.channel.cmp(&b.neuron.channel)));
    scores
}

/// IoU of the region against every neuron's mask, in channel order.
pub fn score_neurons(
    result: &InferenceResult,
    region: &BinaryMask,
    thresholds: &QuantileThresholds,
) -> Result<Vec<NeuronScore>, QueryError> {
    check_region(result, region)?;
    score_masks(result, region, &neuron_masks(result, thresholds)?)
}

/// Like [`score_neurons`] but over precomputed masks.
pub fn score_masks(
    result: &InferenceResult,
    region: &BinaryMask,
    masks: &[BinaryMask],
) -> Result<Vec<NeuronScore>, QueryError> {
    check_region(result, region)?;
    Ok(iou_scan(region, masks)?
        .into_iter()
        .enumerate()
        .map(|(c, iou)| NeuronScore {
            neuron: result.neuron(c),
            iou,
        })
        .collect())
}

/// Neurons whose activation mask overlaps `region` with IoU of at least
/// `iou_threshold`.
pub fn query_by_region(
    result: &InferenceResult,
    region: &BinaryMask,
    thresholds: &QuantileThresholds,
    iou_threshold: f64,
) -> Result<QueryResult, QueryError> {
    if iou_threshold.is_nan() {
        return Err(QueryError::InvalidThreshold(iou_threshold));
    }
    let scores = score_neurons(result, region, thresholds)?;
    Ok(QueryResult {
        matches: rank_scores(scores, iou_threshold),
        query_mask: region.clone(),
        iou_threshold,
        patch_id: None,
    })
}

/// The neuron whose mask best overlaps `region`, regardless of threshold.
pub fn best_aligned_neuron(
    result: &InferenceResult,
    region: &BinaryMask,
    thresholds: &QuantileThresholds,
) -> Result<(NeuronRef, f64, BinaryMask), QueryError> {
    let masks = neuron_masks(result, thresholds)?;
    let best = best_of(score_masks(result, region, &masks)?)?;
    let channel = best.neuron.channel;
    Ok((
        best.neuron,
        best.iou,
        masks.into_iter().nth(channel).expect("mask per neuron"),
    ))
}

pub(crate) fn best_of(scores: Vec<NeuronScore>) -> Result<NeuronScore, QueryError> {
    rank_scores(scores, f64::NEG_INFINITY)
        .into_iter()
        .next()
        .ok_or(QueryError::NoNeurons)
}

/// Channel with the largest spatial-max activation on the patch (ties to the
/// lowest channel), its maximum, and its activation mask.
pub fn most_activated_neuron(
    result: &InferenceResult,
    thresholds: &QuantileThresholds,
) -> Result<(NeuronRef, f32, BinaryMask), QueryError> {
    check_thresholds(result, thresholds)?;
    let maxima = result.max_activations();
    let mut best = 0;
    for (c, &m) in maxima.iter().enumerate() {
        if m > maxima[best] {
            best = c;
        }
    }
    let mask = neuron_mask(result, thresholds, best)?;
    Ok((result.neuron(best), maxima[best], mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FeatureTensor;

    fn result_with_maps(maps: FeatureTensor, input: usize) -> InferenceResult {
        InferenceResult {
            class_scores: vec![0.5, 0.5],
            dissection_maps: maps,
            dissection_layer: 4,
            input_height: input,
            input_width: input,
        }
    }

    fn thresholds(values: Vec<f32>) -> QuantileThresholds {
        QuantileThresholds { tau: 0.99, values }
    }

    #[test]
    fn most_activated_picks_largest_max() {
        let mut maps = FeatureTensor::zeros(3, 2, 2);
        maps.set(0, 0, 0, 0.1);
        maps.set(1, 1, 1, 0.9);
        maps.set(2, 0, 1, 0.4);
        let r = result_with_maps(maps, 4);
        let (n, max, _) = most_activated_neuron(&r, &thresholds(vec![0.0; 3])).unwrap();
        assert_eq!((n.channel, max), (1, 0.9));
    }

    #[test]
    fn most_activated_ties_go_to_channel_zero() {
        let r = result_with_maps(FeatureTensor::filled(3, 2, 2, 0.7), 4);
        let (n, _, mask) = most_activated_neuron(&r, &thresholds(vec![0.5; 3])).unwrap();
        assert_eq!(n, NeuronRef::new(4, 0));
        assert_eq!(mask.count(), 16);
    }

    #[test]
    fn empty_region_rejected() {
        let r = result_with_maps(FeatureTensor::zeros(1, 2, 2), 4);
        let err = query_by_region(&r, &BinaryMask::new(4, 4), &thresholds(vec![0.0]), 0.2).unwrap_err();
        assert!(matches!(err, QueryError::EmptyRegion));
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let r = result_with_maps(FeatureTensor::zeros(1, 2, 2), 4);
        let err = query_by_region(&r, &BinaryMask::full(8, 4), &thresholds(vec![0.0]), 0.2).unwrap_err();
        assert!(matches!(
            err,
            QueryError::ResolutionMismatch {
                expected: (4, 4),
                got: (8, 4)
            }
        ));
    }

    #[test]
    fn threshold_above_one_returns_nothing() {
        let r = result_with_maps(FeatureTensor::filled(2, 2, 2, 1.0), 4);
        let q = query_by_region(&r, &BinaryMask::full(4, 4), &thresholds(vec![0.0; 2]), 1.0 + 1e-9).unwrap();
        assert!(q.matches.is_empty());
        let q = query_by_region(&r, &BinaryMask::full(4, 4), &thresholds(vec![0.0; 2]), 1.0).unwrap();
        assert_eq!(q.matches.len(), 2);
    }

    #[test]
    fn single_neuron_is_always_best() {
        let r = result_with_maps(FeatureTensor::zeros(1, 2, 2), 4);
        let (n, iou, mask) =
            best_aligned_neuron(&r, &BinaryMask::rect(4, 4, 0, 0, 1, 1), &thresholds(vec![0.0])).unwrap();
        assert_eq!((n.channel, iou), (0, 0.0));
        assert!(mask.is_blank());
    }

    #[test]
    fn threshold_count_checked() {
        let r = result_with_maps(FeatureTensor::zeros(2, 2, 2), 4);
        assert!(matches!(
            neuron_masks(&r, &thresholds(vec![0.0])),
            Err(QueryError::ThresholdCount {
                thresholds: 1,
                neurons: 2
            })
        ));
    }
}
