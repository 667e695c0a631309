//! Per-neuron statistics over a reference corpus.
//!
//! For every neuron of the dissection layer the index stores its spatial
//! maximum on each corpus image (the activation table, which doubles as the
//! neuron embedding) and a global threshold: the nearest-rank `tau`-quantile
//! of all spatial activation values the neuron produced across the corpus.

mod file;
mod maps;

pub use file::{load_index, save_index, INDEX_MAGIC, INDEX_VERSION};
pub use maps::{activation_mask, threshold_plane};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusEntry, CorpusError, ReferenceCorpus};
use crate::model::{InferenceError, Model, NeuronRef};
use crate::tensor::FeatureTensor;

pub const DEFAULT_TAU: f64 = 0.99;
pub const DEFAULT_SAMPLE_RATE: f64 = 0.1;
pub const DEFAULT_TOP_K: usize = 12;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("reference corpus is empty")]
    EmptyCorpus,
    #[error("quantile level must lie strictly between 0 and 1, got {0}")]
    InvalidTau(f64),
    #[error("sample rate must lie in (0, 1], got {0}")]
    InvalidSampleRate(f64),
    #[error("unknown neuron {0}")]
    UnknownNeuron(NeuronRef),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("non-finite activation value")]
    NonFinite,
    #[error("cannot upsample a {}x{} map to {}x{}", map.0, map.1, output.0, output.1)]
    OutputTooSmall {
        map: (usize, usize),
        output: (usize, usize),
    },
    #[error("index was built for model {found}, but the loaded model is {expected}")]
    StaleIndex { expected: String, found: String },
    #[error("index file does not start with the expected magic bytes")]
    BadMagic,
    #[error("unsupported index format version {0}")]
    UnsupportedVersion(u32),
    #[error("index file is truncated")]
    Truncated,
    #[error("malformed index: {0}")]
    Malformed(String),
    #[error("image {image_id}: {source}")]
    Image {
        image_id: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub tau: f64,
    /// Fraction of spatial positions pooled into the quantile estimate.
    pub sample_rate: f64,
    /// Offsets the sampling stride; irrelevant when `sample_rate` is 1.
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed: 0,
        }
    }
}

impl IndexConfig {
    pub fn exhaustive(tau: f64) -> Self {
        Self {
            tau,
            sample_rate: 1.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), IndexError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(IndexError::InvalidTau(self.tau));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(IndexError::InvalidSampleRate(self.sample_rate));
        }
        Ok(())
    }

    /// Every `step`-th flattened spatial position is sampled.
    pub fn sample_step(&self) -> usize {
        ((1.0 / self.sample_rate).round() as usize).max(1)
    }

    /// First sampled position for corpus image `image`.
    pub fn sample_offset(&self, image: usize) -> usize {
        let step = self.sample_step() as u64;
        (self.seed.wrapping_add(image as u64) % step) as usize
    }
}

/// Neuron-major `neurons × images` matrix of spatial-max activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTable {
    pub layer: usize,
    neurons: usize,
    images: usize,
    values: Vec<f32>,
}

impl ActivationTable {
    pub fn new(layer: usize, neurons: usize, images: usize, values: Vec<f32>) -> Result<Self, IndexError> {
        if values.len() != neurons * images {
            return Err(IndexError::Malformed(format!(
                "table {neurons}x{images} needs {} values, got {}",
                neurons * images,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite);
        }
        Ok(Self {
            layer,
            neurons,
            images,
            values,
        })
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, neuron: usize, image: usize) -> f32 {
        self.values[neuron * self.images + image]
    }

    pub fn row(&self, neuron: usize) -> &[f32] {
        &self.values[neuron * self.images..(neuron + 1) * self.images]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.images.max(1)).take(self.neurons)
    }

    /// Resolves a neuron reference to its row, checking layer and range.
    pub fn row_index(&self, neuron: NeuronRef) -> Result<usize, IndexError> {
        if neuron.layer != self.layer || neuron.channel >= self.neurons {
            return Err(IndexError::UnknownNeuron(neuron));
        }
        Ok(neuron.channel)
    }

    /// `(corpus position, activation)` of the `k` largest entries of a row,
    /// descending, ties broken by ascending position.
    pub fn top_k(&self, neuron: NeuronRef, k: usize) -> Result<Vec<(usize, f32)>, IndexError> {
        let row = self.row(self.row_index(neuron)?);
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        let mut ranked: Vec<(usize, f32)> = row.iter().copied().enumerate().collect();
        let order = |a: &(usize, f32), b: &(usize, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        let k = k.min(ranked.len());
        if k < ranked.len() {
            ranked.select_nth_unstable_by(k - 1, order);
            ranked.truncate(k);
        }
        ranked.sort_unstable_by(order);
        Ok(ranked)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileThresholds {
    pub tau: f64,
    pub values: Vec<f32>,
}

impl QuantileThresholds {
    pub fn get(&self, channel: usize) -> f32 {
        self.values[channel]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// 1-based nearest rank `⌈tau · n⌉`, clamped to `1..=n`.
///
/// Products within rounding noise of an integer are treated as that integer
/// so that e.g. `0.99 · 100` ranks 99 rather than 100.
pub fn nearest_rank(tau: f64, n: usize) -> usize {
    let r = tau * n as f64;
    let nearest = r.round();
    let rank = if (r - nearest).abs() <= 1e-9 * (n as f64).max(1.0) {
        nearest
    } else {
        r.ceil()
    };
    (rank as usize).clamp(1, n.max(1))
}

/// Nearest-rank empirical quantile. Reorders `values`.
pub fn nearest_rank_quantile(values: &mut [f32], tau: f64) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    let rank = nearest_rank(tau, values.len());
    let (_, q, _) = values.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    Some(*q)
}

/// A neuron's ranked corpus image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedImage {
    pub image_id: String,
    pub position: usize,
    pub activation: f32,
}

/// Immutable snapshot of everything derived from the reference corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationIndex {
    pub model_fingerprint: String,
    pub config: IndexConfig,
    pub manifest: Vec<CorpusEntry>,
    pub table: ActivationTable,
    pub thresholds: QuantileThresholds,
}

impl ActivationIndex {
    pub fn layer(&self) -> usize {
        self.table.layer
    }

    pub fn neuron_count(&self) -> usize {
        self.table.neurons()
    }

    pub fn neurons(&self) -> impl Iterator<Item = NeuronRef> + '_ {
        (0..self.table.neurons()).map(|c| NeuronRef::new(self.table.layer, c))
    }

    pub fn threshold(&self, neuron: NeuronRef) -> Result<f32, IndexError> {
        Ok(self.thresholds.get(self.table.row_index(neuron)?))
    }

    pub fn top_k_images(&self, neuron: NeuronRef, k: usize) -> Result<Vec<RankedImage>, IndexError> {
        Ok(self
            .table
            .top_k(neuron, k)?
            .into_iter()
            .map(|(position, activation)| RankedImage {
                image_id: self.manifest[position].image_id.clone(),
                position,
                activation,
            })
            .collect())
    }

    /// Fails with [`IndexError::StaleIndex`] unless the index was built
    /// from this exact model.
    pub fn ensure_model(&self, model: &Model) -> Result<(), IndexError> {
        if self.model_fingerprint != model.fingerprint() {
            return Err(IndexError::StaleIndex {
                expected: model.fingerprint().to_string(),
                found: self.model_fingerprint.clone(),
            });
        }
        Ok(())
    }
}

/// Per-image contribution to the index.
struct ImageStats {
    maxima: Vec<f32>,
    /// `samples[neuron]` holds the sampled spatial values of that neuron.
    samples: Vec<Vec<f32>>,
}

fn image_stats(maps: &FeatureTensor, step: usize, offset: usize) -> ImageStats {
    let maxima = maps.channel_maxima();
    let samples = (0..maps.channels())
        .map(|c| maps.channel(c).iter().skip(offset).step_by(step).copied().collect())
        .collect();
    ImageStats { maxima, samples }
}

/// Builds the index over `entries`, obtaining each image's `[0, 1]` patch
/// from `load`. Images are processed in parallel; the result does not depend
/// on scheduling.
pub fn build_index_with<F>(
    model: &Model,
    entries: Vec<CorpusEntry>,
    config: IndexConfig,
    load: F,
) -> Result<ActivationIndex, IndexError>
where
    F: Fn(usize) -> Result<FeatureTensor, IndexError> + Sync,
{
    config.validate()?;
    if entries.is_empty() {
        return Err(IndexError::EmptyCorpus);
    }
    let step = config.sample_step();
    let stats: Vec<ImageStats> = (0..entries.len())
        .into_par_iter()
        .map(|j| {
            let patch = load(j)?;
            let result = model.infer_patch(&patch)?;
            Ok(image_stats(&result.dissection_maps, step, config.sample_offset(j)))
        })
        .collect::<Result<_, IndexError>>()?;

    let neurons = model.neuron_count();
    let images = entries.len();
    let mut values = vec![0.0f32; neurons * images];
    for (j, s) in stats.iter().enumerate() {
        for (i, &m) in s.maxima.iter().enumerate() {
            values[i * images + j] = m;
        }
    }
    let table = ActivationTable::new(model.dissection_layer(), neurons, images, values)?;

    let thresholds: Vec<f32> = (0..neurons)
        .into_par_iter()
        .map(|i| {
            let mut pooled: Vec<f32> = stats.iter().flat_map(|s| s.samples[i].iter().copied()).collect();
            nearest_rank_quantile(&mut pooled, config.tau).unwrap_or(0.0)
        })
        .collect();

    Ok(ActivationIndex {
        model_fingerprint: model.fingerprint().to_string(),
        config,
        manifest: entries,
        table,
        thresholds: QuantileThresholds {
            tau: config.tau,
            values: thresholds,
        },
    })
}

/// Builds the index by decoding every corpus image from disk.
pub fn build_index(
    model: &Model,
    corpus: &ReferenceCorpus,
    config: IndexConfig,
) -> Result<ActivationIndex, IndexError> {
    build_index_with(model, corpus.entries().to_vec(), config, |j| {
        corpus.load(j).map(|img| img.to_tensor()).map_err(IndexError::from)
    })
}
