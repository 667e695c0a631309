//! Long-lived session state and the operations behind each endpoint.
//!
//! Everything here is synchronous and HTTP-agnostic; the router only moves
//! JSON in and out.

use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::Arc;

use dissect_core::atlas::{project_table, Projection};
use dissect_core::concepts::{
    self, format_timestamp, Concept, ConceptReport, ConceptStore, LabelContext, Labeling, NeuronSpace,
};
use dissect_core::corpus::{GrayImage, ReferenceCorpus};
use dissect_core::index::{load_index, ActivationIndex, DEFAULT_TOP_K};
use dissect_core::model::load_weights;
use dissect_core::patches::{extract, grid_patches, PatchRef, Provenance};
use dissect_core::query::{self, DEFAULT_IOU_THRESHOLD};
use dissect_core::{BinaryMask, InferenceResult, Model, NeuronRef, RleMask};
use lru::LruCache;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Categorical palette for concepts, assigned in creation order.
pub const PALETTE: [&str; 10] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
];
/// Color of neurons without a label.
pub const UNLABELED_COLOR: &str = "#7f7f7f";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    pub patch_size: usize,
    /// Patches scoring at least this much are flagged as lesions.
    pub lesion_threshold: f32,
    /// Retained inference results; 0 disables the cache.
    pub cache_capacity: usize,
    pub top_k: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            patch_size: dissect_core::patches::DEFAULT_PATCH,
            lesion_threshold: 0.5,
            cache_capacity: 64,
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum CacheKey {
    Patch { image: usize, x: usize, y: usize },
    Reference(usize),
}

/// A parsed `image_id:x:y` patch id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PatchKey {
    image: usize,
    x: usize,
    y: usize,
}

// ---- wire types ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagesResponse {
    pub images: Vec<ImageInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPatch {
    pub patch_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub provenance: Provenance,
    pub score: f32,
    pub lesion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchesResponse {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub lesion_threshold: f32,
    pub patches: Vec<ScoredPatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MostActivated {
    pub neuron: NeuronRef,
    pub activation: f32,
    pub mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectResponse {
    pub patch_id: String,
    pub class_scores: Vec<f32>,
    pub score: f32,
    pub lesion: bool,
    pub most_activated: MostActivated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub mask: RleMask,
    #[serde(default)]
    pub iou_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestAligned {
    pub neuron: NeuronRef,
    pub iou: f64,
    pub mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub patch_id: String,
    pub iou_threshold: f64,
    pub matches: Vec<query::NeuronScore>,
    pub best_aligned: BestAligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopImage {
    pub image_id: String,
    pub position: usize,
    pub activation: f32,
    pub mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronResponse {
    pub neuron: NeuronRef,
    pub threshold: f32,
    pub label: Option<String>,
    pub top_images: Vec<TopImage>,
    pub patch_id: Option<String>,
    pub patch_mask: Option<RleMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub neuron: NeuronRef,
    pub x: f64,
    pub y: f64,
    pub label: Option<String>,
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub explained_variance_ratio: Vec<f64>,
    pub points: Vec<EmbeddingPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptView {
    pub id: String,
    pub display_name: String,
    pub created_at: String,
    pub color: String,
    pub neurons: Vec<NeuronRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptsResponse {
    pub concepts: Vec<ConceptView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewConcept {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub neurons: Vec<NeuronRef>,
    pub concept: String,
    #[serde(default)]
    pub patch_id: Option<String>,
    #[serde(default)]
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRequest {
    pub mask: RleMask,
}

/// Paths a session is opened from.
#[derive(Debug, Clone)]
pub struct SessionPaths {
    pub model: PathBuf,
    pub index: PathBuf,
    /// Browsable images.
    pub corpus: PathBuf,
    /// Root the index manifest paths are relative to.
    pub reference: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Inference(#[from] dissect_core::model::InferenceError),
    #[error(transparent)]
    Index(#[from] dissect_core::index::IndexError),
    #[error(transparent)]
    Corpus(#[from] dissect_core::corpus::CorpusError),
    #[error(transparent)]
    Concepts(#[from] concepts::ConceptError),
    #[error(transparent)]
    Atlas(#[from] dissect_core::atlas::AtlasError),
    #[error("image id {0:?} may not contain ':' or '/'")]
    BadImageId(String),
    #[error("patch size must be positive")]
    ZeroPatch,
}

pub struct Session {
    model: Model,
    index: ActivationIndex,
    projection: Projection,
    images: ReferenceCorpus,
    dims: Vec<(usize, usize)>,
    reference: ReferenceCorpus,
    config: SessionConfig,
    store: Mutex<ConceptStore>,
    labels: RwLock<Arc<Labeling>>,
    cache: Option<Mutex<LruCache<CacheKey, Arc<InferenceResult>>>>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("model", &self.model.fingerprint())
            .field("images", &self.images.len())
            .field("reference", &self.reference.len())
            .field("config", &self.config)
            .finish()
    }
}

impl Session {
    pub fn new(
        model: Model,
        index: ActivationIndex,
        images: ReferenceCorpus,
        reference_root: impl Into<PathBuf>,
        store: ConceptStore,
        config: SessionConfig,
    ) -> Result<Self, SessionError> {
        if config.patch_size == 0 {
            return Err(SessionError::ZeroPatch);
        }
        index.ensure_model(&model)?;
        if let Some(bad) = images
            .entries()
            .iter()
            .find(|e| e.image_id.contains(':') || e.image_id.contains('/'))
        {
            return Err(SessionError::BadImageId(bad.image_id.clone()));
        }
        let dims = (0..images.len())
            .map(|i| GrayImage::dimensions(images.path_of(i)))
            .collect::<Result<_, _>>()?;
        let reference = ReferenceCorpus::new(reference_root, index.manifest.clone())?;
        let projection = project_table(&index.table, 2)?;
        let labels = RwLock::new(Arc::new(store.snapshot()));
        let cache = NonZeroUsize::new(config.cache_capacity).map(|n| Mutex::new(LruCache::new(n)));
        Ok(Self {
            model,
            index,
            projection,
            images,
            dims,
            reference,
            config,
            store: Mutex::new(store),
            labels,
            cache,
        })
    }

    /// Loads weights, index, corpora and the label log from disk.
    pub fn open(paths: &SessionPaths, config: SessionConfig) -> Result<Self, SessionError> {
        let model = load_weights(&paths.model)?;
        let index = load_index(&paths.index, &model)?;
        let images = ReferenceCorpus::open(&paths.corpus)?;
        let space = NeuronSpace {
            layer: index.layer(),
            count: index.neuron_count(),
        };
        let store = ConceptStore::open(&paths.labels, space)?;
        Self::new(model, index, images, &paths.reference, store, config)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn index(&self) -> &ActivationIndex {
        &self.index
    }

    /// Current labeling; readers never block on writers for long.
    pub fn labeling(&self) -> Arc<Labeling> {
        self.labels.read().clone()
    }

    fn image_position(&self, image_id: &str) -> Result<usize, ApiError> {
        self.images
            .position(image_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown image {image_id:?}")))
    }

    fn patch_key(&self, patch_id: &str) -> Result<PatchKey, ApiError> {
        let unknown = || ApiError::not_found(format!("unknown patch {patch_id:?}"));
        let mut parts = patch_id.rsplitn(3, ':');
        let (Some(y), Some(x), Some(id)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(unknown());
        };
        let (Ok(x), Ok(y)) = (x.parse::<usize>(), y.parse::<usize>()) else {
            return Err(unknown());
        };
        let image = self.images.position(id).ok_or_else(unknown)?;
        let (w, h) = self.dims[image];
        if x >= w || y >= h {
            return Err(unknown());
        }
        Ok(PatchKey { image, x, y })
    }

    fn patch_id(&self, key: PatchKey) -> String {
        format!("{}:{}:{}", self.images.entries()[key.image].image_id, key.x, key.y)
    }

    fn patch_ref(&self, key: PatchKey) -> PatchRef {
        PatchRef {
            image_id: self.images.entries()[key.image].image_id.clone(),
            x: key.x,
            y: key.y,
            size: self.config.patch_size,
            provenance: Provenance::Grid,
        }
    }

    fn lookup(&self, key: CacheKey) -> Option<Arc<InferenceResult>> {
        self.cache.as_ref()?.lock().get(&key).cloned()
    }

    fn cached(
        &self,
        key: CacheKey,
        compute: impl FnOnce() -> Result<InferenceResult, ApiError>,
    ) -> Result<Arc<InferenceResult>, ApiError> {
        if let Some(hit) = self.lookup(key) {
            return Ok(hit);
        }
        let result = Arc::new(compute()?);
        if let Some(cache) = &self.cache {
            cache.lock().put(key, result.clone());
        }
        Ok(result)
    }

    fn infer(&self, key: PatchKey, image: Option<&GrayImage>) -> Result<Arc<InferenceResult>, ApiError> {
        self.cached(
            CacheKey::Patch {
                image: key.image,
                x: key.x,
                y: key.y,
            },
            || {
                let owned;
                let image = match image {
                    Some(img) => img,
                    None => {
                        owned = self.images.load(key.image)?;
                        &owned
                    }
                };
                Ok(self.model.infer_patch(&extract(image, &self.patch_ref(key)))?)
            },
        )
    }

    fn infer_reference(&self, position: usize) -> Result<Arc<InferenceResult>, ApiError> {
        self.cached(CacheKey::Reference(position), || {
            let img = self.reference.load(position)?;
            Ok(self.model.infer_patch(&img.to_tensor())?)
        })
    }

    fn positive_score(result: &InferenceResult) -> f32 {
        result.class_scores.last().copied().unwrap_or(0.0)
    }

    fn color_of(&self, labeling: &Labeling, concept: &str) -> String {
        let rank = labeling.concept_rank(concept).unwrap_or(0);
        PALETTE[rank % PALETTE.len()].to_string()
    }

    fn concept_view(&self, labeling: &Labeling, c: &Concept) -> ConceptView {
        ConceptView {
            id: c.id.clone(),
            display_name: c.display_name.clone(),
            created_at: format_timestamp(&c.created_at),
            color: self.color_of(labeling, &c.id),
            neurons: labeling.neurons_with(&c.id),
        }
    }

    fn region(&self, rle: &RleMask) -> Result<BinaryMask, ApiError> {
        let mask = BinaryMask::from_rle(rle)?;
        let size = self.config.patch_size;
        if (mask.width(), mask.height()) != (size, size) {
            return Err(ApiError::validation(format!(
                "mask is {}x{} but patches are {size}x{size}",
                mask.width(),
                mask.height()
            )));
        }
        Ok(mask)
    }

    // ---- endpoint operations ----

    pub fn images(&self) -> ImagesResponse {
        ImagesResponse {
            images: self
                .images
                .entries()
                .iter()
                .zip(&self.dims)
                .map(|(e, &(width, height))| ImageInfo {
                    image_id: e.image_id.clone(),
                    width,
                    height,
                })
                .collect(),
        }
    }

    /// The stored PNG file, byte for byte.
    pub fn image_png(&self, image_id: &str) -> Result<Vec<u8>, ApiError> {
        let i = self.image_position(image_id)?;
        std::fs::read(self.images.path_of(i)).map_err(|e| ApiError::internal(e.to_string()))
    }

    pub fn patches(&self, image_id: &str) -> Result<PatchesResponse, ApiError> {
        let image = self.image_position(image_id)?;
        let (width, height) = self.dims[image];
        let size = self.config.patch_size;
        let mut decoded: Option<GrayImage> = None;
        let mut patches = Vec::new();
        for p in grid_patches(image_id, width, height, size) {
            let key = PatchKey { image, x: p.x, y: p.y };
            let result = match self.lookup(CacheKey::Patch { image, x: p.x, y: p.y }) {
                Some(hit) => hit,
                None => {
                    // decode once and reuse for the remaining tiles
                    if decoded.is_none() {
                        decoded = Some(self.images.load(image)?);
                    }
                    self.infer(key, decoded.as_ref())?
                }
            };
            let score = Self::positive_score(&result);
            patches.push(ScoredPatch {
                patch_id: self.patch_id(key),
                x: p.x,
                y: p.y,
                size,
                provenance: p.provenance,
                score,
                lesion: score >= self.config.lesion_threshold,
            });
        }
        Ok(PatchesResponse {
            image_id: image_id.to_string(),
            width,
            height,
            patch_size: size,
            lesion_threshold: self.config.lesion_threshold,
            patches,
        })
    }

    pub fn select(&self, patch_id: &str) -> Result<SelectResponse, ApiError> {
        let key = self.patch_key(patch_id)?;
        let result = self.infer(key, None)?;
        let (neuron, activation, mask) = query::most_activated_neuron(&result, &self.index.thresholds)?;
        let score = Self::positive_score(&result);
        Ok(SelectResponse {
            patch_id: self.patch_id(key),
            class_scores: result.class_scores.clone(),
            score,
            lesion: score >= self.config.lesion_threshold,
            most_activated: MostActivated {
                neuron,
                activation,
                mask: mask.to_rle(),
            },
        })
    }

    pub fn query(&self, patch_id: &str, request: &QueryRequest) -> Result<QueryResponse, ApiError> {
        let key = self.patch_key(patch_id)?;
        let threshold = request.iou_threshold.unwrap_or(DEFAULT_IOU_THRESHOLD);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(ApiError::validation(format!(
                "iou_threshold must lie in [0, 1], got {threshold}"
            )));
        }
        let region = self.region(&request.mask)?;
        let result = self.infer(key, None)?;
        let thresholds = &self.index.thresholds;
        let found = query::query_by_region(&result, &region, thresholds, threshold)?;
        let (neuron, iou, mask) = query::best_aligned_neuron(&result, &region, thresholds)?;
        Ok(QueryResponse {
            patch_id: self.patch_id(key),
            iou_threshold: threshold,
            matches: found.matches,
            best_aligned: BestAligned {
                neuron,
                iou,
                mask: mask.to_rle(),
            },
        })
    }

    pub fn neuron(
        &self,
        layer: usize,
        channel: usize,
        patch_id: Option<&str>,
        k: Option<usize>,
    ) -> Result<NeuronResponse, ApiError> {
        let neuron = NeuronRef::new(layer, channel);
        let threshold = self.index.threshold(neuron)?;
        let k = k.unwrap_or(self.config.top_k);
        let mut top_images = Vec::new();
        for ranked in self.index.top_k_images(neuron, k)? {
            let result = self.infer_reference(ranked.position)?;
            top_images.push(TopImage {
                image_id: ranked.image_id,
                position: ranked.position,
                activation: ranked.activation,
                mask: query::neuron_mask(&result, &self.index.thresholds, channel)?.to_rle(),
            });
        }
        let (patch_id, patch_mask) = match patch_id {
            Some(id) => {
                let key = self.patch_key(id)?;
                let result = self.infer(key, None)?;
                let mask = query::neuron_mask(&result, &self.index.thresholds, channel)?;
                (Some(self.patch_id(key)), Some(mask.to_rle()))
            }
            None => (None, None),
        };
        Ok(NeuronResponse {
            neuron,
            threshold,
            label: self.labeling().label_of(neuron).map(str::to_string),
            top_images,
            patch_id,
            patch_mask,
        })
    }

    pub fn embedding(&self) -> EmbeddingResponse {
        let labeling = self.labeling();
        let points = self
            .index
            .neurons()
            .enumerate()
            .map(|(i, neuron)| {
                let (x, y) = self.projection.xy(i);
                let label = labeling.label_of(neuron).map(str::to_string);
                let color = match &label {
                    Some(c) => self.color_of(&labeling, c),
                    None => UNLABELED_COLOR.to_string(),
                };
                EmbeddingPoint {
                    neuron,
                    x,
                    y,
                    label,
                    color,
                }
            })
            .collect();
        EmbeddingResponse {
            explained_variance_ratio: self.projection.explained_variance_ratio.clone(),
            points,
        }
    }

    pub fn concepts(&self) -> ConceptsResponse {
        let labeling = self.labeling();
        ConceptsResponse {
            concepts: labeling
                .concepts()
                .iter()
                .map(|c| self.concept_view(&labeling, c))
                .collect(),
        }
    }

    pub fn create_concept(&self, request: &NewConcept) -> Result<ConceptView, ApiError> {
        let mut store = self.store.lock();
        let concept = store.add_concept(&request.name)?;
        let snapshot = Arc::new(store.snapshot());
        *self.labels.write() = snapshot.clone();
        Ok(self.concept_view(&snapshot, &concept))
    }

    pub fn label(&self, request: &LabelRequest) -> Result<ConceptView, ApiError> {
        if let Some(iou) = request.iou {
            if !iou.is_finite() {
                return Err(ApiError::validation("iou must be finite"));
            }
        }
        if let Some(id) = &request.patch_id {
            self.patch_key(id)?;
        }
        let mut store = self.store.lock();
        let context = LabelContext {
            patch_id: request.patch_id.clone(),
            iou: request.iou,
        };
        store.label_neurons(&request.neurons, &request.concept, context)?;
        let snapshot = Arc::new(store.snapshot());
        *self.labels.write() = snapshot.clone();
        let concept = snapshot.concept(&request.concept).expect("labeled concept exists");
        Ok(self.concept_view(&snapshot, concept))
    }

    pub fn activation_report(&self, patch_id: &str) -> Result<ConceptReport, ApiError> {
        let key = self.patch_key(patch_id)?;
        let labeling = self.labeling();
        if labeling.is_unlabeled() {
            return Err(concepts::ReportError::Unavailable.into());
        }
        let result = self.infer(key, None)?;
        Ok(concepts::activation_report(&result, &labeling)?)
    }

    pub fn region_report(&self, patch_id: &str, request: &RegionRequest) -> Result<ConceptReport, ApiError> {
        let key = self.patch_key(patch_id)?;
        let region = self.region(&request.mask)?;
        let labeling = self.labeling();
        if labeling.is_unlabeled() {
            return Err(concepts::ReportError::Unavailable.into());
        }
        let result = self.infer(key, None)?;
        Ok(concepts::region_report(
            &result,
            &region,
            &self.index.thresholds,
            &labeling,
        )?)
    }
}
