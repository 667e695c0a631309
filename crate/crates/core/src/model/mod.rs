//! VGG-style single-channel CNN: layer stack, validation and forward pass.

mod ops;
mod weights;

pub use ops::{conv2d, linear, maxpool2d, normalize, relu, relu_in_place, softmax, Conv2d, Linear};
pub use weights::{load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::FeatureTensor;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("weights file does not start with the expected magic bytes")]
    BadMagic,
    #[error("unsupported weights format version {0}")]
    UnsupportedVersion(u32),
    #[error("weights file is truncated")]
    Truncated,
    #[error("unknown layer tag {0}")]
    UnknownLayerTag(u8),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input has {got} channels, layer expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("a {height}x{width} input is too small for a kernel of size {kernel}")]
    OutputTooSmall { height: usize, width: usize, kernel: usize },
    #[error("invalid model: {0}")]
    InvalidSpec(String),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("input value {0} outside [0, 1]")]
    OutOfRange(f32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shape-only description of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
    Softmax,
}

/// A layer together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Flatten,
    Linear(Linear),
    Softmax,
}

impl Layer {
    /// 2×2 max pooling with stride 2.
    pub fn max_pool() -> Self {
        Layer::MaxPool { kernel: 2, stride: 2 }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                in_ch: c.in_ch,
                out_ch: c.out_ch,
                kernel: c.kernel,
                stride: c.stride,
                pad: c.pad,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool { kernel, stride } => LayerSpec::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Linear(l) => LayerSpec::Linear {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
            },
            Layer::Softmax => LayerSpec::Softmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub dissection_layer: usize,
}

impl ModelSpec {
    /// Index of the last convolution before the first `Flatten`.
    pub fn default_dissection_layer(layers: &[LayerSpec]) -> Option<usize> {
        let end = layers
            .iter()
            .position(|l| *l == LayerSpec::Flatten)
            .unwrap_or(layers.len());
        layers[..end].iter().rposition(|l| matches!(l, LayerSpec::Conv { .. }))
    }

    /// Checks the structural invariants: channel counts chain, convolutions
    /// precede the flatten, a single trailing softmax, and the dissection
    /// layer is a convolution.
    pub fn validate(&self) -> Result<(), InferenceError> {
        let invalid = |msg: String| Err(InferenceError::InvalidSpec(msg));
        if self.layers.is_empty() {
            return invalid("model has no layers".into());
        }
        let softmax_count = self.layers.iter().filter(|l| **l == LayerSpec::Softmax).count();
        if softmax_count != 1 || self.layers.last() != Some(&LayerSpec::Softmax) {
            return invalid("model must end in exactly one softmax".into());
        }

        let mut channels: Option<usize> = None;
        let mut flat: Option<Option<usize>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match (*layer, flat) {
                (LayerSpec::Conv { in_ch, out_ch, .. }, None) => {
                    if let Some(c) = channels {
                        if c != in_ch {
                            return Err(InferenceError::ShapeMismatch(format!(
                                "layer {i}: conv expects {in_ch} channels, previous layer yields {c}"
                            )));
                        }
                    }
                    channels = Some(out_ch);
                }
                (LayerSpec::MaxPool { kernel, stride }, None) => {
                    if kernel == 0 || stride == 0 {
                        return invalid(format!("layer {i}: zero pooling kernel or stride"));
                    }
                }
                (LayerSpec::Relu, _) => {}
                (LayerSpec::Flatten, None) => flat = Some(None),
                (LayerSpec::Linear { in_dim, out_dim }, Some(len)) => {
                    if let Some(len) = len {
                        if len != in_dim {
                            return Err(InferenceError::ShapeMismatch(format!(
                                "layer {i}: linear expects {in_dim} inputs, previous layer yields {len}"
                            )));
                        }
                    }
                    flat = Some(Some(out_dim));
                }
                (LayerSpec::Softmax, Some(_)) => {}
                (other, _) => {
                    return invalid(format!("layer {i}: {other:?} is out of place"));
                }
            }
        }
        if flat.is_none() {
            return invalid("model never flattens into a classifier head".into());
        }
        match self.layers.get(self.dissection_layer) {
            Some(LayerSpec::Conv { .. }) => Ok(()),
            _ => invalid(format!(
                "dissection layer {} is not a convolution",
                self.dissection_layer
            )),
        }
    }
}

/// Identity of one channel ("neuron") of a convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer: usize,
    pub channel: usize,
}

impl NeuronRef {
    pub fn new(layer: usize, channel: usize) -> Self {
        Self { layer, channel }
    }
}

impl std::fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.layer, self.channel)
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub class_scores: Vec<f32>,
    /// Post-ReLU maps of every channel of the dissection layer.
    pub dissection_maps: FeatureTensor,
    pub dissection_layer: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl InferenceResult {
    pub fn neuron_count(&self) -> usize {
        self.dissection_maps.channels()
    }

    pub fn neuron(&self, channel: usize) -> NeuronRef {
        NeuronRef::new(self.dissection_layer, channel)
    }

    /// Spatial maximum of each neuron's map on this input.
    pub fn max_activations(&self) -> Vec<f32> {
        self.dissection_maps.channel_maxima()
    }
}

/// An immutable, loaded model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    spec: ModelSpec,
    fingerprint: String,
}

impl Model {
    /// Builds a model, defaulting the dissection layer to the last
    /// convolution of the feature extractor.
    pub fn new(layers: Vec<Layer>, dissection_layer: Option<usize>) -> Result<Self, InferenceError> {
        let specs: Vec<LayerSpec> = layers.iter().map(Layer::spec).collect();
        let dissection_layer = match dissection_layer {
            Some(i) => i,
            None => ModelSpec::default_dissection_layer(&specs)
                .ok_or_else(|| InferenceError::InvalidSpec("model has no convolution to dissect".into()))?,
        };
        let spec = ModelSpec {
            layers: specs,
            dissection_layer,
        };
        spec.validate()?;
        let mut model = Self {
            layers,
            spec,
            fingerprint: String::new(),
        };
        model.fingerprint = fingerprint_bytes(&model.to_bytes());
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dissection_layer(&self) -> usize {
        self.spec.dissection_layer
    }

    /// Number of neurons (channels) in the dissection layer.
    pub fn neuron_count(&self) -> usize {
        match self.layers[self.spec.dissection_layer] {
            Layer::Conv(ref c) => c.out_ch,
            _ => unreachable!("validated dissection layer is a convolution"),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Conv(c) => Some(c.in_ch),
                _ => None,
            })
            .unwrap_or(1)
    }

    /// SHA-256 of the serialized weights, hex encoded.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub(crate) fn set_fingerprint(&mut self, fingerprint: String) {
        self.fingerprint = fingerprint;
    }

    /// Runs the network on an already-normalized input.
    pub fn forward(&self, input: &FeatureTensor) -> Result<InferenceResult, InferenceError> {
        if !input.all_finite() {
            return Err(InferenceError::NonFinite);
        }
        let (_, input_height, input_width) = input.shape();
        let mut current = input.clone();
        let mut captured = None;
        for (i, layer) in self.layers.iter().enumerate() {
            current = match layer {
                Layer::Conv(conv) => conv2d(&current, conv)?,
                Layer::Relu => {
                    relu_in_place(&mut current);
                    current
                }
                Layer::MaxPool { kernel, stride } => maxpool2d(&current, *kernel, *stride)?,
                Layer::Flatten => {
                    let len = current.len();
                    FeatureTensor::new(len, 1, 1, current.into_data())?
                }
                Layer::Linear(l) => {
                    let out = linear(current.data(), l)?;
                    FeatureTensor::new(out.len(), 1, 1, out)?
                }
                Layer::Softmax => {
                    let out = softmax(current.data())?;
                    FeatureTensor::new(out.len(), 1, 1, out)?
                }
            };
            if i == self.spec.dissection_layer {
                captured = Some(relu(&current));
            }
        }
        Ok(InferenceResult {
            class_scores: current.into_data(),
            dissection_maps: captured.expect("dissection layer is part of the stack"),
            dissection_layer: self.spec.dissection_layer,
            input_height,
            input_width,
        })
    }

    /// Normalizes a `[0, 1]` patch and runs the forward pass.
    pub fn infer_patch(&self, patch: &FeatureTensor) -> Result<InferenceResult, InferenceError> {
        self.forward(&normalize(patch)?)
    }
}

pub(crate) fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
