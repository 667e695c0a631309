//! Interactive network dissection for single-channel convolutional image
//! classifiers.
//!
//! The crate covers the whole pipeline behind the dissection workbench:
//!
//! * [`model`]: a VGG-style CNN with a compact binary weights format and a
//!   forward pass that retains the feature maps of one dissection layer.
//! * [`index`]: per-neuron spatial-max activations over a reference corpus,
//!   global quantile thresholds, top-k images and activation masks.
//! * [`query`]: IoU search for neurons whose masks overlap a drawn region.
//! * [`atlas`]: PCA layout of neurons from their activation embedding.
//! * [`concepts`]: the concept label log and the two per-concept reports.
//! * [`patches`]: grid tiling and sliding-window patch geometry.

pub mod atlas;
pub mod concepts;
pub mod corpus;
pub mod index;
pub mod mask;
pub mod model;
pub mod patches;
pub mod query;
pub mod synthetic;
pub mod tensor;

pub use mask::{iou, BinaryMask, RleMask};
pub use model::{InferenceResult, Model, NeuronRef};
pub use tensor::FeatureTensor;
