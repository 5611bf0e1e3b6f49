//! Convolutional sparse kernel networks.
//!
//! Images are encoded as contrast-normalized patches or gradient
//! orientations, passed through stacked layers that embed a Gaussian match
//! kernel in finite dimensions, and summarized by spatial pyramid max
//! pooling. Layers are learned without labels: sparse-target pre-training
//! provides the starting point, and a bounded quasi-Newton fit of the kernel
//! approximation on sampled sub-patch pairs finishes each layer.
//!
//! Modules, bottom-up:
//!
//! - [`featmap`]: feature maps, sub-patches, the gradient encoding
//! - [`kernel_layer`]: one layer's embedding, hyperparameters and fit
//! - [`epls`]: sparse-target pre-training
//! - [`network`]: stacking, pyramid pooling, the training pipeline
//! - [`evalkit`]: linear SVM, retrieval and metrics
//! - [`oracle`]: brute-force references for verification

pub mod epls;
pub mod error;
pub mod evalkit;
pub mod featmap;
pub mod kernel_layer;
pub mod network;
pub mod optim;
pub mod oracle;

pub use error::{Error, Result};
pub use featmap::{FeatureMap, SubPatch, SubPatchGrid};
pub use kernel_layer::{InputKind, LayerConfig, LayerParams, PairBatch, Parallelism};
pub use network::{ModelBundle, NetworkSpec, PyramidDescriptor};
