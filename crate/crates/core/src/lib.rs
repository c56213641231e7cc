//! Toolkit for turning a class-per-folder image dataset into a small,
//! quantized, metadata-bearing classifier and measuring how its accuracy
//! degrades along simulated phone inference paths.
//!
//! Stages, in pipeline order:
//!
//! - [`image_ops`]: decoding, bilinear resize, center crop, normalization
//! - [`dataset`]: ingestion, multi-size sub-datasets, stratified k-fold plans
//! - [`augment`]: the four training generators and their transforms
//! - [`nn`]: a small CNN engine (conv, max-pool, dense, ReLU, softmax) with SGD
//! - [`search`]: cross-validated grid evaluation and filters x neurons reduction
//! - [`deploy`]: the `.mpipe` container, uint8 weight quantization, label checks
//! - [`device_sim`]: computer, gallery and real-time inference paths
//! - [`pipeline`]: run configuration and the stage commands used by the CLI

pub mod augment;
pub mod dataset;
pub mod deploy;
pub mod device_sim;
pub mod image_ops;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod search;
pub mod synthetic;
pub mod tensor;

pub use image_ops::ImageBuffer;
pub use tensor::Tensor;
