//! Training, post-training optimization and size/accuracy benchmarking for a
//! small gesture-recognition CNN.
//!
//! The network is the two-stage `Conv → MaxPool → Dropout` stack followed by
//! `Flatten → Dropout → Dense(128) → Dense(classes)`, parametric over the
//! square input size (64, 96, 128 or 256). Everything is implemented on a
//! small dense tensor type with hand-written backward passes:
//!
//! * [`tensor`] dense arrays, the GEMM kernel and dtype-tagged storage
//! * [`layers`] forward/backward for every layer kind
//! * [`model`] graph assembly, parameter accounting, the `EDGN` file format
//! * [`train`] loss, Adam, He init, augmentation, early stopping, `fit`
//! * [`quantize`] f16 / int8-affine export, calibration, channel pruning
//! * [`data`] class-folder datasets, resizing, PPM codec, synthetic glyphs
//! * [`evalbench`] accuracy/loss/confusion, file sizes, latency, reports

pub mod data;
pub mod error;
pub mod evalbench;
pub mod layers;
pub mod model;
pub mod quantize;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
