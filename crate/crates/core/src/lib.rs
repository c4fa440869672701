//! Gated modality-attention fusion for multimodal attribute classification.
//!
//! Everything here is `no_std` with `alloc`: a small reverse-mode autodiff
//! engine, toy text and image encoders, the fusion model with its
//! KL-to-uniform regularized loss, ADAM with a warmup/cosine schedule, the
//! evaluation metrics, and the synthetic data generator with iterative
//! stratified splitting. File formats and the CLI live in the `modfuse`
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod tensor;

pub use data::{generate, stratified_split, GenConfig, Record, Split};
pub use encoders::{Activation, ImageEncoderConfig, Pooling, TextEncoderConfig};
pub use error::{Error, LossTerm, Result};
pub use fusion::{
    Batch, FusionModel, GateKind, MergerConfig, MergerKind, Modalities, ModelConfig, Objective,
};
pub use graph::{Graph, NodeId};
pub use metrics::{EvalOptions, EvalReport, PredictionSet};
pub use optim::{lr_at, train, AdamConfig, AdamState, ScheduleConfig, TrainConfig, TrainLog};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
