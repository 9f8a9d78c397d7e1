//! Hierarchical attention-free transformer (HAFFormer) for long-sequence
//! classification: a small reverse-mode autodiff core, the token/channel
//! mixer zoo, the merge hierarchy, an analytic parameter/MAC cost model and
//! a deterministic training harness.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod mixers;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;

pub use analysis::{analyze, count_macs, count_params, emit_cost_table, Cost, CostReport};
pub use config::RunConfig;
pub use data::{load_embedding, pad_or_truncate, save_embedding, synthesize_dataset, Dataset, EmbeddingRecord};
pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId, Precision};
pub use mixers::{ChannelMixerKind, TokenMixerKind};
pub use model::{apply_preset, build_model, HierarchyPreset, Model, ModelConfig, ParameterStore};
pub use tensor::FrameMatrix;
pub use training::{adamw_step, evaluate, train, AdamWConfig, Metrics, OptimizerState, TrainOptions};
