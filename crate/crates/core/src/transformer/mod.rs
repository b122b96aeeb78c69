//! Encoder–decoder Transformer: configuration, parameters, model, decoding, checkpoints.

pub mod beam;
pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod model;
pub mod params;

pub use beam::{beam_search, greedy, StepModel};
pub use checkpoint::{load_model, save_model, Container};
pub use config::{IntegrationMode, ModelConfig, CONTEXT_ENCODER_DEPTHS};
pub use model::{teacher_forcing, Batch, Encoded, Forward, ForwardOptions, Model};
pub use params::{ParamStore, CONTEXT_PREFIX};
