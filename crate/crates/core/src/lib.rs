//! Persona-grounded response generation: sentence encoder, knowledge
//! interaction over dialogue turns, style-gated decoder, training and
//! evaluation.

pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod interaction;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod session;
pub mod training;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{Ablation, DecodeConfig, Model, ModelConfig};
