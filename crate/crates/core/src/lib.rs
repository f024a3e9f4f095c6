//! Hierarchical transformer encoder-decoder for discourse-level speech
//! recognition, with large-context language-model distillation.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod features;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod vocab;

pub use autodiff::{Gradients, Graph, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{ContextCache, DiscourseModel, ModelKind};
pub use tensor::{Precision, Tensor};
pub use vocab::Vocabulary;
