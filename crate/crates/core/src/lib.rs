//! Merging of low-rank adapters (LoRA) by learned per-column coefficients.
//!
//! The crate reads and writes adapter tensor files, diagnoses sparsity and
//! column alignment between adapters, and merges a content adapter with a
//! style adapter either linearly or by optimizing per-column merger
//! coefficients that keep both adapters' behaviour while pushing their
//! coefficient vectors towards orthogonality.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod format;
pub mod lora;
pub mod tensor;
pub mod zip;

pub use error::{Error, Result};
pub use lora::{delta_weight, fold_merged, read_lora, write_lora, LoraLayer, LoraModel};
pub use tensor::Tensor;
