//! Knowledge-swapping training engine.
//!
//! A small transformer classifier is pretrained on a set of classes, then
//! fine-tuned through low-rank adapters on its feed-forward layers in a
//! sequence of learning (`L`) and forgetting (`F`) stages. Each stage learns
//! new classes, forgets chosen ones, or both, while retaining the rest.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod lora;
pub mod model;
pub mod data;
pub mod diagnostics;
pub mod phases;
