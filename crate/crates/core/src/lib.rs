//! Independent modular network toolkit.
//!
//! A pool of input-observing compositional modules and input-blind learnable
//! identity transforms; every non-empty subset product of compositional
//! transforms is paired with every identity, decoded and scored, and only the
//! winning combination is trained. Includes a procedural factor-labeled
//! shapes dataset, a config-driven trainer, and evaluation artifacts
//! (identity renders, shape-decomposition routing tables, collapse metrics).

pub mod combin;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod lie;
pub mod nn;
pub mod objective;
pub mod par;
pub mod pool;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
