//! Instrumented GPT-2 inference and mechanistic analyses of factual recall.

pub mod decompose;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod instrument;
pub mod lens;
pub mod linalg;
pub mod model;
pub mod report;
pub mod tasks;
pub mod tokenizer;
pub mod verify;

pub use error::{Error, Result};
