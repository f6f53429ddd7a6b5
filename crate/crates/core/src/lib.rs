//! Prompt-based compositional zero-shot learning with language-informed
//! class distributions and visual-language primitive decomposition.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod lid;
pub mod linalg;
pub mod matrix;
pub mod model;
pub mod objective;
pub mod report;
pub mod session;
pub mod training;
pub mod vlpd;

pub use error::{PlidError, Result};
