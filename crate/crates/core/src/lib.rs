pub mod decoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod fewshot;
pub mod image;
pub mod judge;
pub mod math;
pub mod prompt_learner;
pub mod prompts;
pub mod simulation;

pub use error::{Error, FormatError, Result};
pub use math::{Grid2D, LossWeights};
