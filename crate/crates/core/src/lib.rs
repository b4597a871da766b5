//! Image-text matching with consensus-aware encoders, hard negatives mined
//! from predictive candidates, and a hierarchical ranking loss whose margins
//! adapt to caption relevance measured by CIDEr.

pub mod cider;
pub mod consensus;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod mining;
pub mod model;
pub mod numerics;
pub mod pairs;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
pub use numerics::DenseMatrix;
