//! Self-verifying mechanistic analysis of a toy "forbidden fact" model:
//! residual-stream decomposition, first-order patching attribution,
//! head-level probes (OV suppression, key/query enrichment), and the
//! distractor-injection attack with patch-based reversal.

pub mod attack;
pub mod attribution;
pub mod dataset;
pub mod error;
pub mod headlab;
pub mod model;
pub mod numerics;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{FfckError, Result};
