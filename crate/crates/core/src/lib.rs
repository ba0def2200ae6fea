//! Training-free visual token pruning guided by vision-encoder attention.
//!
//! The pipeline averages an encoder layer's attention heads, scores every
//! patch token by its mean attention along the more dispersed axis, keeps the
//! highest-scoring tokens (globally, or as whole grid rows) and restores their
//! original raster order. Diagnostics cover attention concentration, token
//! budgets and an analytical cost model.

pub mod analysis;
pub mod cli;
pub mod cost_model;
pub mod error;
pub mod pipeline;
pub mod pruning;
pub mod significance;
pub mod tensor_io;
pub mod viz;

pub use error::{Error, Result};
pub use pruning::{PruneConfig, PrunedSelection, Ratio, SignificanceMode, Strategy};
pub use significance::{Axis, SignificanceScores};
pub use tensor_io::{AttentionMaps, ClsToken};
