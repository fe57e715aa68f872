//! Desk-scale inference engine for mask-based diffusion language models.
//!
//! Three decoding strategies share one transformer implementation:
//!
//! - **vanilla**: every iteration recomputes the whole sequence.
//! - **dualcache**: K/V for everything outside the current block is cached at
//!   block boundaries; each iteration only runs the current block.
//! - **es_dllm**: like dualcache, but at configured layers the active position
//!   set is pruned to the most important positions. Importance blends the
//!   previous-iteration confidence with the relative change of an indicator
//!   tensor (hidden state, query, key or value) since the last iteration.
//!
//! Every matrix product goes through a [`tensor::FlopCounter`], so the cost
//! of each strategy can be compared exactly.

pub mod analysis;
pub mod cache;
pub mod decoder;
mod error;
pub mod model;
pub mod positions;
pub mod skip;
pub mod tensor;

pub use error::{Error, Result};
pub use positions::PositionSet;

/// Version string recorded in run manifests and trace summaries.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
