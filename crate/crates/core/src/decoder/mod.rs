//! Block-wise semi-autoregressive generation loop for every strategy.

mod config;
mod session;
pub mod trace;
pub mod unmask;

pub use config::{GenerationConfig, Strategy, DEFAULT_BLOCK_PERIOD};
pub use session::{generate, DecodeSession, StepReport};
pub use trace::{summary_path, GenerationTrace, IterationRecord, TraceSummary, UnmaskEvent, VariationRecord};
