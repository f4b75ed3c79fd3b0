//! TikZ corpus construction, compilation, repair and reward computation.

pub mod chat;
pub mod compile;
pub mod decontam;
pub mod describe;
pub mod error;
pub mod extract;
pub mod grpo;
pub mod metrics;
pub mod normalize;
pub mod pipeline;
pub mod prompts;
pub mod record;
pub mod repair;
pub mod reward;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
