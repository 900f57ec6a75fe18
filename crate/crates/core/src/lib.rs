//! Typo correction with a combined character encoder and attention decoder.

pub mod codec;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod tensor;
pub mod train;
