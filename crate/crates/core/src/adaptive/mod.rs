//! Zero-attention early exit, telemetry aggregation and cached decoding.

mod decode;
mod policy;
mod telemetry;

pub use decode::{decode_step, generate, DecodeCache, DecodeStep, Generation, Sampler};
pub use policy::{first_crossing, should_exit, ExitMode, ExitPolicy};
pub use telemetry::{CycleTelemetry, ExitSignal, LayerCycleStats};
