//! The parameter-cycling transformer family.

mod config;
mod forward;
mod params;
mod retrofit;
mod schedule;

pub use config::{ModelConfig, Variant};
pub use forward::{
    apply_layer, attention_with_zero_token, forward_taped, gated_ffn, lm_head, AttentionSublayer, FfnSublayer,
    ForwardOutput, LayerOutput, Model, TapedForward, LN_EPS,
};
pub use params::{param_count, param_group, GateParams, LayerParameters, ModelParams, ParamCount, ZeroTokenPool, INIT_STD};
pub use retrofit::{init_from_vanilla, RETROFIT_GATE_BIAS};
pub use schedule::{Application, CycleSchedule};
