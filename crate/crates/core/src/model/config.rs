use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::data::VOCAB_SIZE;
use crate::error::{Error, Result};

/// Model family member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Plain stack of distinct layers.
    Vanilla,
    /// The whole stack is reapplied `loop_count` times.
    BasicCycling,
    /// First and last layers run once; the middle block cycles.
    HeadTailCycling,
    /// Head-tail cycling plus zero-token attention and FFN gating.
    ZeroToken,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::Vanilla, Variant::BasicCycling, Variant::HeadTailCycling, Variant::ZeroToken];

    pub fn short_name(self) -> &'static str {
        match self {
            Variant::Vanilla => "V",
            Variant::BasicCycling => "BC",
            Variant::HeadTailCycling => "HTC",
            Variant::ZeroToken => "ZTT",
        }
    }

    /// Whether head and tail layers are kept out of the cycle.
    pub fn decouples_head_tail(self) -> bool {
        matches!(self, Variant::HeadTailCycling | Variant::ZeroToken)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "V" | "VANILLA" => Ok(Variant::Vanilla),
            "BC" => Ok(Variant::BasicCycling),
            "HTC" => Ok(Variant::HeadTailCycling),
            "ZTT" => Ok(Variant::ZeroToken),
            other => Err(Error::Config(format!("unknown variant {other:?} (expected V, BC, HTC or ZTT)"))),
        }
    }
}

/// Architecture hyperparameters. Layer indices are 0-based throughout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of distinct layers.
    pub all_layers: usize,
    /// How many times the cycled block runs.
    pub loop_count: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub t_max: usize,
    pub use_gate: bool,
    pub use_zero_token: bool,
    /// Supervise every cycle's exit during training.
    pub early_exit_heads: bool,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// A config with the variant's default flags: gate and zero token are on
    /// for [`Variant::ZeroToken`] only.
    pub fn new(variant: Variant, all_layers: usize, loop_count: usize) -> Self {
        let ztt = variant == Variant::ZeroToken;
        Self {
            variant,
            all_layers,
            loop_count,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab: VOCAB_SIZE,
            t_max: 64,
            use_gate: ztt,
            use_zero_token: ztt,
            early_exit_heads: false,
            tie_embeddings: true,
        }
    }

    pub fn with_dims(mut self, d_model: usize, n_heads: usize, d_ff: usize) -> Self {
        self.d_model = d_model;
        self.n_heads = n_heads;
        self.d_ff = d_ff;
        self
    }

    /// Distinct layers reused on every cycle.
    pub fn cycled_layers(&self) -> Range<usize> {
        match self.variant {
            Variant::Vanilla => 0..0,
            Variant::BasicCycling => 0..self.all_layers,
            Variant::HeadTailCycling | Variant::ZeroToken => 1..self.all_layers.saturating_sub(1).max(1),
        }
    }

    pub fn num_cycled(&self) -> usize {
        self.cycled_layers().len()
    }

    /// Total layer applications: all − looped + looped × loop count.
    pub fn effective_depth(&self) -> usize {
        self.all_layers - self.num_cycled() + self.num_cycled() * self.loop_count
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.all_layers == 0 {
            return fail("all_layers must be at least 1".into());
        }
        if self.loop_count == 0 {
            return fail("loop_count must be at least 1".into());
        }
        match self.variant {
            Variant::Vanilla if self.loop_count != 1 => {
                return fail(format!("vanilla models run exactly one cycle, got loop_count={}", self.loop_count));
            }
            Variant::HeadTailCycling | Variant::ZeroToken if self.all_layers < 2 => {
                return fail("head-tail cycling needs distinct head and tail layers (all_layers >= 2)".into());
            }
            _ => {}
        }
        if self.num_cycled() == 0 && self.loop_count > 1 {
            return fail(format!(
                "{} with {} layers has no cycled layers but loop_count={}",
                self.variant, self.all_layers, self.loop_count
            ));
        }
        if self.use_zero_token && self.variant != Variant::ZeroToken {
            return fail(format!("zero tokens are only available for ZTT, not {}", self.variant));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model={} is not divisible by n_heads={}", self.d_model, self.n_heads));
        }
        if self.d_ff == 0 || self.vocab == 0 || self.t_max == 0 {
            return fail("d_ff, vocab and t_max must be positive".into());
        }
        Ok(())
    }
}
