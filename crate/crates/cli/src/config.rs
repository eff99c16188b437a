//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key except `corpus_path`
//! has a default; unknown or repeated keys are errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;
use ztt_core::data::VOCAB_SIZE;
use ztt_core::model::{ModelConfig, Variant};
use ztt_core::train_eval::TrainPlan;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("key `{key}`: cannot parse {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
}

/// A switch that can follow the variant's default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toggle {
    Auto,
    On,
    Off,
}

impl Toggle {
    fn resolve(self, default: bool) -> bool {
        match self {
            Toggle::Auto => default,
            Toggle::On => true,
            Toggle::Off => false,
        }
    }
}

impl FromStr for Toggle {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(Toggle::Auto),
            "true" => Ok(Toggle::On),
            "false" => Ok(Toggle::Off),
            _ => Err("expected true, false or auto".into()),
        }
    }
}

impl std::fmt::Display for Toggle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Toggle::Auto => "auto",
            Toggle::On => "true",
            Toggle::Off => "false",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub all_layers: usize,
    pub loop_count: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    /// Context length; also the training sequence length.
    pub t_max: usize,
    pub use_gate: Toggle,
    pub use_zero_token: Toggle,
    pub early_exit_heads: bool,
    pub tie_embeddings: bool,
    pub steps: u64,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub grad_accum: usize,
    pub seed: u64,
    /// Adaptive threshold for the end-of-training evaluation; `none` keeps
    /// every cycle.
    pub exit_threshold: Option<f64>,
    pub corpus_path: PathBuf,
}

pub const KEYS: [&str; 21] = [
    "variant", "all_layers", "loop_count", "d_model", "n_heads", "d_ff", "vocab", "t_max", "use_gate",
    "use_zero_token", "early_exit_heads", "tie_embeddings", "steps", "lr", "warmup_frac", "weight_decay", "batch",
    "grad_accum", "seed", "exit_threshold", "corpus_path",
];

impl RunConfig {
    /// Defaults for every key, with the given corpus.
    pub fn with_corpus(corpus_path: impl Into<PathBuf>) -> Self {
        let plan = TrainPlan::default();
        Self {
            variant: Variant::ZeroToken,
            all_layers: 4,
            loop_count: 3,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab: VOCAB_SIZE,
            t_max: 64,
            use_gate: Toggle::Auto,
            use_zero_token: Toggle::Auto,
            early_exit_heads: true,
            tie_embeddings: true,
            steps: plan.steps,
            lr: plan.lr,
            warmup_frac: plan.warmup_frac,
            weight_decay: plan.weight_decay,
            batch: plan.batch,
            grad_accum: plan.grad_accum,
            seed: 0,
            exit_threshold: None,
            corpus_path: corpus_path.into(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::with_corpus(PathBuf::new());
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|k| **k == key) else {
                return Err(ConfigError::UnknownKey { line: i + 1, key: key.to_string() });
            };
            if seen.contains(&known) {
                return Err(ConfigError::Duplicate { line: i + 1, key: key.to_string() });
            }
            seen.push(known);
            cfg.set(known, value)?;
        }
        if !seen.contains(&"corpus_path") || cfg.corpus_path.as_os_str().is_empty() {
            return Err(ConfigError::Missing("corpus_path"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), message: e.to_string() })?;
        let mut cfg = Self::parse(&text)?;
        // a relative corpus path is relative to the config file
        if cfg.corpus_path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.corpus_path = dir.join(&cfg.corpus_path);
            }
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn p<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
        where
            V::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: V::Err| ConfigError::Value {
                key: key.to_string(),
                value: value.to_string(),
                reason: e.to_string(),
            })
        }
        match key {
            "variant" => self.variant = p(key, value)?,
            "all_layers" => self.all_layers = p(key, value)?,
            "loop_count" => self.loop_count = p(key, value)?,
            "d_model" => self.d_model = p(key, value)?,
            "n_heads" => self.n_heads = p(key, value)?,
            "d_ff" => self.d_ff = p(key, value)?,
            "vocab" => self.vocab = p(key, value)?,
            "t_max" => self.t_max = p(key, value)?,
            "use_gate" => self.use_gate = p(key, value)?,
            "use_zero_token" => self.use_zero_token = p(key, value)?,
            "early_exit_heads" => self.early_exit_heads = p(key, value)?,
            "tie_embeddings" => self.tie_embeddings = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "warmup_frac" => self.warmup_frac = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "batch" => self.batch = p(key, value)?,
            "grad_accum" => self.grad_accum = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "exit_threshold" => {
                self.exit_threshold = if value == "none" { None } else { Some(p(key, value)?) };
            }
            "corpus_path" => self.corpus_path = PathBuf::from(value),
            _ => unreachable!("key checked against KEYS"),
        }
        Ok(())
    }

    /// Canonical text with every key, in [`KEYS`] order.
    pub fn render(&self) -> String {
        let threshold = self.exit_threshold.map_or("none".to_string(), |t| t.to_string());
        let values = [
            self.variant.to_string(),
            self.all_layers.to_string(),
            self.loop_count.to_string(),
            self.d_model.to_string(),
            self.n_heads.to_string(),
            self.d_ff.to_string(),
            self.vocab.to_string(),
            self.t_max.to_string(),
            self.use_gate.to_string(),
            self.use_zero_token.to_string(),
            self.early_exit_heads.to_string(),
            self.tie_embeddings.to_string(),
            self.steps.to_string(),
            self.lr.to_string(),
            self.warmup_frac.to_string(),
            self.weight_decay.to_string(),
            self.batch.to_string(),
            self.grad_accum.to_string(),
            self.seed.to_string(),
            threshold,
            self.corpus_path.display().to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let mut c = ModelConfig::new(self.variant, self.all_layers, self.loop_count)
            .with_dims(self.d_model, self.n_heads, self.d_ff);
        let ztt = self.variant == Variant::ZeroToken;
        c.vocab = self.vocab;
        c.t_max = self.t_max;
        c.use_gate = self.use_gate.resolve(ztt);
        c.use_zero_token = self.use_zero_token.resolve(ztt);
        c.early_exit_heads = self.early_exit_heads;
        c.tie_embeddings = self.tie_embeddings;
        if c.vocab < VOCAB_SIZE {
            return Err(ConfigError::Value {
                key: "vocab".into(),
                value: c.vocab.to_string(),
                reason: format!("byte tokens need at least {VOCAB_SIZE} ids"),
            });
        }
        c.validate().map_err(|e| ConfigError::Value {
            key: "variant".into(),
            value: self.variant.to_string(),
            reason: e.to_string(),
        })?;
        Ok(c)
    }

    pub fn train_plan(&self) -> TrainPlan {
        TrainPlan {
            steps: self.steps,
            lr: self.lr,
            warmup_frac: self.warmup_frac,
            weight_decay: self.weight_decay,
            batch: self.batch,
            seq_len: self.t_max,
            grad_accum: self.grad_accum,
            seed: self.seed,
            exit_weights: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse("# tiny\ncorpus_path = data.txt\nvariant = HTC\nloop_count=2 # inline\n").unwrap();
        assert_eq!(c.variant, Variant::HeadTailCycling);
        assert_eq!(c.loop_count, 2);
        assert_eq!(c.d_model, 128);
        assert_eq!(c.exit_threshold, None);
        let m = c.model_config().unwrap();
        assert!(!m.use_gate && !m.use_zero_token);
    }

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::with_corpus("/tmp/x.txt");
        c.exit_threshold = Some(0.5);
        c.use_gate = Toggle::Off;
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(RunConfig::parse("variant = V\n"), Err(ConfigError::Missing("corpus_path")));
        let e = RunConfig::parse("corpus_path = a\nlayers = 3\n").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey { line: 2, key: "layers".into() });
        let e = RunConfig::parse("corpus_path = a\nsteps = many\n").unwrap_err();
        assert!(e.to_string().contains("steps"));
        assert!(matches!(RunConfig::parse("corpus_path = a\ncorpus_path = b\n"), Err(ConfigError::Duplicate { .. })));
        assert!(matches!(RunConfig::parse("corpus_path\n"), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn invalid_models_are_rejected() {
        let c = RunConfig::parse("corpus_path = a\nvariant = V\nloop_count = 3\n").unwrap();
        assert!(c.model_config().is_err());
        let c = RunConfig::parse("corpus_path = a\nvocab = 100\n").unwrap();
        assert!(c.model_config().is_err());
    }
}
