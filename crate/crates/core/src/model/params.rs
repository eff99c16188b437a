//! Parameter containers.
//!
//! The containers are generic over their storage `P`: `Tensor<T>` for owned
//! weights, [`Var`](crate::numerics::Var) once the weights are recorded on a
//! tape. Traversal order of [`ModelParams::named`] is the canonical order
//! used by the optimizer and by checkpoints.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::config::ModelConfig;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<P> {
    /// `[d_model, 1]`
    pub weight: P,
    /// `[1]`
    pub bias: P,
}

/// Weights of one distinct layer. Every cycled application of the layer
/// refers to the same record.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParameters<P> {
    pub ln1_gamma: P,
    pub ln1_beta: P,
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
    pub ln2_gamma: P,
    pub ln2_beta: P,
    pub w_in: P,
    pub b_in: P,
    pub w_out: P,
    pub b_out: P,
    pub gate: Option<GateParams<P>>,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo",
    "attn.bo", "ln2.gamma", "ln2.beta", "ffn.w_in", "ffn.b_in", "ffn.w_out", "ffn.b_out",
];

impl<P> LayerParameters<P> {
    fn fields(&self) -> [&P; 16] {
        [
            &self.ln1_gamma, &self.ln1_beta, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_gamma, &self.ln2_beta, &self.w_in, &self.b_in, &self.w_out,
            &self.b_out,
        ]
    }

    pub fn try_map<Q, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<LayerParameters<Q>, E> {
        let mut g = |field: &str, p: &P| f(&format!("{prefix}.{field}"), p);
        Ok(LayerParameters {
            ln1_gamma: g("ln1.gamma", &self.ln1_gamma)?,
            ln1_beta: g("ln1.beta", &self.ln1_beta)?,
            wq: g("attn.wq", &self.wq)?,
            bq: g("attn.bq", &self.bq)?,
            wk: g("attn.wk", &self.wk)?,
            bk: g("attn.bk", &self.bk)?,
            wv: g("attn.wv", &self.wv)?,
            bv: g("attn.bv", &self.bv)?,
            wo: g("attn.wo", &self.wo)?,
            bo: g("attn.bo", &self.bo)?,
            ln2_gamma: g("ln2.gamma", &self.ln2_gamma)?,
            ln2_beta: g("ln2.beta", &self.ln2_beta)?,
            w_in: g("ffn.w_in", &self.w_in)?,
            b_in: g("ffn.b_in", &self.b_in)?,
            w_out: g("ffn.w_out", &self.w_out)?,
            b_out: g("ffn.b_out", &self.b_out)?,
            gate: match &self.gate {
                Some(gp) => Some(GateParams { weight: g("gate.weight", &gp.weight)?, bias: g("gate.bias", &gp.bias)? }),
                None => None,
            },
        })
    }
}

/// Trainable zero-token keys, one `d_model` vector per (cycled slot, cycle).
/// The matching values are identically zero and are not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroTokenPool<P> {
    pub slots: usize,
    pub cycles: usize,
    pub keys: Vec<P>,
}

impl<P> ZeroTokenPool<P> {
    pub fn key(&self, slot: usize, cycle: usize) -> &P {
        &self.keys[slot * self.cycles + cycle]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    /// `[vocab, d_model]`
    pub token_embedding: P,
    /// `[t_max, d_model]`
    pub position_embedding: P,
    pub layers: Vec<LayerParameters<P>>,
    pub zero_pool: Option<ZeroTokenPool<P>>,
    pub final_gamma: P,
    pub final_beta: P,
    /// Untied output projection `[vocab, d_model]`; `None` when tied.
    pub lm_head: Option<P>,
}

impl<P> ModelParams<P> {
    /// All parameters with their checkpoint names, in canonical order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![("wte".to_string(), &self.token_embedding), ("wpe".to_string(), &self.position_embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (field, p) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{i}.{field}"), p));
            }
            if let Some(g) = &layer.gate {
                out.push((format!("layers.{i}.gate.weight"), &g.weight));
                out.push((format!("layers.{i}.gate.bias"), &g.bias));
            }
        }
        if let Some(pool) = &self.zero_pool {
            for slot in 0..pool.slots {
                for cycle in 0..pool.cycles {
                    out.push((format!("zero_pool.{slot}.{cycle}"), pool.key(slot, cycle)));
                }
            }
        }
        out.push(("ln_f.gamma".into(), &self.final_gamma));
        out.push(("ln_f.beta".into(), &self.final_beta));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    /// Mutable counterpart of [`named`](Self::named), same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = vec![
            ("wte".to_string(), &mut self.token_embedding),
            ("wpe".to_string(), &mut self.position_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let LayerParameters {
                ln1_gamma, ln1_beta, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gamma, ln2_beta, w_in, b_in, w_out, b_out, gate,
            } = layer;
            let core = [
                ln1_gamma, ln1_beta, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gamma, ln2_beta, w_in, b_in, w_out, b_out,
            ];
            for (field, p) in LAYER_FIELDS.iter().zip(core) {
                out.push((format!("layers.{i}.{field}"), p));
            }
            if let Some(g) = gate {
                out.push((format!("layers.{i}.gate.weight"), &mut g.weight));
                out.push((format!("layers.{i}.gate.bias"), &mut g.bias));
            }
        }
        if let Some(pool) = &mut self.zero_pool {
            let cycles = pool.cycles;
            for (k, key) in pool.keys.iter_mut().enumerate() {
                out.push((format!("zero_pool.{}.{}", k / cycles, k % cycles), key));
            }
        }
        out.push(("ln_f.gamma".into(), &mut self.final_gamma));
        out.push(("ln_f.beta".into(), &mut self.final_beta));
        if let Some(h) = &mut self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&str, &P) -> Result<Q, E>) -> Result<ModelParams<Q>, E> {
        let token_embedding = f("wte", &self.token_embedding)?;
        let position_embedding = f("wpe", &self.position_embedding)?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.try_map(&format!("layers.{i}"), &mut f))
            .collect::<Result<Vec<_>, E>>()?;
        let zero_pool = match &self.zero_pool {
            Some(pool) => {
                let mut keys = Vec::with_capacity(pool.keys.len());
                for (k, key) in pool.keys.iter().enumerate() {
                    keys.push(f(&format!("zero_pool.{}.{}", k / pool.cycles, k % pool.cycles), key)?);
                }
                Some(ZeroTokenPool { slots: pool.slots, cycles: pool.cycles, keys })
            }
            None => None,
        };
        let final_gamma = f("ln_f.gamma", &self.final_gamma)?;
        let final_beta = f("ln_f.beta", &self.final_beta)?;
        let lm_head = match &self.lm_head {
            Some(h) => Some(f("lm_head", h)?),
            None => None,
        };
        Ok(ModelParams { token_embedding, position_embedding, layers, zero_pool, final_gamma, final_beta, lm_head })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        self.try_map::<Q, std::convert::Infallible>(|n, p| Ok(f(n, p))).unwrap_or_else(|e| match e {})
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    /// Fresh weights: N(0, 0.02) matrices, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut gauss = |shape: &[usize]| Tensor::from_fn(shape, |_| T::from_f64(normal.sample(&mut rng)));
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab);
        let token_embedding = gauss(&[v, d]);
        let position_embedding = gauss(&[config.t_max, d]);
        let mut layers = Vec::with_capacity(config.all_layers);
        for _ in 0..config.all_layers {
            layers.push(LayerParameters {
                ln1_gamma: Tensor::full(&[d], T::one()),
                ln1_beta: Tensor::zeros(&[d]),
                wq: gauss(&[d, d]),
                bq: Tensor::zeros(&[d]),
                wk: gauss(&[d, d]),
                bk: Tensor::zeros(&[d]),
                wv: gauss(&[d, d]),
                bv: Tensor::zeros(&[d]),
                wo: gauss(&[d, d]),
                bo: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::full(&[d], T::one()),
                ln2_beta: Tensor::zeros(&[d]),
                w_in: gauss(&[d, f]),
                b_in: Tensor::zeros(&[f]),
                w_out: gauss(&[f, d]),
                b_out: Tensor::zeros(&[d]),
                gate: config.use_gate.then(|| GateParams { weight: gauss(&[d, 1]), bias: Tensor::zeros(&[1]) }),
            });
        }
        let zero_pool = config.use_zero_token.then(|| {
            let (slots, cycles) = (config.num_cycled(), config.loop_count);
            ZeroTokenPool { slots, cycles, keys: (0..slots * cycles).map(|_| gauss(&[d])).collect() }
        });
        let lm_head = (!config.tie_embeddings).then(|| gauss(&[v, d]));
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            zero_pool,
            final_gamma: Tensor::full(&[d], T::one()),
            final_beta: Tensor::zeros(&[d]),
            lm_head,
        })
    }

    /// Rebuilds parameters from named tensors, checking every expected name
    /// and shape against `config`.
    pub fn from_named(config: &ModelConfig, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let template = ModelParams::shape_template(config)?;
        let out = template.try_map(|name, shape: &Vec<usize>| {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Conversion(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Conversion(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        })?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Conversion(format!("unexpected tensor {extra}")));
        }
        Ok(out)
    }

    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<Tensor<U>> {
        self.map(|_, t| t.cast())
    }
}

impl ModelParams<Vec<usize>> {
    /// Expected shape of every parameter under `config`.
    pub fn shape_template(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab);
        let layer = LayerParameters {
            ln1_gamma: vec![d],
            ln1_beta: vec![d],
            wq: vec![d, d],
            bq: vec![d],
            wk: vec![d, d],
            bk: vec![d],
            wv: vec![d, d],
            bv: vec![d],
            wo: vec![d, d],
            bo: vec![d],
            ln2_gamma: vec![d],
            ln2_beta: vec![d],
            w_in: vec![d, f],
            b_in: vec![f],
            w_out: vec![f, d],
            b_out: vec![d],
            gate: config.use_gate.then(|| GateParams { weight: vec![d, 1], bias: vec![1] }),
        };
        Ok(Self {
            token_embedding: vec![v, d],
            position_embedding: vec![config.t_max, d],
            layers: vec![layer; config.all_layers],
            zero_pool: config.use_zero_token.then(|| ZeroTokenPool {
                slots: config.num_cycled(),
                cycles: config.loop_count,
                keys: vec![vec![d]; config.num_cycled() * config.loop_count],
            }),
            final_gamma: vec![d],
            final_beta: vec![d],
            lm_head: (!config.tie_embeddings).then(|| vec![v, d]),
        })
    }
}

/// Parameter totals, overall and per group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub by_group: BTreeMap<&'static str, usize>,
}

/// Group a checkpoint name belongs to.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("zero_pool") {
        "zero_pool"
    } else if name.contains(".gate.") {
        "gate"
    } else if name.contains(".attn.") {
        "attention"
    } else if name.contains(".ffn.") {
        "ffn"
    } else if name.contains("ln") {
        "norm"
    } else {
        "embedding"
    }
}

/// Exact parameter count from config arithmetic. Cycled layers count once.
pub fn param_count(config: &ModelConfig) -> Result<ParamCount> {
    config.validate()?;
    let (d, f, v, t) = (config.d_model, config.d_ff, config.vocab, config.t_max);
    let l = config.all_layers;
    let mut by_group = BTreeMap::new();
    let heads = if config.tie_embeddings { 1 } else { 2 };
    by_group.insert("embedding", heads * v * d + t * d);
    by_group.insert("attention", l * 4 * (d * d + d));
    by_group.insert("ffn", l * (d * f + f + f * d + d));
    by_group.insert("norm", l * 4 * d + 2 * d);
    by_group.insert("gate", if config.use_gate { l * (d + 1) } else { 0 });
    by_group.insert(
        "zero_pool",
        if config.use_zero_token { config.num_cycled() * config.loop_count * d } else { 0 },
    );
    Ok(ParamCount { total: by_group.values().sum(), by_group })
}
