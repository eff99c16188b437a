//! Incremental decoding with a per-application key/value cache.
//!
//! Every row is computed with the same kernels as the taped forward pass, so
//! a cached logit row equals the corresponding row of a full recomputation.
//!
//! Slots: one per application of the main schedule, plus (for head-tail
//! variants) one tail slot per exit cycle, because an exit after cycle `c`
//! runs the tail on cycle-`c` hidden states. When a token exits early its
//! entries in later slots stay absent; a later token that runs deeper fills
//! them in before attending to them.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{LayerParameters, Model, ModelConfig, LN_EPS};
use crate::numerics::{kernels, Scalar, Tensor};

use super::{should_exit, CycleTelemetry, ExitPolicy, LayerCycleStats};

#[derive(Debug, Clone)]
struct Entry<T> {
    k: Vec<T>,
    v: Vec<T>,
    out: Vec<T>,
    zero_attn: Option<T>,
    gate: Option<T>,
}

type Slot<T> = Vec<Option<Entry<T>>>;

/// Cached state of one generation. Single owner; build one per sequence.
#[derive(Debug, Clone)]
pub struct DecodeCache<T> {
    config: ModelConfig,
    tokens: Vec<usize>,
    embedded: Vec<Vec<T>>,
    main: Vec<Slot<T>>,
    tail: Vec<Slot<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotId {
    Main(usize),
    Tail(usize),
}

impl<T: Scalar> DecodeCache<T> {
    pub fn new(model: &Model<T>) -> Self {
        let schedule = model.schedule();
        let main_len = *schedule.exit_points.last().expect("schedule has an exit") + 1;
        let tails = if schedule.exits_through_tail { schedule.exit_points.len() } else { 0 };
        Self {
            config: model.config().clone(),
            tokens: Vec::new(),
            embedded: Vec::new(),
            main: vec![Vec::new(); main_len],
            tail: vec![Vec::new(); tails],
        }
    }

    /// Tokens processed so far.
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn check(&self, model: &Model<T>) -> Result<()> {
        if &self.config != model.config() {
            return Err(Error::Usage("decode cache was built for a different model configuration".into()));
        }
        let p = self.tokens.len();
        let consistent = self.embedded.len() == p && self.main.iter().chain(&self.tail).all(|s| s.len() == p);
        if !consistent {
            return Err(Error::Usage(format!("decode cache slots disagree with its {p} processed positions")));
        }
        Ok(())
    }

    fn slot(&self, id: SlotId) -> &Slot<T> {
        match id {
            SlotId::Main(i) => &self.main[i],
            SlotId::Tail(c) => &self.tail[c],
        }
    }

    fn slot_mut(&mut self, id: SlotId) -> &mut Slot<T> {
        match id {
            SlotId::Main(i) => &mut self.main[i],
            SlotId::Tail(c) => &mut self.tail[c],
        }
    }

    fn input(&self, model: &Model<T>, id: SlotId, pos: usize) -> &[T] {
        let source = match id {
            SlotId::Main(0) => return &self.embedded[pos],
            SlotId::Main(i) => &self.main[i - 1],
            SlotId::Tail(c) => &self.main[model.schedule().exit_points[c]],
        };
        &source[pos].as_ref().expect("inputs are filled in path order").out
    }

    /// Computes every absent entry of `id` at positions `0..=upto`.
    fn fill(&mut self, model: &Model<T>, id: SlotId, upto: usize) {
        let schedule = model.schedule();
        let app = match id {
            SlotId::Main(i) => schedule.applications[i],
            SlotId::Tail(_) => schedule.applications[schedule.applications.len() - 1],
        };
        let layer = &model.params.layers[app.layer];
        let zero_key = match (&model.params.zero_pool, app.cycled_slot, id) {
            (Some(pool), Some(slot), SlotId::Main(_)) => Some(pool.key(slot, app.cycle).data()),
            _ => None,
        };
        for pos in 0..=upto {
            if self.slot(id)[pos].is_some() {
                continue;
            }
            let h = self.input(model, id, pos).to_vec();
            let entry = layer_row(layer, zero_key, &h, &self.slot(id)[..pos], self.config.n_heads);
            self.slot_mut(id)[pos] = Some(entry);
        }
    }

    fn entry(&self, id: SlotId, pos: usize) -> &Entry<T> {
        self.slot(id)[pos].as_ref().expect("entry was filled")
    }
}

/// `x · w + b` for one row.
fn linear<T: Scalar>(x: &[T], w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let n = w.cols();
    let mut out = vec![T::zero(); n];
    kernels::matmul(x, w.data(), 1, x.len(), n, &mut out);
    for (o, &bv) in out.iter_mut().zip(b.data()) {
        *o = *o + bv;
    }
    out
}

fn layer_norm<T: Scalar>(x: &[T], gamma: &Tensor<T>, beta: &Tensor<T>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    kernels::layer_norm_row(x, gamma.data(), beta.data(), T::from_f64(LN_EPS), &mut out);
    out
}

/// One layer on the newest row, attending to the cached rows in `prev`.
fn layer_row<T: Scalar>(
    layer: &LayerParameters<Tensor<T>>,
    zero_key: Option<&[T]>,
    h: &[T],
    prev: &[Option<Entry<T>>],
    heads: usize,
) -> Entry<T> {
    let d = h.len();
    let pos = prev.len();
    let x = layer_norm(h, &layer.ln1_gamma, &layer.ln1_beta);
    let q = linear(&x, &layer.wq, &layer.bq);
    let k = linear(&x, &layer.wk, &layer.bk);
    let v = linear(&x, &layer.wv, &layer.bv);

    let dh = d / heads;
    let z = usize::from(zero_key.is_some());
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut att = vec![T::zero(); d];
    let mut probs = vec![T::zero(); pos + 1 + z];
    let mut head_out = vec![T::zero(); dh];
    let mut zero_sum = T::zero();
    for hd in 0..heads {
        let col = hd * dh;
        let cached = |j: usize| prev[j].as_ref().expect("earlier positions are filled");
        let keys: Vec<&[T]> =
            (0..=pos).map(|j| if j == pos { &k[col..col + dh] } else { &cached(j).k[col..col + dh] }).collect();
        let values: Vec<&[T]> =
            (0..=pos).map(|j| if j == pos { &v[col..col + dh] } else { &cached(j).v[col..col + dh] }).collect();
        let zh = zero_key.map(|zk| &zk[col..col + dh]);
        kernels::attend_row(&q[col..col + dh], zh, pos + 1, |j| keys[j], |j| values[j], scale, &mut probs, &mut head_out);
        att[col..col + dh].copy_from_slice(&head_out);
        zero_sum = zero_sum + probs[0];
    }
    let zero_attn = zero_key.map(|_| zero_sum * (T::one() / T::from_f64(heads as f64)));

    let o = linear(&att, &layer.wo, &layer.bo);
    let h_a: Vec<T> = h.iter().zip(&o).map(|(&a, &b)| a + b).collect();
    let x2 = layer_norm(&h_a, &layer.ln2_gamma, &layer.ln2_beta);
    let u = linear(&x2, &layer.w_in, &layer.b_in);
    let u: Vec<T> = u.into_iter().map(kernels::gelu).collect();
    let mut u = linear(&u, &layer.w_out, &layer.b_out);
    let mut gate = None;
    if let Some(gp) = &layer.gate {
        let g = kernels::sigmoid(linear(&x2, &gp.weight, &gp.bias)[0]);
        for o in u.iter_mut() {
            *o = *o * g;
        }
        gate = Some(g);
    }
    let out = h_a.iter().zip(&u).map(|(&a, &b)| a + b).collect();
    Entry { k, v, out, zero_attn, gate }
}

fn lm_logits<T: Scalar>(model: &Model<T>, h: &[T]) -> Vec<T> {
    let p = &model.params;
    let x = layer_norm(h, &p.final_gamma, &p.final_beta);
    let table = p.lm_head.as_ref().unwrap_or(&p.token_embedding);
    (0..table.rows()).map(|r| kernels::dot(&x, table.row(r))).collect()
}

/// Result of processing one position.
#[derive(Debug, Clone)]
pub struct DecodeStep<T> {
    /// Next-token logits for the processed position.
    pub logits: Vec<T>,
    pub cycles_used: usize,
    /// Statistics of the cycled applications that ran for this position only.
    pub telemetry: CycleTelemetry,
}

/// Feeds `token` at the next position and returns its next-token logits.
pub fn decode_step<T: Scalar>(
    cache: &mut DecodeCache<T>,
    token: usize,
    model: &Model<T>,
    policy: &ExitPolicy,
) -> Result<DecodeStep<T>> {
    cache.check(model)?;
    let config = model.config();
    let pos = cache.tokens.len();
    if pos >= config.t_max {
        return Err(Error::Usage(format!("position {pos} exceeds the context of {} tokens", config.t_max)));
    }
    if token >= config.vocab {
        return Err(Error::Index(format!("token id {token} outside vocabulary of {}", config.vocab)));
    }
    if policy.is_adaptive() && model.params.zero_pool.is_none() {
        return Err(Error::Config(format!(
            "adaptive exit needs zero-token attention, which {} models lack",
            config.variant
        )));
    }

    let p = &model.params;
    let embedded = p.token_embedding.row(token).iter().zip(p.position_embedding.row(pos)).map(|(&a, &b)| a + b).collect();
    cache.tokens.push(token);
    cache.embedded.push(embedded);
    for slot in cache.main.iter_mut().chain(cache.tail.iter_mut()) {
        slot.push(None);
    }

    let schedule = model.schedule();
    let cycles = schedule.exit_points.len();
    let mut telemetry = CycleTelemetry::new(config.loop_count);
    let mut start = 0;
    for (c, &end) in schedule.exit_points.iter().enumerate() {
        for i in start..=end {
            cache.fill(model, SlotId::Main(i), pos);
            let app = schedule.applications[i];
            if app.cycled_slot.is_some() {
                let e = cache.entry(SlotId::Main(i), pos);
                telemetry.entries.push(LayerCycleStats {
                    layer: app.layer,
                    cycle: app.cycle,
                    zero_attn: e.zero_attn.map(|z| vec![z.as_f64()]).unwrap_or_default(),
                    gate: e.gate.map(|g| vec![g.as_f64()]).unwrap_or_default(),
                });
            }
        }
        start = end + 1;
        let last = c + 1 == cycles;
        let exit = !last && policy.is_adaptive() && should_exit(&telemetry.zero_attention_trace(policy.signal)?, policy);
        if exit || last {
            let h = if cache.tail.is_empty() {
                &cache.entry(SlotId::Main(end), pos).out
            } else {
                cache.fill(model, SlotId::Tail(c), pos);
                &cache.entry(SlotId::Tail(c), pos).out
            };
            let logits = lm_logits(model, h);
            return Ok(DecodeStep { logits, cycles_used: c + 1, telemetry });
        }
    }
    unreachable!("the last cycle always exits")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub ids: Vec<usize>,
    /// Cycles spent on the logits that produced each generated token.
    pub cycles_used: Vec<usize>,
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive generation of `max_new` tokens after `prompt`.
pub fn generate<T: Scalar>(
    prompt: &[usize],
    max_new: usize,
    model: &Model<T>,
    policy: &ExitPolicy,
    sampler: Sampler,
) -> Result<Generation> {
    let t_max = model.config().t_max;
    if prompt.is_empty() {
        return Err(Error::Usage("generation needs a non-empty prompt".into()));
    }
    if prompt.len() + max_new > t_max {
        return Err(Error::Usage(format!(
            "prompt of {} plus {max_new} new tokens exceeds the context of {t_max}",
            prompt.len()
        )));
    }
    let mut ids = prompt.to_vec();
    let mut cycles_used = Vec::with_capacity(max_new);
    if max_new == 0 {
        return Ok(Generation { ids, cycles_used });
    }
    let mut rng = match sampler {
        Sampler::Temperature { temperature, seed } => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Usage(format!("temperature must be positive, got {temperature}")));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        Sampler::Greedy => None,
    };
    let mut cache = DecodeCache::new(model);
    let mut step = None;
    for &t in prompt {
        step = Some(decode_step(&mut cache, t, model, policy)?);
    }
    for n in 0..max_new {
        let s = step.take().expect("a step ran");
        let next = match (&mut rng, sampler) {
            (Some(rng), Sampler::Temperature { temperature, .. }) => {
                let scaled: Vec<f64> = s.logits.iter().map(|x| x.as_f64() / temperature).collect();
                let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
                let dist = WeightedIndex::new(&weights).map_err(|e| Error::NonFinite(format!("sampling weights: {e}")))?;
                dist.sample(rng)
            }
            _ => argmax(&s.logits),
        };
        ids.push(next);
        cycles_used.push(s.cycles_used);
        if n + 1 < max_new {
            step = Some(decode_step(&mut cache, next, model, policy)?);
        }
    }
    Ok(Generation { ids, cycles_used })
}
