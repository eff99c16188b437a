use crate::adaptive::{CycleTelemetry, LayerCycleStats};
use crate::error::{Error, Result};
use crate::numerics::{AttentionLayout, Scalar, Tape, Tensor, Var};

use super::config::ModelConfig;
use super::params::{LayerParameters, ModelParams};
use super::schedule::CycleSchedule;

/// Layer-norm epsilon used by every norm in the model.
pub const LN_EPS: f64 = 1e-5;

pub struct AttentionSublayer<T> {
    /// `H_in + MultiHead(LN(H_in))`
    pub out: Var,
    /// The attention node; its saved probabilities include the zero slot.
    pub attention: Var,
    pub zero_attn: Option<Vec<T>>,
}

/// Pre-norm attention sublayer with an optional zero slot keyed by `zero_key`.
pub fn attention_with_zero_token<T: Scalar>(
    tape: &mut Tape<T>,
    h_in: Var,
    layer: &LayerParameters<Var>,
    zero_key: Option<Var>,
    layout: AttentionLayout,
) -> Result<AttentionSublayer<T>> {
    let x = tape.layer_norm(h_in, layer.ln1_gamma, layer.ln1_beta, T::from_f64(LN_EPS))?;
    let q = tape.matmul(x, layer.wq)?;
    let q = tape.add_row(q, layer.bq)?;
    let k = tape.matmul(x, layer.wk)?;
    let k = tape.add_row(k, layer.bk)?;
    let v = tape.matmul(x, layer.wv)?;
    let v = tape.add_row(v, layer.bv)?;
    let att = tape.attention(q, k, v, zero_key, layout)?;
    let o = tape.matmul(att.out, layer.wo)?;
    let o = tape.add_row(o, layer.bo)?;
    let out = tape.add(h_in, o)?;
    Ok(AttentionSublayer { out, attention: att.out, zero_attn: att.zero_attn })
}

pub struct FfnSublayer<T> {
    /// `H_A + FFN(LN(H_A)) · gate`
    pub out: Var,
    /// Gate value per row; `None` for ungated layers (gate ≡ 1).
    pub gate: Option<Vec<T>>,
}

pub fn gated_ffn<T: Scalar>(tape: &mut Tape<T>, h_a: Var, layer: &LayerParameters<Var>) -> Result<FfnSublayer<T>> {
    let x = tape.layer_norm(h_a, layer.ln2_gamma, layer.ln2_beta, T::from_f64(LN_EPS))?;
    let u = tape.matmul(x, layer.w_in)?;
    let u = tape.add_row(u, layer.b_in)?;
    let u = tape.gelu(u);
    let u = tape.matmul(u, layer.w_out)?;
    let mut u = tape.add_row(u, layer.b_out)?;
    let mut gate_values = None;
    if let Some(gate) = &layer.gate {
        let g = tape.matmul(x, gate.weight)?;
        let g = tape.add_row(g, gate.bias)?;
        let g = tape.sigmoid(g);
        gate_values = Some(tape.value(g).data().to_vec());
        u = tape.mul_rows(u, g)?;
    }
    let out = tape.add(h_a, u)?;
    Ok(FfnSublayer { out, gate: gate_values })
}

pub struct LayerOutput<T> {
    pub out: Var,
    pub zero_attn: Option<Vec<T>>,
    pub gate: Option<Vec<T>>,
}

pub fn apply_layer<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    layer: &LayerParameters<Var>,
    zero_key: Option<Var>,
    layout: AttentionLayout,
) -> Result<LayerOutput<T>> {
    let att = attention_with_zero_token(tape, h, layer, zero_key, layout)?;
    let ffn = gated_ffn(tape, att.out, layer)?;
    Ok(LayerOutput { out: ffn.out, zero_attn: att.zero_attn, gate: ffn.gate })
}

/// Final norm and (tied or untied) LM head.
pub fn lm_head<T: Scalar>(tape: &mut Tape<T>, h: Var, params: &ModelParams<Var>) -> Result<Var> {
    let x = tape.layer_norm(h, params.final_gamma, params.final_beta, T::from_f64(LN_EPS))?;
    let table = params.lm_head.unwrap_or(params.token_embedding);
    tape.matmul_nt(x, table)
}

pub struct TapedForward {
    /// One logits node per exit, earliest first; the last is the model output.
    pub exit_logits: Vec<Var>,
    pub telemetry: CycleTelemetry,
}

fn as_f64<T: Scalar>(v: Option<Vec<T>>) -> Vec<f64> {
    v.map(|xs| xs.into_iter().map(Scalar::as_f64).collect()).unwrap_or_default()
}

/// Runs the schedule over `batch` sequences of `seq` tokens each.
///
/// With `capture_exits`, every cycle end produces logits (through the tail
/// layer for head-tail variants); otherwise only the final output does.
#[allow(clippy::too_many_arguments)]
pub fn forward_taped<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    schedule: &CycleSchedule,
    tokens: &[usize],
    batch: usize,
    seq: usize,
    capture_exits: bool,
) -> Result<TapedForward> {
    if seq == 0 || seq > config.t_max {
        return Err(Error::Usage(format!("sequence length {seq} outside 1..={}", config.t_max)));
    }
    if tokens.len() != batch * seq {
        return Err(Error::dim(format!("{} tokens for a {batch}×{seq} batch", tokens.len())));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab) {
        return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", config.vocab)));
    }
    let layout = AttentionLayout { batch, seq, heads: config.n_heads };
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = tape.embedding(params.token_embedding, tokens)?;
    let pos = tape.embedding(params.position_embedding, &positions)?;
    let mut h = tape.add(tok, pos)?;

    let mut telemetry = CycleTelemetry::new(config.loop_count);
    let mut exit_logits = Vec::new();
    let final_exit = *schedule.exit_points.last().expect("schedule has an exit");
    let tail = schedule.tail_index();

    for (i, app) in schedule.applications.iter().enumerate() {
        let layer = &params.layers[app.layer];
        let zero_key = match (&params.zero_pool, app.cycled_slot) {
            (Some(pool), Some(slot)) => Some(*pool.key(slot, app.cycle)),
            _ => None,
        };
        let out = apply_layer(tape, h, layer, zero_key, layout)?;
        h = out.out;
        if app.cycled_slot.is_some() {
            telemetry.entries.push(LayerCycleStats {
                layer: app.layer,
                cycle: app.cycle,
                zero_attn: as_f64(out.zero_attn),
                gate: as_f64(out.gate),
            });
        }
        if capture_exits && i != final_exit && schedule.exit_points.contains(&i) {
            let exit_h = match tail {
                Some(t) => {
                    let tail_layer = &params.layers[schedule.applications[t].layer];
                    apply_layer(tape, h, tail_layer, None, layout)?.out
                }
                None => h,
            };
            exit_logits.push(lm_head(tape, exit_h, params)?);
        }
    }
    exit_logits.push(lm_head(tape, h, params)?);
    Ok(TapedForward { exit_logits, telemetry })
}

/// A model: config, its schedule and owned weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    schedule: CycleSchedule,
    pub params: ModelParams<Tensor<T>>,
}

pub struct ForwardOutput<T> {
    pub exit_logits: Vec<Tensor<T>>,
    pub telemetry: CycleTelemetry,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, params: ModelParams<Tensor<T>>) -> Result<Self> {
        let schedule = CycleSchedule::build(&config)?;
        let template = ModelParams::shape_template(&config)?;
        let expected: Vec<(String, &Vec<usize>)> = template.named();
        let actual = params.named();
        if expected.len() != actual.len() {
            return Err(Error::Conversion(format!(
                "config expects {} tensors, parameters hold {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, es), (an, at)) in expected.iter().zip(&actual) {
            if en != an || es.as_slice() != at.shape() {
                return Err(Error::Conversion(format!(
                    "parameter {an} {:?} does not match expected {en} {es:?}",
                    at.shape()
                )));
            }
        }
        Ok(Self { config, schedule, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &CycleSchedule {
        &self.schedule
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn record(&self, tape: &mut Tape<T>) -> ModelParams<Var> {
        self.params.map(|_, t| tape.leaf(t.clone()))
    }

    pub fn forward_batch(&self, tokens: &[usize], batch: usize, seq: usize, capture_exits: bool) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape);
        let out = forward_taped(&mut tape, &vars, &self.config, &self.schedule, tokens, batch, seq, capture_exits)?;
        let exit_logits = out.exit_logits.iter().map(|&v| tape.value(v).clone()).collect();
        Ok(ForwardOutput { exit_logits, telemetry: out.telemetry })
    }

    /// Forward pass over a single sequence.
    pub fn forward(&self, tokens: &[usize], capture_exits: bool) -> Result<ForwardOutput<T>> {
        self.forward_batch(tokens, 1, tokens.len(), capture_exits)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), schedule: self.schedule.clone(), params: self.params.cast() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn tiny(variant: Variant, l: usize, n: usize) -> ModelConfig {
        let mut c = ModelConfig::new(variant, l, n).with_dims(16, 2, 32);
        c.t_max = 8;
        c
    }

    fn ln_row(x: &[f64]) -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()).collect()
    }

    /// One head, d=2, T=2 with identity projections, against a brute-force
    /// softmax over [zero slot, visible keys].
    #[test]
    fn small_attention_matches_brute_force() {
        let mut c = ModelConfig::new(Variant::ZeroToken, 3, 1).with_dims(2, 1, 2);
        c.t_max = 2;
        let mut p = ModelParams::<Tensor<f64>>::init(&c, 0).unwrap();
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let layer = &mut p.layers[1];
        layer.wq = eye.clone();
        layer.wk = Tensor::from_rows(&[&[0.5, 0.0], &[0.0, 2.0]]).unwrap();
        layer.wv = Tensor::from_rows(&[&[1.0, 1.0], &[0.0, 3.0]]).unwrap();
        layer.wo = eye;
        let zkey = [0.7, -0.3];
        let h = [[0.3, -1.2], [2.0, 0.5]];

        let mut tape = Tape::new();
        let vars = p.map(|_, t| tape.leaf(t.clone()));
        let hv = tape.leaf(Tensor::from_rows(&[&h[0], &h[1]]).unwrap());
        let z = tape.leaf(Tensor::new(vec![2], zkey.to_vec()).unwrap());
        let layout = AttentionLayout { batch: 1, seq: 2, heads: 1 };
        let out = attention_with_zero_token(&mut tape, hv, &vars.layers[1], Some(z), layout).unwrap();
        let got = tape.value(out.out).data().to_vec();

        let x: Vec<Vec<f64>> = h.iter().map(|r| ln_row(r)).collect();
        let k: Vec<[f64; 2]> = x.iter().map(|r| [0.5 * r[0], 2.0 * r[1]]).collect();
        let v: Vec<[f64; 2]> = x.iter().map(|r| [r[0], r[0] + 3.0 * r[1]]).collect();
        let scale = 1.0 / 2f64.sqrt();
        for t in 0..2 {
            let q = &x[t];
            let dot = |a: &[f64]| (q[0] * a[0] + q[1] * a[1]) * scale;
            let mut logits = vec![dot(&zkey)];
            logits.extend((0..=t).map(|j| dot(&k[j])));
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let w: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            for c in 0..2 {
                let att: f64 = (0..=t).map(|j| w[j + 1] * v[j][c]).sum();
                assert!((got[t * 2 + c] - (h[t][c] + att)).abs() < 1e-10);
            }
            assert!((out.zero_attn.as_ref().unwrap()[t] - w[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn extreme_zero_keys_saturate_or_vanish() {
        let c = tiny(Variant::ZeroToken, 3, 2);
        let mut p = ModelParams::<Tensor<f64>>::init(&c, 1).unwrap();
        p.layers[1].bq = Tensor::full(&[16], 1.0);
        let h0 = Tensor::from_fn(&[8, 16], |i| ((i * 37 % 11) as f64 - 5.0) * 0.2);
        let layout = AttentionLayout { batch: 1, seq: 8, heads: 2 };
        // With q ≈ 1 in every coordinate, a key of ±c gives slot logits of ±c·8/√8.
        let logit_scale = 8.0 / 8f64.sqrt();
        let run = |key: Option<f64>| {
            let mut tape = Tape::new();
            let vars = p.map(|_, t| tape.leaf(t.clone()));
            let h = tape.leaf(h0.clone());
            let z = key.map(|k| tape.leaf(Tensor::full(&[16], k / logit_scale)));
            let out = attention_with_zero_token(&mut tape, h, &vars.layers[1], z, layout).unwrap();
            (tape.value(out.out).clone(), out.zero_attn)
        };
        let (sat, za) = run(Some(40.0));
        assert!(sat.max_abs_diff(&h0) < 1e-5);
        assert!(za.unwrap().iter().all(|&z| z > 1.0 - 1e-9));
        let (sup, za) = run(Some(-40.0));
        let (plain, none) = run(None);
        assert!(none.is_none());
        assert!(sup.max_abs_diff(&plain) < 1e-6);
        assert!(za.unwrap().iter().all(|&z| z < 1e-9));
    }

    #[test]
    fn half_open_gate_scales_the_ffn_branch() {
        let c = tiny(Variant::ZeroToken, 3, 2);
        let mut p = ModelParams::<Tensor<f64>>::init(&c, 2).unwrap();
        p.layers[1].gate.as_mut().unwrap().weight = Tensor::zeros(&[16, 1]);
        let h0 = Tensor::from_fn(&[4, 16], |i| (i as f64 * 0.37).sin());
        let mut tape = Tape::new();
        let vars = p.map(|_, t| tape.leaf(t.clone()));
        let h = tape.leaf(h0.clone());
        let gated = gated_ffn(&mut tape, h, &vars.layers[1]).unwrap();
        assert_eq!(gated.gate.as_deref(), Some(&[0.5; 4][..]));

        let mut ungated = vars.layers[1].clone();
        ungated.gate = None;
        let full = gated_ffn(&mut tape, h, &ungated).unwrap();
        let (g, f) = (tape.value(gated.out).data(), tape.value(full.out).data());
        for i in 0..h0.len() {
            let branch = f[i] - h0.data()[i];
            assert!((g[i] - (h0.data()[i] + 0.5 * branch)).abs() < 1e-12);
        }
    }

    #[test]
    fn exit_counts_and_telemetry_shape() {
        let tokens: Vec<usize> = (0..6).map(|i| i * 40).collect();
        let v = Model::<f32>::init(tiny(Variant::Vanilla, 3, 1), 3).unwrap();
        let out = v.forward(&tokens, true).unwrap();
        assert_eq!(out.exit_logits.len(), 1);
        assert_eq!(out.exit_logits[0].shape(), &[6, 259]);
        assert!(out.telemetry.entries.is_empty());

        for variant in [Variant::HeadTailCycling, Variant::ZeroToken] {
            let m = Model::<f32>::init(tiny(variant, 3, 4), 4).unwrap();
            let out = m.forward(&tokens, true).unwrap();
            assert_eq!(out.exit_logits.len(), 4);
            let cycled = m.schedule().cycled_applications().count();
            assert_eq!(out.telemetry.entries.len(), cycled);
            for e in &out.telemetry.entries {
                if variant == Variant::ZeroToken {
                    assert_eq!(e.zero_attn.len(), 6);
                    assert!(e.zero_attn.iter().all(|&z| z > 0.0 && z < 1.0));
                    assert!(e.gate.iter().all(|&g| g > 0.0 && g < 1.0));
                } else {
                    assert!(e.zero_attn.is_empty() && e.gate.is_empty());
                }
            }
            assert_eq!(m.forward(&tokens, false).unwrap().exit_logits.len(), 1);
        }
    }

    #[test]
    fn cycle_means_ignore_batch_order() {
        let seqs: [[usize; 4]; 3] = [[1, 2, 3, 4], [200, 100, 50, 25], [7, 7, 7, 7]];
        let m = Model::<f64>::init(tiny(Variant::ZeroToken, 3, 3), 6).unwrap();
        let run = |order: [usize; 3]| {
            let tokens: Vec<usize> = order.iter().flat_map(|&i| seqs[i]).collect();
            let t = m.forward_batch(&tokens, 3, 4, false).unwrap().telemetry;
            (0..3).map(|c| (t.cycle_zero_attention(c).unwrap(), t.cycle_gate(c).unwrap())).collect::<Vec<_>>()
        };
        for (a, b) in run([0, 1, 2]).into_iter().zip(run([2, 0, 1])) {
            assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_middle_layer_drives_every_cycle() {
        let tokens = [3, 1, 4, 1, 5, 9];
        let m = Model::<f64>::init(tiny(Variant::ZeroToken, 3, 3), 5).unwrap();
        let mut changed = m.clone();
        changed.params.layers[1].wk.data_mut()[0] += 0.5;
        let a = m.forward(&tokens, true).unwrap().telemetry;
        let b = changed.forward(&tokens, true).unwrap().telemetry;
        assert_eq!(a.entries.len(), 3);
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_ne!(x.zero_attn, y.zero_attn, "cycle {}", x.cycle);
        }
    }

    #[test]
    fn input_errors() {
        let m = Model::<f32>::init(tiny(Variant::ZeroToken, 3, 2), 6).unwrap();
        assert!(matches!(m.forward(&[1, 259], false), Err(Error::Index(_))));
        assert!(matches!(m.forward(&[0; 9], false), Err(Error::Usage(_))));
        assert!(matches!(m.forward(&[], false), Err(Error::Usage(_))));
        assert!(matches!(m.forward_batch(&[0; 5], 2, 3, false), Err(Error::Dimension(_))));
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let m = Model::<f32>::init(tiny(Variant::ZeroToken, 4, 2), 7).unwrap();
        let tokens = [10, 20, 30, 40, 50];
        let bits = |o: ForwardOutput<f32>| o.exit_logits.iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(m.forward(&tokens, true).unwrap()), bits(m.forward(&tokens, true).unwrap()));
    }
}
