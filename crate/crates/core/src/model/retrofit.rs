//! Converting a trained vanilla stack into a head-tail cycled model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::config::{ModelConfig, Variant};
use super::forward::Model;
use super::params::{GateParams, LayerParameters, ZeroTokenPool, INIT_STD};

/// Gate bias for retrofitted layers; sigmoid(2) ≈ 0.88 keeps the FFN nearly
/// fully on at the start of fine-tuning.
pub const RETROFIT_GATE_BIAS: f64 = 2.0;

fn mean_tensor<T: Scalar>(tensors: &[&Tensor<T>]) -> Tensor<T> {
    let mut acc = Tensor::zeros(tensors[0].shape());
    for t in tensors {
        for (a, &x) in acc.data_mut().iter_mut().zip(t.data()) {
            *a = *a + x;
        }
    }
    let n = T::from_f64(tensors.len() as f64);
    acc.map(|x| x / n)
}

fn mean_layer<T: Scalar>(layers: &[LayerParameters<Tensor<T>>]) -> LayerParameters<Tensor<T>> {
    let pick = |f: fn(&LayerParameters<Tensor<T>>) -> &Tensor<T>| {
        let ts: Vec<&Tensor<T>> = layers.iter().map(f).collect();
        mean_tensor(&ts)
    };
    LayerParameters {
        ln1_gamma: pick(|l| &l.ln1_gamma),
        ln1_beta: pick(|l| &l.ln1_beta),
        wq: pick(|l| &l.wq),
        bq: pick(|l| &l.bq),
        wk: pick(|l| &l.wk),
        bk: pick(|l| &l.bk),
        wv: pick(|l| &l.wv),
        bv: pick(|l| &l.bv),
        wo: pick(|l| &l.wo),
        bo: pick(|l| &l.bo),
        ln2_gamma: pick(|l| &l.ln2_gamma),
        ln2_beta: pick(|l| &l.ln2_beta),
        w_in: pick(|l| &l.w_in),
        b_in: pick(|l| &l.b_in),
        w_out: pick(|l| &l.w_out),
        b_out: pick(|l| &l.b_out),
        gate: None,
    }
}

/// Builds a three-layer head-tail model from `vanilla`: head and tail are
/// copied, the vanilla middle layers are averaged into the single shared
/// middle layer, pool keys are drawn from N(0, 0.02) and gates start with zero
/// weight and bias +2.
pub fn init_from_vanilla<T: Scalar>(vanilla: &Model<T>, target: ModelConfig, seed: u64) -> Result<Model<T>> {
    let src = vanilla.config();
    if src.variant != Variant::Vanilla {
        return Err(Error::Conversion(format!("retrofit source must be vanilla, got {}", src.variant)));
    }
    if !target.variant.decouples_head_tail() {
        return Err(Error::Conversion(format!("retrofit target must be HTC or ZTT, got {}", target.variant)));
    }
    if src.all_layers < 3 {
        return Err(Error::Conversion(format!(
            "vanilla model has {} layers; retrofit needs a head, at least one middle layer and a tail",
            src.all_layers
        )));
    }
    if target.all_layers != 3 {
        return Err(Error::Conversion(format!(
            "retrofit target must have 3 distinct layers (head, shared middle, tail), got {}",
            target.all_layers
        )));
    }
    let same = src.d_model == target.d_model
        && src.n_heads == target.n_heads
        && src.d_ff == target.d_ff
        && src.vocab == target.vocab
        && src.t_max == target.t_max
        && src.tie_embeddings == target.tie_embeddings;
    if !same {
        return Err(Error::Conversion("vanilla and target dimensions differ".into()));
    }
    target.validate()?;

    let p = &vanilla.params;
    let last = src.all_layers - 1;
    let middle = mean_layer(&p.layers[1..last]);
    let d = target.d_model;
    let with_gate = |mut layer: LayerParameters<Tensor<T>>| {
        layer.gate = target.use_gate.then(|| GateParams {
            weight: Tensor::zeros(&[d, 1]),
            bias: Tensor::full(&[1], T::from_f64(RETROFIT_GATE_BIAS)),
        });
        layer
    };
    let layers = vec![with_gate(p.layers[0].clone()), with_gate(middle), with_gate(p.layers[last].clone())];

    let zero_pool = target.use_zero_token.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let (slots, cycles) = (target.num_cycled(), target.loop_count);
        ZeroTokenPool {
            slots,
            cycles,
            keys: (0..slots * cycles).map(|_| Tensor::from_fn(&[d], |_| T::from_f64(normal.sample(&mut rng)))).collect(),
        }
    });

    let mut params = p.clone();
    params.layers = layers;
    params.zero_pool = zero_pool;
    Model::new(target, params)
}
