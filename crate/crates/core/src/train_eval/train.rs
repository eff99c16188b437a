use crate::adaptive::CycleTelemetry;
use crate::data::{Batch, BatchPlan};
use crate::error::{Error, Result};
use crate::model::{forward_taped, Model};
use crate::numerics::{AdamW, AdamWConfig, Scalar, Tape};

use super::loss::multi_exit_loss;
use super::lr::LrSchedule;

/// Optimization settings of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub steps: u64,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub grad_accum: usize,
    /// Seeds the window shuffle.
    pub seed: u64,
    /// Per-exit loss weights; uniform when `None`.
    pub exit_weights: Option<Vec<f64>>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            warmup_frac: 0.01,
            weight_decay: AdamWConfig::default().weight_decay,
            batch: 8,
            seq_len: 64,
            grad_accum: 1,
            seed: 0,
            exit_weights: None,
        }
    }
}

impl TrainPlan {
    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr, self.warmup_frac, self.steps)
    }

    pub fn batch_plan(&self) -> BatchPlan {
        BatchPlan { seq_len: self.seq_len, batch_size: self.batch, seed: self.seed, shuffle: true }
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.batch == 0 || self.grad_accum == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch, grad_accum and seq_len must be positive".into()));
        }
        if self.seq_len > t_max {
            return Err(Error::Config(format!("seq_len {} exceeds t_max {t_max}", self.seq_len)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("invalid lr {} or warmup_frac {}", self.lr, self.warmup_frac)));
        }
        Ok(())
    }
}

/// Loss, gradients (in canonical parameter order) and telemetry of one batch.
pub struct BatchGradients<T> {
    pub loss: f64,
    pub grads: Vec<Vec<T>>,
    pub telemetry: CycleTelemetry,
}

/// Forward and backward pass of the training objective on `batch`.
///
/// All exits are supervised when the model has early-exit heads, otherwise
/// only the final output.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &Batch,
    exit_weights: Option<&[f64]>,
) -> Result<BatchGradients<T>> {
    let config = model.config();
    let mut tape = Tape::new();
    let vars = model.record(&mut tape);
    let out = forward_taped(
        &mut tape,
        &vars,
        config,
        model.schedule(),
        &batch.inputs,
        batch.batch,
        batch.seq,
        config.early_exit_heads,
    )?;
    let loss = multi_exit_loss(&mut tape, &out.exit_logits, &batch.targets, exit_weights)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    let g = tape.backward(loss)?;
    let grads = vars
        .named()
        .into_iter()
        .zip(model.params.named())
        .map(|((_, &v), (_, t))| g.get(v).map_or_else(|| vec![T::zero(); t.len()], <[T]>::to_vec))
        .collect();
    Ok(BatchGradients { loss: value, grads, telemetry: out.telemetry })
}

#[derive(Debug, Clone)]
pub struct StepReport {
    /// Index of the optimizer step just taken (0-based).
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub telemetry: CycleTelemetry,
}

/// Owns a model and its optimizer state across steps.
pub struct Trainer<T> {
    model: Model<T>,
    optimizer: AdamW<T>,
    plan: TrainPlan,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, plan: TrainPlan) -> Result<Self> {
        let config = AdamWConfig { weight_decay: plan.weight_decay, ..AdamWConfig::default() };
        let optimizer = AdamW::new(config, model.params.named().into_iter().map(|(_, t)| t));
        Self::resume(model, optimizer, plan)
    }

    /// Continues from saved optimizer state; the step counter resumes at the
    /// optimizer's step count.
    pub fn resume(model: Model<T>, optimizer: AdamW<T>, plan: TrainPlan) -> Result<Self> {
        plan.validate(model.config().t_max)?;
        let sizes: Vec<usize> = model.params.named().iter().map(|(_, t)| t.len()).collect();
        let tracked: Vec<usize> = optimizer.first_moments().iter().map(Vec::len).collect();
        if sizes != tracked {
            return Err(Error::Conversion("optimizer state does not match the model parameters".into()));
        }
        Ok(Self { model, optimizer, plan })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.optimizer
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn steps_done(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn into_parts(self) -> (Model<T>, AdamW<T>) {
        (self.model, self.optimizer)
    }

    /// One optimizer step over `grad_accum` microbatches. Microbatch `j` of
    /// step `s` takes draws starting at `(s·k + j)·batch`, so accumulation
    /// sees the same windows as a single batch `k` times larger.
    pub fn step(&mut self, corpus: &[usize]) -> Result<StepReport> {
        let step = self.optimizer.step_count();
        let k = self.plan.grad_accum;
        let plan = self.plan.batch_plan();
        let inv_k = T::from_f64(1.0 / k as f64);
        let mut grads: Option<Vec<Vec<T>>> = None;
        let mut loss = 0.0;
        let mut telemetry = CycleTelemetry::new(self.model.config().loop_count);
        for j in 0..k {
            let first = (step * k as u64 + j as u64) * self.plan.batch as u64;
            let batch = plan.draws(corpus, first, self.plan.batch)?;
            let mut out = batch_gradients(&self.model, &batch, self.plan.exit_weights.as_deref())
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("step {step}: {msg}")),
                    other => other,
                })?;
            loss += out.loss;
            telemetry.absorb(out.telemetry);
            if k > 1 {
                for g in out.grads.iter_mut().flatten() {
                    *g = *g * inv_k;
                }
            }
            grads = Some(match grads {
                None => out.grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&out.grads) {
                        for (x, &y) in a.iter_mut().zip(g) {
                            *x = *x + y;
                        }
                    }
                    acc
                }
            });
        }
        let grads = grads.expect("at least one microbatch");
        let lr = self.plan.lr_schedule().lr(step);
        let grad_refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<_> = self.model.params.named_mut().into_iter().map(|(_, t)| t).collect();
        self.optimizer.step(&mut params, &grad_refs, lr)?;
        if params.iter().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite(format!("parameters became non-finite at step {step}")));
        }
        Ok(StepReport { step, loss: loss / k as f64, lr, telemetry })
    }

    /// Steps until `plan.steps` optimizer steps have been taken, calling
    /// `on_step` after each.
    pub fn run(&mut self, corpus: &[usize], mut on_step: impl FnMut(&StepReport) -> Result<()>) -> Result<()> {
        while self.steps_done() < self.plan.steps {
            let report = self.step(corpus)?;
            on_step(&report)?;
        }
        Ok(())
    }
}
