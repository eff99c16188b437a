use crate::adaptive::{CycleTelemetry, ExitPolicy};
use crate::data::sequential_batches;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Scalar;

use super::metrics::MetricsRow;

#[derive(Debug, Clone, PartialEq)]
pub struct ExitEval {
    /// Cycles run before this exit (1-based).
    pub exit: usize,
    pub loss: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveEval {
    pub threshold: f64,
    pub loss: f64,
    pub ppl: f64,
    /// Mean cycles run per sequence.
    pub avg_loop: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleEval {
    /// 1-based cycle.
    pub cycle: usize,
    pub zero_attn_mean: Option<f64>,
    pub gate_mean: Option<f64>,
}

/// Teacher-forced evaluation results. Perplexities are `exp` of the mean
/// per-token negative log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tokens: usize,
    pub exits: Vec<ExitEval>,
    pub adaptive: Option<AdaptiveEval>,
    pub cycles: Vec<CycleEval>,
}

impl EvalReport {
    pub fn final_exit(&self) -> &ExitEval {
        self.exits.last().expect("at least one exit")
    }

    /// Perplexity under the evaluated policy: adaptive when present,
    /// otherwise the final exit.
    pub fn ppl(&self) -> f64 {
        self.adaptive.as_ref().map_or(self.final_exit().ppl, |a| a.ppl)
    }

    pub fn metrics_rows(&self, step: u64) -> Vec<MetricsRow> {
        let mut rows = Vec::new();
        for e in &self.exits {
            rows.push(MetricsRow { exit: Some(e.exit), loss: Some(e.loss), ppl: Some(e.ppl), ..MetricsRow::new(step, "eval") });
        }
        if let Some(a) = &self.adaptive {
            rows.push(MetricsRow {
                loss: Some(a.loss),
                ppl: Some(a.ppl),
                avg_loop: Some(a.avg_loop),
                ..MetricsRow::new(step, "eval")
            });
        }
        for c in &self.cycles {
            rows.push(MetricsRow {
                cycle: Some(c.cycle),
                zero_attn_mean: c.zero_attn_mean,
                gate_mean: c.gate_mean,
                ..MetricsRow::new(step, "eval")
            });
        }
        rows
    }
}

/// `-log softmax(row)[target]`, computed in f64.
pub fn token_nll<T: Scalar>(row: &[T], target: usize) -> f64 {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
    z.ln() + max - row[target].as_f64()
}

/// Per-cycle means of a telemetry record.
pub fn cycle_summary(telemetry: &CycleTelemetry) -> Vec<CycleEval> {
    (0..telemetry.cycles_recorded())
        .map(|c| CycleEval {
            cycle: c + 1,
            zero_attn_mean: telemetry.cycle_zero_attention(c).ok(),
            gate_mean: telemetry.cycle_gate(c).ok(),
        })
        .collect()
}

/// Teacher-forced evaluation over every full window of `corpus`.
///
/// Every exit is scored. Under an adaptive policy each sequence stops at the
/// first cycle whose zero attention, averaged over the sequence's positions,
/// reaches the threshold, and is scored at that exit.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    corpus: &[usize],
    seq_len: usize,
    batch_size: usize,
    policy: &ExitPolicy,
) -> Result<EvalReport> {
    let config = model.config();
    if policy.is_adaptive() && model.params.zero_pool.is_none() {
        return Err(Error::Config(format!("adaptive evaluation needs zero-token attention; {} has none", config.variant)));
    }
    let batches = sequential_batches(corpus, seq_len, batch_size)?;
    let n_exits = model.schedule().exit_points.len();
    let mut sums = vec![0.0; n_exits];
    let mut adaptive_sum = 0.0;
    let mut cycles_total = 0usize;
    let mut sequences = 0usize;
    let mut tokens = 0usize;
    let mut telemetry = CycleTelemetry::new(config.loop_count);
    for batch in &batches {
        let out = model.forward_batch(&batch.inputs, batch.batch, batch.seq, true)?;
        for b in 0..batch.batch {
            let rows = b * batch.seq..(b + 1) * batch.seq;
            let chosen = if policy.is_adaptive() {
                let trace = out.telemetry.row_trace(rows.clone(), policy.signal)?;
                policy.cycles_used(&trace, n_exits)
            } else {
                n_exits
            };
            cycles_total += chosen;
            sequences += 1;
            for r in rows {
                let target = batch.targets[r];
                for (e, logits) in out.exit_logits.iter().enumerate() {
                    let nll = token_nll(logits.row(r), target);
                    sums[e] += nll;
                    if e + 1 == chosen {
                        adaptive_sum += nll;
                    }
                }
                tokens += 1;
            }
        }
        telemetry.absorb(out.telemetry);
    }
    let n = tokens as f64;
    let exits = sums
        .iter()
        .enumerate()
        .map(|(e, &s)| ExitEval { exit: e + 1, loss: s / n, ppl: (s / n).exp() })
        .collect();
    let adaptive = policy.is_adaptive().then(|| AdaptiveEval {
        threshold: policy.threshold,
        loss: adaptive_sum / n,
        ppl: (adaptive_sum / n).exp(),
        avg_loop: cycles_total as f64 / sequences as f64,
    });
    Ok(EvalReport { tokens, exits, adaptive, cycles: cycle_summary(&telemetry) })
}
