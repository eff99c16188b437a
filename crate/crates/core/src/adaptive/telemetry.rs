use std::ops::Range;

use crate::error::{Error, Result};

/// Which cycled layers feed the per-cycle exit signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExitSignal {
    /// Mean over every cycled layer of the cycle.
    #[default]
    AllCycledLayers,
    /// Only the last cycled layer of the cycle.
    LastCycledLayer,
}

/// Per-query statistics of one cycled layer application.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCycleStats {
    pub layer: usize,
    pub cycle: usize,
    /// Zero-slot attention per query row, averaged over heads. Empty when the
    /// model has no zero token.
    pub zero_attn: Vec<f64>,
    /// Gate output per row. Empty when the layer is ungated.
    pub gate: Vec<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl LayerCycleStats {
    pub fn zero_attn_mean(&self) -> Option<f64> {
        mean(&self.zero_attn)
    }

    pub fn gate_mean(&self) -> Option<f64> {
        mean(&self.gate)
    }

    fn zero_attn_mean_over(&self, rows: &Range<usize>) -> Option<f64> {
        mean(self.zero_attn.get(rows.clone())?)
    }
}

/// Statistics for every cycled application of a forward pass, in schedule
/// order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CycleTelemetry {
    pub loop_count: usize,
    pub entries: Vec<LayerCycleStats>,
}

impl CycleTelemetry {
    pub fn new(loop_count: usize) -> Self {
        Self { loop_count, entries: Vec::new() }
    }

    pub fn cycle_entries(&self, cycle: usize) -> impl Iterator<Item = &LayerCycleStats> {
        self.entries.iter().filter(move |e| e.cycle == cycle)
    }

    fn cycle_stat(
        &self,
        cycle: usize,
        signal: ExitSignal,
        stat: impl Fn(&LayerCycleStats) -> Option<f64>,
    ) -> Result<f64> {
        let entries: Vec<&LayerCycleStats> = self.cycle_entries(cycle).collect();
        let chosen: &[&LayerCycleStats] = match signal {
            ExitSignal::AllCycledLayers => &entries,
            ExitSignal::LastCycledLayer => entries.last().map_or(&[], std::slice::from_ref),
        };
        let values: Option<Vec<f64>> = chosen.iter().map(|e| stat(e)).collect();
        match values {
            Some(v) if !v.is_empty() => Ok(v.iter().sum::<f64>() / v.len() as f64),
            _ => Err(Error::Usage(format!("no telemetry recorded for cycle {}", cycle + 1))),
        }
    }

    /// Zero attention of a 0-based `cycle`: mean of its cycled layers'
    /// zero-attention means.
    pub fn cycle_zero_attention(&self, cycle: usize) -> Result<f64> {
        self.cycle_stat(cycle, ExitSignal::AllCycledLayers, LayerCycleStats::zero_attn_mean)
    }

    pub fn cycle_zero_attention_with(&self, cycle: usize, signal: ExitSignal) -> Result<f64> {
        self.cycle_stat(cycle, signal, LayerCycleStats::zero_attn_mean)
    }

    pub fn cycle_gate(&self, cycle: usize) -> Result<f64> {
        self.cycle_stat(cycle, ExitSignal::AllCycledLayers, LayerCycleStats::gate_mean)
    }

    /// Per-cycle zero attention for the cycles recorded so far.
    pub fn zero_attention_trace(&self, signal: ExitSignal) -> Result<Vec<f64>> {
        (0..self.cycles_recorded()).map(|c| self.cycle_zero_attention_with(c, signal)).collect()
    }

    /// Per-cycle zero attention restricted to query rows `rows` (one sequence
    /// in a batch, or one decoding position).
    pub fn row_trace(&self, rows: Range<usize>, signal: ExitSignal) -> Result<Vec<f64>> {
        (0..self.cycles_recorded())
            .map(|c| self.cycle_stat(c, signal, |e| e.zero_attn_mean_over(&rows)))
            .collect()
    }

    pub fn cycles_recorded(&self) -> usize {
        self.entries.iter().map(|e| e.cycle + 1).max().unwrap_or(0)
    }

    /// Appends the rows of `other` (same schedule) after this one's.
    pub fn absorb(&mut self, other: CycleTelemetry) {
        if self.entries.is_empty() {
            *self = other;
            return;
        }
        for (mine, theirs) in self.entries.iter_mut().zip(other.entries) {
            debug_assert_eq!((mine.layer, mine.cycle), (theirs.layer, theirs.cycle));
            mine.zero_attn.extend(theirs.zero_attn);
            mine.gate.extend(theirs.gate);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(layer: usize, cycle: usize, za: &[f64]) -> LayerCycleStats {
        LayerCycleStats { layer, cycle, zero_attn: za.to_vec(), gate: vec![] }
    }

    #[test]
    fn singleton_and_pair_means() {
        let t = CycleTelemetry { loop_count: 1, entries: vec![entry(1, 0, &[0.1, 0.3])] };
        assert!((t.cycle_zero_attention(0).unwrap() - 0.2).abs() < 1e-15);

        let t = CycleTelemetry { loop_count: 1, entries: vec![entry(1, 0, &[0.2]), entry(2, 0, &[0.4])] };
        assert!((t.cycle_zero_attention(0).unwrap() - 0.3).abs() < 1e-15);
        let last = t.cycle_zero_attention_with(0, ExitSignal::LastCycledLayer).unwrap();
        assert!((last - 0.4).abs() < 1e-15);
    }

    #[test]
    fn missing_cycle_is_a_usage_error() {
        let t = CycleTelemetry { loop_count: 2, entries: vec![entry(1, 0, &[0.5])] };
        assert!(matches!(t.cycle_zero_attention(1), Err(Error::Usage(_))));
        assert!(matches!(t.cycle_gate(0), Err(Error::Usage(_))));
    }

    #[test]
    fn row_trace_restricts_rows() {
        let t = CycleTelemetry {
            loop_count: 2,
            entries: vec![entry(1, 0, &[0.0, 1.0, 0.5, 0.5]), entry(1, 1, &[1.0, 1.0, 0.0, 0.25])],
        };
        assert_eq!(t.row_trace(0..2, ExitSignal::AllCycledLayers).unwrap(), vec![0.5, 1.0]);
        assert_eq!(t.row_trace(2..4, ExitSignal::AllCycledLayers).unwrap(), vec![0.5, 0.125]);
    }

    #[test]
    fn uniform_quarter_share_is_independent_of_head_count() {
        use crate::numerics::{AttentionLayout, Tape, Tensor};
        let d = 8;
        for heads in [1, 2, 4] {
            let dh = d / heads;
            // Zero-slot logit sits ln 3 below the single visible key, so every
            // query gives it exactly a quarter of its weight.
            let zk = -(3f64).ln() * (dh as f64).sqrt() / dh as f64;
            let mut tape = Tape::new();
            let q = tape.leaf(Tensor::from_fn(&[5, d], |_| 1.0));
            let k = tape.leaf(Tensor::from_fn(&[5, d], |_| 0.0));
            let v = tape.leaf(Tensor::from_fn(&[5, d], |i| i as f64));
            let z = tape.leaf(Tensor::from_fn(&[d], |_| zk));
            let att = tape.attention(q, k, v, Some(z), AttentionLayout { batch: 5, seq: 1, heads }).unwrap();
            let t = CycleTelemetry { loop_count: 1, entries: vec![entry(1, 0, att.zero_attn.as_ref().unwrap())] };
            assert!((t.cycle_zero_attention(0).unwrap() - 0.25).abs() < 1e-12, "heads {heads}");
        }
    }
}
