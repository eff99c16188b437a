use super::ExitSignal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExitMode {
    /// Always run every cycle.
    #[default]
    FixedN,
    /// Stop at the first cycle whose zero attention reaches the threshold.
    Adaptive,
}

/// When to stop cycling.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExitPolicy {
    pub threshold: f64,
    pub signal: ExitSignal,
    pub mode: ExitMode,
}

impl ExitPolicy {
    pub fn fixed() -> Self {
        Self::default()
    }

    pub fn adaptive(threshold: f64) -> Self {
        Self { threshold, signal: ExitSignal::default(), mode: ExitMode::Adaptive }
    }

    pub fn with_signal(mut self, signal: ExitSignal) -> Self {
        self.signal = signal;
        self
    }

    pub fn is_adaptive(&self) -> bool {
        self.mode == ExitMode::Adaptive
    }

    /// Number of cycles a trace of complete per-cycle signals runs under this
    /// policy, given `loop_count` cycles in total.
    pub fn cycles_used(&self, trace: &[f64], loop_count: usize) -> usize {
        if !self.is_adaptive() {
            return loop_count;
        }
        match first_crossing(trace, self.threshold) {
            Some(c) => (c + 1).min(loop_count),
            None => loop_count,
        }
    }
}

/// 0-based index of the first cycle whose signal is at least `threshold`.
///
/// Zero attention is a softmax share next to at least one real token, so it
/// is strictly below one; a threshold of one or more never fires, even when a
/// share rounds up to exactly 1.0.
pub fn first_crossing(trace: &[f64], threshold: f64) -> Option<usize> {
    if threshold >= 1.0 {
        return None;
    }
    trace.iter().position(|&z| z >= threshold)
}

/// Whether to stop after the last cycle of `trace` (the signals observed so
/// far): true exactly when that cycle is the first to reach the threshold.
pub fn should_exit(trace: &[f64], policy: &ExitPolicy) -> bool {
    policy.is_adaptive() && !trace.is_empty() && first_crossing(trace, policy.threshold) == Some(trace.len() - 1)
}
