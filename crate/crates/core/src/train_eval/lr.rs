/// Linear warmup to `peak`, then cosine decay towards zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Warmup covers `warmup_frac` of the run, at least one step.
    pub fn new(peak: f64, warmup_frac: f64, total_steps: u64) -> Self {
        let warmup_steps = ((warmup_frac * total_steps as f64).ceil() as u64).max(1);
        Self { peak, warmup_steps, total_steps }
    }

    pub fn lr(&self, step: u64) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.peak * step as f64 / w as f64;
        }
        let span = self.total_steps.saturating_sub(w).max(1) as f64;
        let progress = ((step - w) as f64 / span).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
