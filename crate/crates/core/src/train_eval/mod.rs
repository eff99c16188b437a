//! Training with multi-exit supervision, teacher-forced evaluation and the
//! fixed-budget sweep.

mod eval;
mod loss;
mod lr;
mod metrics;
mod sweep;
mod train;

pub use eval::{cycle_summary, evaluate, token_nll, AdaptiveEval, CycleEval, EvalReport, ExitEval};
pub use loss::{multi_exit_loss, uniform_weights};
pub use lr::LrSchedule;
pub use metrics::{MetricsRow, MetricsWriter, METRICS_HEADER};
pub use sweep::{budget_sweep, layouts, SweepRow, SWEEP_HEADER};
pub use train::{batch_gradients, BatchGradients, StepReport, TrainPlan, Trainer};
