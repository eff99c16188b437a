use crate::error::{Error, Result};
use crate::model::{param_count, Model, ModelConfig, Variant};
use crate::numerics::Scalar;

use super::eval::evaluate;
use super::train::{TrainPlan, Trainer};
use crate::adaptive::ExitPolicy;

/// Every `(all_layers, loop_count)` of `variant` whose schedule runs exactly
/// `budget` layer applications.
///
/// Cycled variants must actually cycle (`loop_count ≥ 2`); head-tail
/// variants need at least one middle layer.
pub fn layouts(budget: usize, variant: Variant) -> Result<Vec<(usize, usize)>> {
    if budget == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    let found: Vec<(usize, usize)> = match variant {
        Variant::Vanilla => vec![(budget, 1)],
        Variant::BasicCycling => (2..=budget).filter(|n| budget % n == 0).map(|n| (budget / n, n)).rev().collect(),
        Variant::HeadTailCycling | Variant::ZeroToken => (3..=budget)
            .filter_map(|l| {
                let rest = budget.checked_sub(2)?;
                (rest % (l - 2) == 0 && rest / (l - 2) >= 2).then(|| (l, rest / (l - 2)))
            })
            .collect(),
    };
    if found.is_empty() {
        return Err(Error::Config(format!("no {variant} layout runs exactly {budget} layer applications")));
    }
    Ok(found)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant: Variant,
    pub all_layers: usize,
    pub loop_count: usize,
    pub applications: usize,
    pub params: usize,
    pub final_loss: f64,
    pub ppl: f64,
}

pub const SWEEP_HEADER: &str = "variant,all_layers,loop_count,applications,params,final_train_loss,eval_ppl";

impl SweepRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.variant, self.all_layers, self.loop_count, self.applications, self.params, self.final_loss, self.ppl
        )
    }
}

/// Trains and evaluates every layout of every variant at `budget` with the
/// same plan, dimensions and seed. `base` supplies dimensions and flags;
/// gate and zero-token switches follow each variant's defaults.
pub fn budget_sweep<T: Scalar>(
    budget: usize,
    variants: &[Variant],
    base: &ModelConfig,
    plan: &TrainPlan,
    train: &[usize],
    eval: &[usize],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut jobs = Vec::new();
    for &v in variants {
        for (l, n) in layouts(budget, v)? {
            jobs.push((v, l, n));
        }
    }
    let mut rows = Vec::new();
    for (variant, l, n) in jobs {
        let mut config = ModelConfig::new(variant, l, n).with_dims(base.d_model, base.n_heads, base.d_ff);
        config.vocab = base.vocab;
        config.t_max = base.t_max;
        config.tie_embeddings = base.tie_embeddings;
        config.early_exit_heads = base.early_exit_heads;
        let model = Model::<T>::init(config.clone(), plan.seed)?;
        let mut trainer = Trainer::new(model, plan.clone())?;
        let mut final_loss = f64::NAN;
        trainer.run(train, |r| {
            final_loss = r.loss;
            Ok(())
        })?;
        let report = evaluate(trainer.model(), eval, plan.seq_len, plan.batch, &ExitPolicy::fixed())?;
        let row = SweepRow {
            variant,
            all_layers: l,
            loop_count: n,
            applications: config.effective_depth(),
            params: param_count(&config)?.total,
            final_loss,
            ppl: report.final_exit().ppl,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
