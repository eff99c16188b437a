use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use ztt_core::adaptive::{generate, ExitPolicy, Sampler};
use ztt_core::data::{decode, encode, load_corpus, split_corpus};
use ztt_core::model::{init_from_vanilla, param_count, Model, Variant};
use ztt_core::numerics::AdamWConfig;
use ztt_core::train_eval::{budget_sweep, evaluate, EvalReport, MetricsRow, MetricsWriter, Trainer, SWEEP_HEADER};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Toggle};
use crate::error::CliError;

/// Share of the corpus used for training; the rest is held out.
pub const TRAIN_FRACTION: f64 = 0.9;

type CliResult<T = ()> = Result<T, CliError>;

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|source| CliError::Checkpoint { path: path.into(), source })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> CliResult {
    let bytes = ck.to_bytes().map_err(|source| CliError::Checkpoint { path: path.into(), source })?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn load_model(path: &Path) -> CliResult<(Checkpoint, RunConfig, Model<f32>)> {
    let ck = read_checkpoint(path)?;
    let wrap = |source| CliError::Checkpoint { path: path.into(), source };
    let rc = ck.run_config().map_err(wrap)?;
    let model = ck.model().map_err(wrap)?;
    Ok((ck, rc, model))
}

fn policy(threshold: Option<f64>) -> CliResult<ExitPolicy> {
    match threshold {
        None => Ok(ExitPolicy::fixed()),
        Some(p) if p >= 0.0 && p.is_finite() => Ok(ExitPolicy::adaptive(p)),
        Some(p) => Err(ztt_core::Error::Usage(format!("exit threshold must be finite and non-negative, got {p}")).into()),
    }
}

fn io_err(out: &str) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(out, e)
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub resume: Option<PathBuf>,
    pub out: PathBuf,
    pub metrics: PathBuf,
}

pub fn train(args: &TrainArgs, stdout: &mut dyn Write) -> CliResult {
    let rc = RunConfig::load(&args.config)?;
    let config = rc.model_config()?;
    let tokens = load_corpus(&rc.corpus_path)?;
    let (train_part, held_out) = split_corpus(&tokens, TRAIN_FRACTION)?;
    let plan = rc.train_plan();
    let adam = AdamWConfig { weight_decay: plan.weight_decay, ..AdamWConfig::default() };

    let mut trainer = match &args.resume {
        Some(path) => {
            let (ck, _, model) = load_model(path)?;
            if model.config() != &config {
                return Err(ztt_core::Error::Config(format!(
                    "checkpoint {} holds a different model than {}",
                    path.display(),
                    args.config.display()
                ))
                .into());
            }
            let optimizer = ck
                .optimizer(&model, adam)
                .map_err(|source| CliError::Checkpoint { path: path.clone(), source })?;
            match optimizer {
                Some(opt) => Trainer::resume(model, opt, plan)?,
                None => Trainer::new(model, plan)?,
            }
        }
        None => Trainer::new(Model::init(config, rc.seed)?, plan)?,
    };

    let metrics_path = &args.metrics;
    let fresh = std::fs::metadata(metrics_path).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new().create(true).append(true).open(metrics_path).map_err(|e| CliError::io(metrics_path, e))?;
    let mut metrics = MetricsWriter::new(std::io::BufWriter::new(file), fresh).map_err(|e| CliError::io(metrics_path, e))?;

    let total = trainer.plan().steps;
    let result = trainer.run(train_part, |r| {
        let mut row = MetricsRow::new(r.step, "train");
        row.loss = Some(r.loss);
        row.ppl = Some(r.loss.exp());
        row.lr = Some(r.lr);
        let mut rows = vec![row];
        for c in ztt_core::train_eval::cycle_summary(&r.telemetry) {
            rows.push(MetricsRow {
                cycle: Some(c.cycle),
                zero_attn_mean: c.zero_attn_mean,
                gate_mean: c.gate_mean,
                ..MetricsRow::new(r.step, "train")
            });
        }
        for row in &rows {
            metrics.write(row).map_err(|e| ztt_core::Error::Data(format!("{}: {e}", metrics_path.display())))?;
        }
        if r.step % 100 == 0 || r.step + 1 == total {
            let _ = writeln!(stdout, "step {} loss {:.4} lr {:.3e}", r.step, r.loss, r.lr);
        }
        Ok(())
    });
    metrics.flush().map_err(|e| CliError::io(metrics_path, e))?;
    result?;

    let steps = trainer.steps_done();
    let (model, optimizer) = trainer.into_parts();
    write_checkpoint(&args.out, &Checkpoint::from_model(&rc, &model, Some(&optimizer)))?;
    writeln!(stdout, "wrote {} after {steps} steps", args.out.display()).map_err(io_err("stdout"))?;

    if held_out.len() > rc.t_max {
        let report = evaluate(&model, held_out, rc.t_max, rc.batch, &policy(rc.exit_threshold)?)?;
        for row in report.metrics_rows(steps) {
            metrics.write(&row).map_err(|e| CliError::io(metrics_path, e))?;
        }
        metrics.flush().map_err(|e| CliError::io(metrics_path, e))?;
        print_report(&report, false, stdout)?;
    }
    Ok(())
}

pub fn print_report(report: &EvalReport, per_exit: bool, out: &mut dyn Write) -> CliResult {
    let mut text = format!("tokens {}\n", report.tokens);
    if per_exit {
        text.push_str("exit loss ppl\n");
        for e in &report.exits {
            text.push_str(&format!("{} {:.6} {:.4}\n", e.exit, e.loss, e.ppl));
        }
    }
    let f = report.final_exit();
    text.push_str(&format!("final exit {} loss {:.6} ppl {:.4}\n", f.exit, f.loss, f.ppl));
    if let Some(a) = &report.adaptive {
        text.push_str(&format!(
            "adaptive P={} loss {:.6} ppl {:.4} avg_loop {:.4}\n",
            a.threshold, a.loss, a.ppl, a.avg_loop
        ));
    }
    for c in &report.cycles {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        text.push_str(&format!(
            "cycle {} zero_attn {} gate {}\n",
            c.cycle,
            show(c.zero_attn_mean),
            show(c.gate_mean)
        ));
    }
    out.write_all(text.as_bytes()).map_err(io_err("stdout"))
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub exit_threshold: Option<f64>,
    pub per_exit: bool,
}

pub fn eval(args: &EvalArgs, stdout: &mut dyn Write) -> CliResult {
    let (_, rc, model) = load_model(&args.ckpt)?;
    let tokens = load_corpus(&args.data)?;
    let report = evaluate(&model, &tokens, rc.t_max, rc.batch, &policy(args.exit_threshold)?)?;
    print_report(&report, args.per_exit, stdout)
}

pub struct GenerateArgs {
    pub ckpt: PathBuf,
    pub prompt: String,
    pub max_tokens: usize,
    pub exit_threshold: Option<f64>,
    pub temperature: Option<f64>,
    pub seed: u64,
}

pub fn generate_text(args: &GenerateArgs, stdout: &mut dyn Write) -> CliResult {
    let (_, _, model) = load_model(&args.ckpt)?;
    let prompt = encode(args.prompt.as_bytes(), true);
    let policy = policy(args.exit_threshold)?;
    let sampler = match args.temperature {
        Some(temperature) => Sampler::Temperature { temperature, seed: args.seed },
        None => Sampler::Greedy,
    };
    let out = generate(&prompt, args.max_tokens, &model, &policy, sampler)?;
    let mut text = decode(&out.ids);
    text.push(b'\n');
    if policy.is_adaptive() {
        let cycles: Vec<String> = out.cycles_used.iter().map(usize::to_string).collect();
        text.extend_from_slice(format!("cycles {}\n", cycles.join(" ")).as_bytes());
    }
    stdout.write_all(&text).map_err(io_err("stdout"))
}

pub struct SweepArgs {
    pub budget: usize,
    pub variants: Vec<Variant>,
    pub config: PathBuf,
    pub out: PathBuf,
}

pub fn sweep(args: &SweepArgs, stdout: &mut dyn Write) -> CliResult {
    let rc = RunConfig::load(&args.config)?;
    let base = rc.model_config()?;
    for &v in &args.variants {
        ztt_core::train_eval::layouts(args.budget, v)?;
    }
    let tokens = load_corpus(&rc.corpus_path)?;
    let (train_part, held_out) = split_corpus(&tokens, TRAIN_FRACTION)?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    let rows = budget_sweep::<f32>(args.budget, &args.variants, &base, &rc.train_plan(), train_part, held_out, |r| {
        let _ = writeln!(stdout, "{}", r.to_csv());
    })?;
    for r in &rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    std::fs::write(&args.out, csv).map_err(|e| CliError::io(&args.out, e))
}

pub struct RetrofitArgs {
    pub from: PathBuf,
    pub variant: Variant,
    pub loop_count: usize,
    pub out: PathBuf,
}

pub fn retrofit(args: &RetrofitArgs, stdout: &mut dyn Write) -> CliResult {
    let (_, rc, vanilla) = load_model(&args.from)?;
    let mut target_rc = rc.clone();
    target_rc.variant = args.variant;
    target_rc.all_layers = 3;
    target_rc.loop_count = args.loop_count;
    target_rc.use_gate = Toggle::Auto;
    target_rc.use_zero_token = Toggle::Auto;
    if vanilla.config().variant != Variant::Vanilla {
        return Err(ztt_core::Error::Conversion(format!(
            "{} holds a {} model; retrofit needs a vanilla source",
            args.from.display(),
            vanilla.config().variant
        ))
        .into());
    }
    if !args.variant.decouples_head_tail() {
        return Err(ztt_core::Error::Conversion(format!("retrofit targets HTC or ZTT, not {}", args.variant)).into());
    }
    let target = target_rc.model_config()?;
    let model = init_from_vanilla(&vanilla, target, rc.seed)?;
    write_checkpoint(&args.out, &Checkpoint::from_model(&target_rc, &model, None))?;
    let count = param_count(model.config())?.total;
    writeln!(stdout, "wrote {} ({} N={}, {count} parameters)", args.out.display(), args.variant, args.loop_count)
        .map_err(io_err("stdout"))
}
