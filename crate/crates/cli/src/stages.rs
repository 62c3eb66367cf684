//! One function per subcommand, plus the error type shared by all of them.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use talora::analysis::{
    efficiency_report, emit_report, layer_similarity, similarity_rows, write_efficiency, write_similarity_csv,
    EvalSummary, FewShotResult, SourceEval, BASE_METRICS_FILE, EVAL_FILE, FEWSHOT_PREFIX, REPORT_FILE,
    SIMILARITY_FILE, TALORA_METRICS_FILE,
};
use talora::backbone::{init_backbone, pretrain_backbone, BackboneWeights};
use talora::talora::{count_params, LoraFactors};
use talora::taskgen::TaskDataset;
use talora::training::artifacts::{
    push_adapter, push_backbone, push_base, push_factors, read_backbone, read_base, read_factors, read_theta0,
    task_ids,
};
use talora::training::metrics::write_rows;
use talora::training::{
    adapt_target, base_prompts, evaluate, init_factors, load_checkpoint, save_checkpoint, talora_prompts,
    train_base_prompts, train_talora, write_metrics_csv, BankSnapshot, Checkpoint,
};

use crate::config::RunConfig;

pub const BACKBONE_FILE: &str = "backbone.talr";
pub const PRETRAIN_METRICS_FILE: &str = "pretrain_metrics.csv";
pub const BASE_FILE: &str = "base.talr";
pub const SNAPSHOTS_FILE: &str = "base_snapshots.talr";
pub const TALORA_FILE: &str = "talora.talr";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Base,
    Talora,
    Adapt,
    Eval,
    Sim,
    Count,
    Report,
}

impl Stage {
    pub fn command(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain-backbone",
            Stage::Base => "train-base",
            Stage::Talora => "train-talora",
            Stage::Adapt => "adapt-target",
            Stage::Eval => "eval",
            Stage::Sim => "analyze-sim",
            Stage::Count => "count-params",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// A prerequisite file is missing; `requires` is the subcommand that
    /// writes it.
    StageOrder { requires: &'static str, file: PathBuf },
    /// Output exists and `--force` was not given.
    Exists(PathBuf),
    Config(String),
    Core(talora::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::StageOrder { .. } => "stage_order",
            CliError::Exists(_) => "output_exists",
            CliError::Config(_) => "config",
            CliError::Core(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::StageOrder { .. } | CliError::Config(_) => 2,
            CliError::Exists(_) | CliError::Core(_) => 1,
        }
    }

    /// Single-line JSON object for stderr.
    pub fn to_json_line(&self) -> String {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        if let CliError::StageOrder { requires, file } = self {
            v["requires"] = json!(requires);
            v["missing"] = json!(file.display().to_string());
        }
        v.to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::StageOrder { requires, file } => {
                write!(f, "{} not found; run `talora {requires}` first", file.display())
            }
            CliError::Exists(p) => write!(f, "{} already exists; pass --force to overwrite", p.display()),
            CliError::Config(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<talora::Error> for CliError {
    fn from(e: talora::Error) -> Self {
        match e {
            talora::Error::Argument(m) => CliError::Config(m),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub run_dir: &'a Path,
    pub force: bool,
}

type Out<T> = Result<T, CliError>;

impl Context<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    /// Path of an input written by `requires`.
    fn input(&self, name: &str, requires: Stage) -> Out<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::StageOrder {
                requires: requires.command(),
                file: p,
            })
        }
    }

    /// Path of an output, refusing to overwrite without `--force`.
    fn output(&self, name: &str) -> Out<PathBuf> {
        let p = self.path(name);
        if p.exists() && !self.force {
            return Err(CliError::Exists(p));
        }
        Ok(p)
    }

    fn checkpoint_config(&self, stage: Stage, ids: &[String]) -> Out<Value> {
        Ok(json!({
            "stage": stage.command(),
            "task_ids": ids,
            "run": serde_json::to_value(self.cfg)?,
        }))
    }

    fn save(&self, path: &Path, ckpt: &Checkpoint) -> Out<()> {
        save_checkpoint(path, ckpt, self.cfg.checkpoint_dtype)?;
        Ok(())
    }

    fn backbone(&self) -> Out<BackboneWeights> {
        let ckpt = load_checkpoint(&self.input(BACKBONE_FILE, Stage::Pretrain)?)?;
        Ok(read_backbone(&ckpt, &self.cfg.backbone)?)
    }

    fn sources(&self) -> Out<Vec<TaskDataset>> {
        Ok(self.cfg.suite.source_datasets(self.cfg.backbone.vocab_size)?)
    }

    fn gate_shape(&self) -> Vec<usize> {
        self.cfg.lora.gate_shape(&self.cfg.backbone)
    }

    /// `θ0` and the phase-2 factors.
    fn factors(&self) -> Out<(Vec<talora::numerics::Tensor>, LoraFactors)> {
        let ckpt = load_checkpoint(&self.input(TALORA_FILE, Stage::Talora)?)?;
        let theta0 = read_theta0(&ckpt, &self.cfg.backbone)?;
        let f = read_factors(&ckpt, &self.cfg.backbone, self.cfg.lora.rank, self.cfg.lora.scale, &self.gate_shape())?;
        Ok((theta0, f))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Out<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn run(stage: Stage, ctx: &Context<'_>, task: Option<&str>, shots: Option<usize>) -> Out<()> {
    match stage {
        Stage::Pretrain => pretrain(ctx),
        Stage::Base => base(ctx),
        Stage::Talora => talora(ctx),
        Stage::Adapt => adapt(ctx, task.expect("clap requires --task"), shots),
        Stage::Eval => eval(ctx),
        Stage::Sim => similarity(ctx),
        Stage::Count => count(ctx),
        Stage::Report => report(ctx),
    }
}

#[derive(Serialize)]
struct PretrainRow {
    step: usize,
    loss: f64,
}

fn pretrain(ctx: &Context<'_>) -> Out<()> {
    let out = ctx.output(BACKBONE_FILE)?;
    let cfg = ctx.cfg;
    let mixture = cfg.suite.pretraining_mixture(cfg.backbone.vocab_size)?;
    let mut pc = cfg.pretrain.clone();
    pc.seed = cfg.seed;
    let done = pretrain_backbone(init_backbone(&cfg.backbone, cfg.seed)?, &mixture, &pc)?;
    let rows: Vec<PretrainRow> = done.losses.iter().enumerate().map(|(step, &loss)| PretrainRow { step, loss }).collect();
    write_rows(&ctx.path(PRETRAIN_METRICS_FILE), &rows)?;
    let ids: Vec<String> = mixture.iter().map(|d| d.task_id.clone()).collect();
    let mut ckpt = Checkpoint::new(ctx.checkpoint_config(Stage::Pretrain, &ids)?);
    push_backbone(&mut ckpt, &done.weights);
    ctx.save(&out, &ckpt)?;
    if let (Some(first), Some(last)) = (done.losses.first(), done.losses.last()) {
        println!("pretraining loss {first:.4} -> {last:.4} over {} steps", done.losses.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn snapshot_name(step: usize, task: usize, layer: usize) -> String {
    format!("snap.s{step}.t{task}.l{layer}")
}

fn base(ctx: &Context<'_>) -> Out<()> {
    let out = ctx.output(BASE_FILE)?;
    let backbone = ctx.backbone()?;
    let cfg = ctx.cfg;
    let sources = ctx.sources()?;
    let base = train_base_prompts(&backbone, &sources, &cfg.lora, &cfg.train)?;
    write_metrics_csv(&ctx.path(BASE_METRICS_FILE), &base.metrics)?;

    let ids = base.bank.task_ids.clone();
    let mut ckpt = Checkpoint::new(ctx.checkpoint_config(Stage::Base, &ids)?);
    push_base(&mut ckpt, &base);
    ctx.save(&out, &ckpt)?;

    let steps: Vec<usize> = base.snapshots.iter().map(|s| s.step).collect();
    let mut snap_cfg = ctx.checkpoint_config(Stage::Base, &ids)?;
    snap_cfg["snapshot_steps"] = json!(steps);
    let mut snaps = Checkpoint::new(snap_cfg);
    for s in &base.snapshots {
        for (t, layers) in s.thetas.iter().enumerate() {
            for (l, theta) in layers.iter().enumerate() {
                snaps.push(snapshot_name(s.step, t, l), theta);
            }
        }
    }
    ctx.save(&ctx.path(SNAPSHOTS_FILE), &snaps)?;
    println!("wrote {} ({} tasks, {} snapshots)", out.display(), ids.len(), steps.len());
    Ok(())
}

fn talora(ctx: &Context<'_>) -> Out<()> {
    let base_path = ctx.input(BASE_FILE, Stage::Base)?;
    let out = ctx.output(TALORA_FILE)?;
    let backbone = ctx.backbone()?;
    let cfg = ctx.cfg;
    let (bank, _) = read_base(&load_checkpoint(&base_path)?, &cfg.backbone, &ctx.gate_shape())?;
    let sources = ctx.sources()?;
    let factors = init_factors(&cfg.backbone, &cfg.lora, bank.task_ids.clone(), &cfg.train)?;
    let run = train_talora(&backbone, &bank, factors, &sources, &cfg.train)?;
    write_metrics_csv(&ctx.path(TALORA_METRICS_FILE), &run.metrics)?;
    let mut ckpt = Checkpoint::new(ctx.checkpoint_config(Stage::Talora, &bank.task_ids)?);
    push_factors(&mut ckpt, &bank.theta0, &run.factors);
    ctx.save(&out, &ckpt)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(ctx: &Context<'_>) -> Out<()> {
    let base_path = ctx.input(BASE_FILE, Stage::Base)?;
    let (theta0, factors) = ctx.factors()?;
    let out = ctx.output(EVAL_FILE)?;
    let backbone = ctx.backbone()?;
    let cfg = &ctx.cfg.backbone;
    let (bank, gates) = read_base(&load_checkpoint(&base_path)?, cfg, &ctx.gate_shape())?;
    let mut unseen = Vec::new();
    for (i, d) in ctx.sources()?.iter().enumerate() {
        if bank.task_ids.get(i) != Some(&d.task_id) || factors.task_ids.get(i) != Some(&d.task_id) {
            return Err(CliError::config(format!(
                "source task {} does not match the trained checkpoints; rerun train-base",
                d.task_id
            )));
        }
        let pt = evaluate(&backbone, Some(&base_prompts(cfg, &bank.thetas[i], &gates[i])), &d.unseen)?;
        let ta_prompts = talora_prompts(cfg, &theta0, &factors, &factors.tasks[i], &factors.gates)?;
        let ta = evaluate(&backbone, Some(&ta_prompts), &d.unseen)?;
        println!(
            "{:<12} PT exact {:.3} token {:.3} | TA-LoRA exact {:.3} token {:.3}",
            d.task_id, pt.exact_match, pt.token_accuracy, ta.exact_match, ta.token_accuracy
        );
        unseen.push(SourceEval {
            task: d.task_id.clone(),
            prompt_tuning: pt,
            ta_lora: ta,
        });
    }
    write_json(
        &out,
        &EvalSummary {
            seed: ctx.cfg.seed,
            unseen_data: unseen,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn adapt(ctx: &Context<'_>, task: &str, shots: Option<usize>) -> Out<()> {
    let cfg = ctx.cfg;
    let k = shots.unwrap_or(cfg.train.shots);
    let Some(ti) = cfg.suite.targets.iter().position(|t| t == task) else {
        return Err(CliError::config(format!(
            "unknown target task {task:?}; configured targets: {}",
            cfg.suite.targets.join(", ")
        )));
    };
    let (theta0, factors) = ctx.factors()?;
    let out = ctx.output(&format!("{FEWSHOT_PREFIX}{task}-k{k}.json"))?;
    let backbone = ctx.backbone()?;
    let target = cfg.suite.target_datasets(cfg.backbone.vocab_size)?.swap_remove(ti);
    let run = adapt_target(&backbone, &theta0, &factors, &cfg.lora, &target, k, &cfg.train)?;
    let baseline = evaluate(&backbone, Some(&run.initial.prompts(&cfg.backbone, &theta0, &factors)?), &target.unseen)?;
    let adapted = evaluate(&backbone, Some(&run.adapter.prompts(&cfg.backbone, &theta0, &factors)?), &target.unseen)?;
    let result = FewShotResult {
        task: task.to_string(),
        k,
        seed: cfg.seed,
        baseline,
        adapted,
    };
    write_json(&out, &result)?;
    let mut ckpt = Checkpoint::new(ctx.checkpoint_config(Stage::Adapt, &[task.to_string()])?);
    push_adapter(&mut ckpt, &run.adapter);
    ctx.save(&ctx.path(&format!("adapter-{task}-k{k}.talr")), &ckpt)?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

fn similarity(ctx: &Context<'_>) -> Out<()> {
    let snaps = load_checkpoint(&ctx.input(SNAPSHOTS_FILE, Stage::Base)?)?;
    let out = ctx.output(SIMILARITY_FILE)?;
    let ids = task_ids(&snaps)?;
    let steps: Vec<usize> = snaps
        .config
        .get("snapshot_steps")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| CliError::config("snapshot checkpoint has no snapshot_steps list"))?;
    let layers = ctx.cfg.backbone.lora_layers;
    let mut bank = Vec::with_capacity(steps.len());
    for &step in &steps {
        let thetas = (0..ids.len())
            .map(|t| {
                (0..layers)
                    .map(|l| Ok(snaps.get(&snapshot_name(step, t, l))?.clone()))
                    .collect::<Out<Vec<_>>>()
            })
            .collect::<Out<Vec<_>>>()?;
        bank.push(BankSnapshot { step, thetas });
    }
    let lora_layers: Vec<usize> = (0..layers).collect();
    let traces = layer_similarity(&bank, &lora_layers)?;
    write_similarity_csv(&out, &similarity_rows(&traces, &ids))?;
    for tr in traces.iter().filter(|t| Some(&t.step) == steps.last()) {
        println!("final step, lora layer {}: mean |cosine| {:.4}", tr.layer, tr.mean_abs_cosine());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn count(ctx: &Context<'_>) -> Out<()> {
    let cfg = ctx.cfg;
    let c = count_params(&cfg.backbone, &cfg.lora, cfg.suite.sources.len())?;
    let rows = efficiency_report(&c);
    println!("{:<14} {:>10} {:>8} {:>10} {:>12}", "method", "per_task", "shared", "total", "per_task_%");
    for r in &rows {
        println!(
            "{:<14} {:>10} {:>8} {:>10} {:>12.4}",
            r.method,
            r.per_task,
            r.shared,
            r.total,
            100.0 * r.per_task_ratio
        );
    }
    write_efficiency(ctx.run_dir, &rows)?;
    write_json(&ctx.path("params.json"), &c)?;
    Ok(())
}

fn report(ctx: &Context<'_>) -> Out<()> {
    for (file, stage) in [
        (BASE_METRICS_FILE, Stage::Base),
        (TALORA_METRICS_FILE, Stage::Talora),
        (EVAL_FILE, Stage::Eval),
    ] {
        ctx.input(file, stage)?;
    }
    ctx.output(REPORT_FILE)?;
    let r = emit_report(ctx.run_dir)?;
    println!(
        "wrote {} ({} source tasks, {} few-shot results)",
        ctx.path(REPORT_FILE).display(),
        r.unseen_data.len(),
        r.unseen_task.len()
    );
    Ok(())
}
