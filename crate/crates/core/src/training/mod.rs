//! The optimization pipeline: per-task base prompts, joint low-rank
//! training with fast and slow learning rates, few-shot target adaptation,
//! evaluation and checkpoints.
//!
//! All three phases share one trick: the backbone is frozen and layers below
//! the first lora layer never see a prompt, so their output is computed once
//! per sample and cached. Only the final lora layers run per step.

pub mod artifacts;
pub mod checkpoint;
pub mod metrics;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{stacked_targets, BackboneConfig, BackboneWeights, Bound, LayerPrompt, PromptTensors};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Gradients, Tape, Tensor, Var};
use crate::talora::{
    assemble_prompt_tape, orthogonality_penalty_tape, FastWeights, LoraConfig, LoraFactors, PromptBank, INIT_STD,
};
use crate::taskgen::{Sample, TaskDataset};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Dtype};
pub use metrics::{read_metrics_csv, write_metrics_csv, MetricRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Phase 1 prompt learning rate.
    pub lr_prompt: f64,
    /// Learning rate of the shared `B`.
    pub lr_slow: f64,
    /// Learning rate of `u`, `v` and gates.
    pub lr_fast: f64,
    /// Learning rate of phase 3; `u`, `v` and the fresh gate.
    pub lr_adapt: f64,
    /// Weight of the orthogonality penalty.
    pub lambda: f64,
    pub base_steps: usize,
    pub talora_steps: usize,
    pub adapt_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Few-shot sample count for phase 3.
    pub shots: usize,
    /// Prompt snapshots for similarity traces are taken every this many steps.
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_prompt: 5e-3,
            lr_slow: 1e-4,
            lr_fast: 1e-3,
            lr_adapt: 1e-3,
            lambda: 1e-3,
            base_steps: 1000,
            talora_steps: 2000,
            adapt_steps: 300,
            batch_size: 16,
            seed: 42,
            adam: AdamConfig::default(),
            shots: 32,
            snapshot_every: 100,
        }
    }
}

impl TrainConfig {
    /// Learning rates may be zero, which freezes their group exactly.
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_prompt", self.lr_prompt),
            ("lr_slow", self.lr_slow),
            ("lr_fast", self.lr_fast),
            ("lr_adapt", self.lr_adapt),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::arg(format!("{name} must be finite and non-negative, got {lr}")));
            }
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::arg(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be at least 1"));
        }
        if self.snapshot_every == 0 {
            return Err(Error::arg("snapshot_every must be at least 1"));
        }
        Ok(())
    }
}

// Seed streams, so phases and tasks never share random draws.
const STREAM_BASE_INIT: u64 = 10;
const STREAM_BASE_BATCH: u64 = 11;
const STREAM_FACTORS: u64 = 12;
const STREAM_TALORA_BATCH: u64 = 13;
const STREAM_ADAPT_INIT: u64 = 14;
const STREAM_ADAPT_BATCH: u64 = 15;
const STREAM_SHOTS: u64 = 16;

/// Samples with their hidden rows at the input of the first lora layer.
#[derive(Debug, Clone)]
pub struct CachedSplit {
    pub samples: Vec<Sample>,
    hidden: Vec<Tensor>,
}

impl CachedSplit {
    pub fn new(backbone: &BackboneWeights, samples: &[Sample]) -> Result<Self> {
        let first = backbone.config.first_lora_layer();
        let mut hidden = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let tokens: Vec<Vec<usize>> = chunk.iter().map(Sample::tokens).collect();
            let seqs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::new();
            let b = backbone.bind(&mut tape, false)?;
            let h = backbone.embed(&mut tape, &b, &seqs)?;
            let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
            let h = backbone.run_layers(&mut tape, &b, h, &lens, 0..first, None)?;
            let rows = tape.value(h);
            let dim = backbone.config.model_dim;
            let mut off = 0;
            for &len in &lens {
                hidden.push(Tensor::new(vec![len, dim], rows.data()[off * dim..(off + len) * dim].to_vec())?);
                off += len;
            }
        }
        Ok(Self {
            samples: samples.to_vec(),
            hidden,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let rows: Vec<f64> = idx.iter().flat_map(|&i| self.hidden[i].data().iter().copied()).collect();
        let lens: Vec<usize> = idx.iter().map(|&i| self.hidden[i].shape()[0]).collect();
        let dim = self.hidden.first().map_or(0, |h| h.shape()[1]);
        let picked: Vec<&Sample> = idx.iter().map(|&i| &self.samples[i]).collect();
        Ok(Batch {
            hidden: Tensor::new(vec![lens.iter().sum(), dim], rows)?,
            lens,
            targets: stacked_targets(&picked),
        })
    }

    fn sample_batch(&self, size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let all: Vec<usize> = (0..self.len()).collect();
        let idx: Vec<usize> = (0..size).map(|_| *all.choose(rng).expect("non-empty split")).collect();
        self.batch(&idx)
    }
}

/// Stacked cached rows of several samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub hidden: Tensor,
    pub lens: Vec<usize>,
    pub targets: Vec<(usize, usize)>,
}

/// Logits of the lora layers plus head for a cached batch.
fn prompted_logits(
    tape: &mut Tape<'_>,
    backbone: &BackboneWeights,
    bound: &Bound,
    h: Var,
    lens: &[usize],
    prompts: &[LayerPrompt],
) -> Result<Var> {
    let h = backbone.run_layers(tape, bound, h, lens, backbone.config.lora_range(), Some(prompts))?;
    backbone.head(tape, bound, h)
}

fn mean_abs_tanh(gates: &[Tensor]) -> f64 {
    let all: Vec<f64> = gates.iter().flat_map(|g| g.data().iter().map(|x| x.tanh().abs())).collect();
    all.iter().sum::<f64>() / all.len().max(1) as f64
}

fn require_frozen(backbone: &BackboneWeights) -> Result<()> {
    if backbone.is_frozen() {
        Ok(())
    } else {
        Err(Error::state("backbone must be pretrained and frozen before prompt training"))
    }
}

fn apply_grads(grads: &Gradients, vars: &[Var], params: &mut [&mut Tensor]) -> Result<()> {
    Adam::zero_grad(params);
    for (v, p) in vars.iter().zip(params.iter_mut()) {
        grads.accumulate_into(*v, p)?;
    }
    Ok(())
}

/// Prompt tensors for a plain per-task prompt.
pub fn base_prompts(cfg: &BackboneConfig, thetas: &[Tensor], gates: &[Tensor]) -> Vec<PromptTensors> {
    cfg.lora_range()
        .zip(thetas.iter().zip(gates))
        .map(|(layer, (p, g))| PromptTensors {
            layer,
            prompt: p.clone(),
            gate: g.clone(),
        })
        .collect()
}

/// Assembled prompt tensors for one set of fast weights.
pub fn talora_prompts(
    cfg: &BackboneConfig,
    theta0: &[Tensor],
    factors: &LoraFactors,
    fast: &FastWeights,
    gates: &[Tensor],
) -> Result<Vec<PromptTensors>> {
    let prompts = factors.prompts_with(theta0, fast)?;
    Ok(base_prompts(cfg, &prompts, gates))
}

/// Prompts of every source task at one point of phase 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSnapshot {
    pub step: usize,
    /// `thetas[task][layer]`.
    pub thetas: Vec<Vec<Tensor>>,
}

/// Result of phase 1.
#[derive(Debug, Clone)]
pub struct BaseModels {
    pub bank: PromptBank,
    /// Each task's own gates, `gates[task][layer]`.
    pub gates: Vec<Vec<Tensor>>,
    pub metrics: Vec<MetricRow>,
    pub snapshots: Vec<BankSnapshot>,
}

impl BaseModels {
    pub fn prompts(&self, cfg: &BackboneConfig, task: usize) -> Vec<PromptTensors> {
        base_prompts(cfg, &self.bank.thetas[task], &self.gates[task])
    }
}

fn snapshot_due(step: usize, total: usize, every: usize) -> bool {
    step % every == 0 || step == total
}

/// Phase 1: vanilla prompt tuning of every source task in isolation, then
/// the mean decomposition of the learned prompts.
pub fn train_base_prompts(
    backbone: &BackboneWeights,
    tasks: &[TaskDataset],
    lora: &LoraConfig,
    cfg: &TrainConfig,
) -> Result<BaseModels> {
    require_frozen(backbone)?;
    cfg.validate()?;
    if tasks.len() < 2 {
        return Err(Error::arg(format!("phase 1 needs at least 2 source tasks, got {}", tasks.len())));
    }
    let bcfg = &backbone.config;
    let mut all_thetas = Vec::with_capacity(tasks.len());
    let mut all_gates = Vec::with_capacity(tasks.len());
    let mut metrics = Vec::new();
    // per_task_snaps[task] = (step, thetas)
    let mut per_task_snaps: Vec<Vec<(usize, Vec<Tensor>)>> = Vec::with_capacity(tasks.len());

    for (ti, task) in tasks.iter().enumerate() {
        if task.train.is_empty() {
            return Err(Error::arg(format!("task {} has no training samples", task.task_id)));
        }
        let cache = CachedSplit::new(backbone, &task.train)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_BASE_INIT, ti as u64));
        let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_BASE_BATCH, ti as u64));
        let mut thetas: Vec<Tensor> = (0..bcfg.lora_layers)
            .map(|_| Tensor::randn(&[bcfg.prompt_len, bcfg.model_dim], INIT_STD, &mut init_rng))
            .collect();
        let mut gates: Vec<Tensor> = (0..bcfg.lora_layers).map(|_| Tensor::zeros(&lora.gate_shape(bcfg))).collect();
        let mut opt = Adam::new(cfg.lr_prompt, cfg.adam);
        let mut snaps = Vec::new();

        for step in 0..cfg.base_steps {
            if snapshot_due(step, cfg.base_steps, cfg.snapshot_every) {
                snaps.push((step, thetas.clone()));
            }
            let batch = cache.sample_batch(cfg.batch_size, &mut batch_rng)?;
            let (loss, grads, vars) = {
                let mut tape = Tape::new();
                let bound = backbone.bind(&mut tape, false)?;
                let h = tape.constant(&batch.hidden);
                let prompts: Vec<LayerPrompt> = bcfg
                    .lora_range()
                    .zip(thetas.iter().zip(&gates))
                    .map(|(layer, (p, g))| LayerPrompt {
                        layer,
                        prompt: tape.param(p),
                        gate: tape.param(g),
                    })
                    .collect();
                let logits = prompted_logits(&mut tape, backbone, &bound, h, &batch.lens, &prompts)?;
                let loss = tape.cross_entropy_from_logits(logits, &batch.targets)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Training(format!("task {}: loss is {value} at step {step}", task.task_id)));
                }
                let vars: Vec<Var> = prompts.iter().map(|p| p.prompt).chain(prompts.iter().map(|p| p.gate)).collect();
                (value, tape.backward(loss)?, vars)
            };
            metrics.push(MetricRow {
                step,
                task: task.task_id.clone(),
                loss,
                penalty: 0.0,
                mean_abs_tanh_gate: mean_abs_tanh(&gates),
            });
            let mut params: Vec<&mut Tensor> = thetas.iter_mut().chain(gates.iter_mut()).collect();
            apply_grads(&grads, &vars, &mut params)?;
            opt.step(&mut params)?;
        }
        if snapshot_due(cfg.base_steps, cfg.base_steps, cfg.snapshot_every) || cfg.base_steps == 0 {
            snaps.push((cfg.base_steps, thetas.clone()));
        }
        per_task_snaps.push(snaps);
        all_thetas.push(thetas);
        all_gates.push(gates);
    }

    let steps: Vec<usize> = per_task_snaps[0].iter().map(|(s, _)| *s).collect();
    let snapshots = steps
        .iter()
        .enumerate()
        .map(|(k, &step)| BankSnapshot {
            step,
            thetas: per_task_snaps.iter().map(|s| s[k].1.clone()).collect(),
        })
        .collect();
    let ids = tasks.iter().map(|t| t.task_id.clone()).collect();
    Ok(BaseModels {
        bank: PromptBank::new(ids, all_thetas)?,
        gates: all_gates,
        metrics,
        snapshots,
    })
}

/// Fresh phase-2 factors seeded from the run seed.
pub fn init_factors(backbone: &BackboneConfig, lora: &LoraConfig, task_ids: Vec<String>, cfg: &TrainConfig) -> Result<LoraFactors> {
    LoraFactors::init(backbone, lora, task_ids, derive_seed(cfg.seed, STREAM_FACTORS, 0))
}

/// Result of phase 2.
#[derive(Debug, Clone)]
pub struct TaloraRun {
    pub factors: LoraFactors,
    pub metrics: Vec<MetricRow>,
}

/// Phase 2: joint training of `B`, every task's `u`, `v` and the shared
/// gates on cross-entropy plus `λ ·` the orthogonality penalty. Batches come
/// from one task at a time, round-robin. `θ0` and the backbone stay fixed.
pub fn train_talora(
    backbone: &BackboneWeights,
    bank: &PromptBank,
    mut factors: LoraFactors,
    tasks: &[TaskDataset],
    cfg: &TrainConfig,
) -> Result<TaloraRun> {
    require_frozen(backbone)?;
    cfg.validate()?;
    let bcfg = &backbone.config;
    let t = tasks.len();
    if t < 2 || factors.tasks.len() != t || bank.task_ids.len() != t {
        return Err(Error::arg(format!(
            "phase 2 needs matching tasks: {t} datasets, {} factor sets, {} bank entries",
            factors.tasks.len(),
            bank.task_ids.len()
        )));
    }
    for (i, task) in tasks.iter().enumerate() {
        if bank.task_ids[i] != task.task_id || factors.task_ids[i] != task.task_id {
            return Err(Error::arg(format!("task order mismatch at {i}: {}", task.task_id)));
        }
    }
    let expected = [bcfg.prompt_len, bcfg.model_dim];
    if bank.theta0.len() != bcfg.lora_layers || factors.n_layers() != bcfg.lora_layers {
        return Err(Error::dim("lora layers", &[bcfg.lora_layers], &[bank.theta0.len(), factors.n_layers()]));
    }
    for l in 0..bcfg.lora_layers {
        if bank.theta0[l].shape() != expected {
            return Err(Error::dim("theta0", &expected, bank.theta0[l].shape()));
        }
        if factors.b[l].shape() != [bcfg.prompt_len, factors.rank] {
            return Err(Error::dim("B", &[bcfg.prompt_len, factors.rank], factors.b[l].shape()));
        }
    }

    let caches = tasks.iter().map(|d| CachedSplit::new(backbone, &d.train)).collect::<Result<Vec<_>>>()?;
    if caches.iter().any(CachedSplit::is_empty) {
        return Err(Error::arg("every source task needs training samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_TALORA_BATCH, 0));
    let mut slow = Adam::new(cfg.lr_slow, cfg.adam);
    let mut fast = Adam::new(cfg.lr_fast, cfg.adam);
    let mut metrics = Vec::with_capacity(cfg.talora_steps);

    for step in 0..cfg.talora_steps {
        let ti = step % t;
        let batch = caches[ti].sample_batch(cfg.batch_size, &mut rng)?;
        let (loss, penalty, grads, b_vars, fast_vars) = {
            let mut tape = Tape::new();
            let bound = backbone.bind(&mut tape, false)?;
            let h = tape.constant(&batch.hidden);
            let theta0: Vec<Var> = bank.theta0.iter().map(|x| tape.constant(x)).collect();
            let b: Vec<Var> = factors.b.iter().map(|x| tape.param(x)).collect();
            let u: Vec<Vec<Var>> = factors.tasks.iter().map(|f| f.u.iter().map(|x| tape.param(x)).collect()).collect();
            let v: Vec<Vec<Var>> = factors.tasks.iter().map(|f| f.v.iter().map(|x| tape.param(x)).collect()).collect();
            let g: Vec<Var> = factors.gates.iter().map(|x| tape.param(x)).collect();
            let mut prompts = Vec::with_capacity(bcfg.lora_layers);
            for (l, layer) in bcfg.lora_range().enumerate() {
                let p = assemble_prompt_tape(&mut tape, theta0[l], b[l], u[ti][l], v[ti][l], factors.scale)?;
                prompts.push(LayerPrompt {
                    layer,
                    prompt: p,
                    gate: g[l],
                });
            }
            let logits = prompted_logits(&mut tape, backbone, &bound, h, &batch.lens, &prompts)?;
            let ce = tape.cross_entropy_from_logits(logits, &batch.targets)?;
            let pen = orthogonality_penalty_tape(&mut tape, &u, &v)?;
            let weighted = tape.scale(pen, cfg.lambda);
            let total = tape.add(ce, weighted)?;
            let (loss, penalty) = (tape.value(total).item(), tape.value(pen).item());
            if !loss.is_finite() {
                return Err(Error::Training(format!("phase 2 loss is {loss} at step {step}")));
            }
            let fast_vars: Vec<Var> = u.iter().chain(&v).flatten().copied().chain(g.iter().copied()).collect();
            (loss, penalty, tape.backward(total)?, b, fast_vars)
        };
        metrics.push(MetricRow {
            step,
            task: tasks[ti].task_id.clone(),
            loss,
            penalty,
            mean_abs_tanh_gate: mean_abs_tanh(&factors.gates),
        });
        let mut slow_params: Vec<&mut Tensor> = factors.b.iter_mut().collect();
        apply_grads(&grads, &b_vars, &mut slow_params)?;
        slow.step(&mut slow_params)?;
        let LoraFactors { tasks: fw, gates, .. } = &mut factors;
        let (us, vs): (Vec<_>, Vec<_>) = fw.iter_mut().map(|f| (&mut f.u, &mut f.v)).unzip();
        let mut fast_params: Vec<&mut Tensor> = us
            .into_iter()
            .flat_map(|x| x.iter_mut())
            .chain(vs.into_iter().flat_map(|x| x.iter_mut()))
            .chain(gates.iter_mut())
            .collect();
        apply_grads(&grads, &fast_vars, &mut fast_params)?;
        fast.step(&mut fast_params)?;
    }
    Ok(TaloraRun { factors, metrics })
}

/// Fast weights and gates learned for a target task.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAdapter {
    pub task_id: String,
    pub fast: FastWeights,
    pub gates: Vec<Tensor>,
}

impl TargetAdapter {
    pub fn prompts(&self, cfg: &BackboneConfig, theta0: &[Tensor], factors: &LoraFactors) -> Result<Vec<PromptTensors>> {
        talora_prompts(cfg, theta0, factors, &self.fast, &self.gates)
    }
}

/// Result of phase 3.
#[derive(Debug, Clone)]
pub struct AdaptRun {
    pub adapter: TargetAdapter,
    /// The same fast weights before any training; gates are zero.
    pub initial: TargetAdapter,
    pub shots: Vec<Sample>,
    pub metrics: Vec<MetricRow>,
}

/// Phase 3: fits a new `u`, `v` and a fresh gate to `k` labeled samples of
/// a target task, reusing the frozen `θ0` and `B`.
pub fn adapt_target(
    backbone: &BackboneWeights,
    theta0: &[Tensor],
    factors: &LoraFactors,
    lora: &LoraConfig,
    target: &TaskDataset,
    k: usize,
    cfg: &TrainConfig,
) -> Result<AdaptRun> {
    require_frozen(backbone)?;
    cfg.validate()?;
    if k == 0 {
        return Err(Error::arg("few-shot adaptation needs k >= 1"));
    }
    if k > target.train.len() {
        return Err(Error::arg(format!(
            "k = {k} exceeds the {} available samples of {}",
            target.train.len(),
            target.task_id
        )));
    }
    let bcfg = &backbone.config;
    let mut order: Vec<usize> = (0..target.train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHOTS, k as u64)));
    let shots: Vec<Sample> = order[..k].iter().map(|&i| target.train[i].clone()).collect();
    let cache = CachedSplit::new(backbone, &shots)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_ADAPT_INIT, 0));
    let mut fast = FastWeights::init(bcfg.lora_layers, factors.rank, bcfg.model_dim, &mut init_rng);
    let mut gates: Vec<Tensor> = (0..bcfg.lora_layers).map(|_| Tensor::zeros(&lora.gate_shape(bcfg))).collect();
    let initial = TargetAdapter {
        task_id: target.task_id.clone(),
        fast: fast.clone(),
        gates: gates.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_ADAPT_BATCH, k as u64));
    let mut opt = Adam::new(cfg.lr_adapt, cfg.adam);
    let mut metrics = Vec::with_capacity(cfg.adapt_steps);
    let batch_size = cfg.batch_size.min(k);

    for step in 0..cfg.adapt_steps {
        let batch = cache.sample_batch(batch_size, &mut rng)?;
        let (loss, grads, vars) = {
            let mut tape = Tape::new();
            let bound = backbone.bind(&mut tape, false)?;
            let h = tape.constant(&batch.hidden);
            let u: Vec<Var> = fast.u.iter().map(|x| tape.param(x)).collect();
            let v: Vec<Var> = fast.v.iter().map(|x| tape.param(x)).collect();
            let g: Vec<Var> = gates.iter().map(|x| tape.param(x)).collect();
            let mut prompts = Vec::with_capacity(bcfg.lora_layers);
            for (l, layer) in bcfg.lora_range().enumerate() {
                let t0 = tape.constant(&theta0[l]);
                let b = tape.constant(&factors.b[l]);
                let p = assemble_prompt_tape(&mut tape, t0, b, u[l], v[l], factors.scale)?;
                prompts.push(LayerPrompt {
                    layer,
                    prompt: p,
                    gate: g[l],
                });
            }
            let logits = prompted_logits(&mut tape, backbone, &bound, h, &batch.lens, &prompts)?;
            let loss = tape.cross_entropy_from_logits(logits, &batch.targets)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training(format!("task {}: loss is {value} at step {step}", target.task_id)));
            }
            let vars: Vec<Var> = u.into_iter().chain(v).chain(g).collect();
            (value, tape.backward(loss)?, vars)
        };
        metrics.push(MetricRow {
            step,
            task: target.task_id.clone(),
            loss,
            penalty: 0.0,
            mean_abs_tanh_gate: mean_abs_tanh(&gates),
        });
        let mut params: Vec<&mut Tensor> = fast.u.iter_mut().chain(fast.v.iter_mut()).chain(gates.iter_mut()).collect();
        apply_grads(&grads, &vars, &mut params)?;
        opt.step(&mut params)?;
    }
    Ok(AdaptRun {
        adapter: TargetAdapter {
            task_id: target.task_id.clone(),
            fast,
            gates,
        },
        initial,
        shots,
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fraction of samples whose every target token is predicted.
    pub exact_match: f64,
    pub token_accuracy: f64,
    /// Mean target-token cross-entropy.
    pub loss: f64,
    pub samples: usize,
}

/// Scores stacked logits rows against `(row, token)` targets grouped per
/// sample. Predictions are the argmax of each target row given the gold
/// prefix, so a sample is an exact match exactly when greedy decoding would
/// reproduce its whole target.
pub fn score_logits(logits: &Tensor, per_sample: &[Vec<(usize, usize)>]) -> Result<Metrics> {
    let (rows, cols) = logits.dims2()?;
    let (mut exact, mut correct, mut tokens, mut nll) = (0usize, 0usize, 0usize, 0.0);
    for targets in per_sample {
        let mut all = true;
        for &(r, t) in targets {
            if r >= rows || t >= cols {
                return Err(Error::arg(format!("target ({r}, {t}) outside logits {rows}x{cols}")));
            }
            let row = logits.row(r);
            let mut best = 0;
            for (c, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = c;
                }
            }
            let max = row[best];
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - row[t];
            tokens += 1;
            if best == t {
                correct += 1;
            } else {
                all = false;
            }
        }
        exact += all as usize;
    }
    if per_sample.is_empty() || tokens == 0 {
        return Err(Error::arg("nothing to score"));
    }
    let m = Metrics {
        exact_match: exact as f64 / per_sample.len() as f64,
        token_accuracy: correct as f64 / tokens as f64,
        loss: nll / tokens as f64,
        samples: per_sample.len(),
    };
    if !m.loss.is_finite() {
        return Err(Error::Evaluation(format!("evaluation loss is {}", m.loss)));
    }
    Ok(m)
}

/// Evaluates a split with optional prompts. Samples are processed in fixed
/// chunks and reduced in order, so results are deterministic.
pub fn evaluate(backbone: &BackboneWeights, prompts: Option<&[PromptTensors]>, split: &[Sample]) -> Result<Metrics> {
    if split.is_empty() {
        return Err(Error::arg("cannot evaluate an empty split"));
    }
    let mut per_sample = Vec::with_capacity(split.len());
    let mut rows: Vec<f64> = Vec::new();
    let mut base = 0;
    for chunk in split.chunks(64) {
        let tokens: Vec<Vec<usize>> = chunk.iter().map(Sample::tokens).collect();
        let seqs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape, false)?;
        let lp: Option<Vec<LayerPrompt>> = prompts.map(|ps| {
            ps.iter()
                .map(|p| LayerPrompt {
                    layer: p.layer,
                    prompt: tape.constant(&p.prompt),
                    gate: tape.constant(&p.gate),
                })
                .collect()
        });
        let logits = backbone.logits_tape(&mut tape, &bound, &seqs, lp.as_deref())?;
        rows.extend_from_slice(tape.value(logits).data());
        for s in chunk {
            per_sample.push(s.target_positions().into_iter().map(|(p, t)| (base + p, t)).collect());
            base += s.input.len() + s.target.len();
        }
    }
    let logits = Tensor::new(vec![base, backbone.config.vocab_size], rows)?;
    score_logits(&logits, &per_sample)
}

#[cfg(test)]
mod tests;
