//! Task-adaptive low-rank prompts.
//!
//! Per-task prompts are split into a shared mean and a residual. The residual
//! is replaced by `s · B · (u ⊗ v)`: `B` (n×r) is shared by all tasks and
//! trained slowly, `u` (r) and `v` (H) are per task and trained quickly. The
//! assembled prompt enters attention through a prefix branch scaled by
//! `tanh(g)`, with `g` starting at exactly zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::numerics::{matmul, Tape, Tensor, Var};

/// Std of the Gaussian used for prompts, `B`, `u` and `v`.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Fixed multiplier on the low-rank term.
    pub scale: f64,
    /// One gate per head instead of one per layer.
    pub per_head_gates: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            scale: 1.0,
            per_head_gates: false,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::arg("rank must be at least 1"));
        }
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::arg(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// Shape of one layer's gate tensor.
    pub fn gate_shape(&self, backbone: &BackboneConfig) -> Vec<usize> {
        if self.per_head_gates {
            vec![backbone.n_heads]
        } else {
            Vec::new()
        }
    }
}

/// Per-task prompts for each lora layer and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub task_ids: Vec<String>,
    /// `thetas[task][layer]`, each n×H.
    pub thetas: Vec<Vec<Tensor>>,
    /// Mean over tasks, per layer.
    pub theta0: Vec<Tensor>,
}

impl PromptBank {
    pub fn new(task_ids: Vec<String>, thetas: Vec<Vec<Tensor>>) -> Result<Self> {
        if task_ids.len() != thetas.len() {
            return Err(Error::arg(format!("{} task ids for {} prompt sets", task_ids.len(), thetas.len())));
        }
        let layers = thetas.first().map_or(0, Vec::len);
        if thetas.iter().any(|t| t.len() != layers) {
            return Err(Error::arg("tasks disagree on the number of lora layers"));
        }
        let mut theta0 = Vec::with_capacity(layers);
        for l in 0..layers {
            let per_task: Vec<Tensor> = thetas.iter().map(|t| t[l].clone()).collect();
            theta0.push(mean_decompose(&per_task)?.0);
        }
        Ok(Self { task_ids, thetas, theta0 })
    }

    pub fn n_tasks(&self) -> usize {
        self.thetas.len()
    }

    pub fn n_layers(&self) -> usize {
        self.theta0.len()
    }

    pub fn task_index(&self, id: &str) -> Option<usize> {
        self.task_ids.iter().position(|t| t == id)
    }

    /// Residual `θᵢ − θ0` for every task at one layer.
    pub fn residuals(&self, layer: usize) -> Result<Vec<Tensor>> {
        let per_task: Vec<Tensor> = self.thetas.iter().map(|t| t[layer].clone()).collect();
        Ok(mean_decompose(&per_task)?.1)
    }
}

/// Splits prompts into their mean and per-task residuals.
pub fn mean_decompose(thetas: &[Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
    if thetas.len() < 2 {
        return Err(Error::arg(format!("decomposition needs at least 2 tasks, got {}", thetas.len())));
    }
    let shape = thetas[0].shape();
    if let Some(bad) = thetas.iter().find(|t| t.shape() != shape) {
        return Err(Error::dim("mean_decompose", shape, bad.shape()));
    }
    let t = thetas.len() as f64;
    let mut mean = vec![0.0; thetas[0].numel()];
    for th in thetas {
        for (m, x) in mean.iter_mut().zip(th.data()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= t;
    }
    let theta0 = Tensor::new(shape.to_vec(), mean)?;
    let residuals = thetas
        .iter()
        .map(|th| {
            let d = th.data().iter().zip(theta0.data()).map(|(a, b)| a - b).collect();
            Tensor::new(shape.to_vec(), d)
        })
        .collect::<Result<_>>()?;
    Ok((theta0, residuals))
}

/// One task's fast vectors, per lora layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FastWeights {
    pub u: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl FastWeights {
    pub fn init(layers: usize, rank: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut u = Vec::with_capacity(layers);
        let mut v = Vec::with_capacity(layers);
        for _ in 0..layers {
            u.push(Tensor::randn(&[rank], INIT_STD, rng));
            v.push(Tensor::randn(&[dim], INIT_STD, rng));
        }
        Self { u, v }
    }
}

/// Shared slow weights, per-task fast weights and per-layer gates.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub task_ids: Vec<String>,
    /// `b[layer]`, n×r.
    pub b: Vec<Tensor>,
    pub tasks: Vec<FastWeights>,
    pub gates: Vec<Tensor>,
    pub scale: f64,
    pub rank: usize,
}

impl LoraFactors {
    /// Gaussian `B`, `u`, `v`; gates exactly zero.
    pub fn init(backbone: &BackboneConfig, lora: &LoraConfig, task_ids: Vec<String>, seed: u64) -> Result<Self> {
        backbone.validate()?;
        lora.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = backbone.lora_layers;
        let b = (0..layers)
            .map(|_| Tensor::randn(&[backbone.prompt_len, lora.rank], INIT_STD, &mut rng))
            .collect();
        let tasks = task_ids
            .iter()
            .map(|_| FastWeights::init(layers, lora.rank, backbone.model_dim, &mut rng))
            .collect();
        let gates = (0..layers).map(|_| Tensor::zeros(&lora.gate_shape(backbone))).collect();
        Ok(Self {
            task_ids,
            b,
            tasks,
            gates,
            scale: lora.scale,
            rank: lora.rank,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.b.len()
    }

    pub fn task_index(&self, id: &str) -> Option<usize> {
        self.task_ids.iter().position(|t| t == id)
    }

    /// Assembled prompts of one task, per layer.
    pub fn prompts(&self, theta0: &[Tensor], task: usize) -> Result<Vec<Tensor>> {
        self.prompts_with(theta0, &self.tasks[task])
    }

    pub fn prompts_with(&self, theta0: &[Tensor], fast: &FastWeights) -> Result<Vec<Tensor>> {
        if theta0.len() != self.b.len() || fast.u.len() != self.b.len() {
            return Err(Error::dim("prompt layers", &[theta0.len(), fast.u.len()], &[self.b.len()]));
        }
        (0..self.b.len())
            .map(|l| assemble_prompt(&theta0[l], &self.b[l], &fast.u[l], &fast.v[l], self.scale))
            .collect()
    }
}

fn check_assembly(theta0: &[usize], b: &[usize], u: &[usize], v: &[usize]) -> Result<()> {
    let ok = theta0.len() == 2
        && b.len() == 2
        && u.len() == 1
        && v.len() == 1
        && b[0] == theta0[0]
        && b[1] == u[0]
        && v[0] == theta0[1];
    if ok {
        Ok(())
    } else {
        Err(Error::dim("assemble_prompt", b, &[u.first().copied().unwrap_or(0), v.first().copied().unwrap_or(0)]))
    }
}

/// `θ0 + s · B · (u ⊗ v)`.
pub fn assemble_prompt(theta0: &Tensor, b: &Tensor, u: &Tensor, v: &Tensor, s: f64) -> Result<Tensor> {
    check_assembly(theta0.shape(), b.shape(), u.shape(), v.shape())?;
    let (r, h) = (u.numel(), v.numel());
    let mut a = Vec::with_capacity(r * h);
    for &x in u.data() {
        a.extend(v.data().iter().map(|&y| x * y));
    }
    let delta = matmul(b, &Tensor::new(vec![r, h], a)?)?;
    let data = theta0.data().iter().zip(delta.data()).map(|(t, d)| t + s * d).collect();
    Tensor::new(theta0.shape().to_vec(), data)
}

/// Differentiable [`assemble_prompt`].
pub fn assemble_prompt_tape(tape: &mut Tape<'_>, theta0: Var, b: Var, u: Var, v: Var, s: f64) -> Result<Var> {
    check_assembly(
        tape.value(theta0).shape(),
        tape.value(b).shape(),
        tape.value(u).shape(),
        tape.value(v).shape(),
    )?;
    let a = tape.outer(u, v)?;
    let ba = tape.matmul(b, a)?;
    let scaled = tape.scale(ba, s);
    tape.add(theta0, scaled)
}

/// Causal softmax attention of `q` (m×d) over `k`, `v` (m×d).
pub fn causal_attention(tape: &mut Tape<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
    let scores = tape.scaled_dot_product(q, k)?;
    let probs = tape.softmax_segments_causal(scores, &[])?;
    tape.matmul(probs, v)
}

/// Prefix branch of zero-initialized attention: `w · softmax(q·kpᵀ/√d) · vp`
/// where `w` is the single-element weight `tanh(g)`.
pub fn prefix_attention(tape: &mut Tape<'_>, q: Var, kp: Var, vp: Var, w: Var) -> Result<Var> {
    let scores = tape.scaled_dot_product(q, kp)?;
    let probs = tape.softmax_segments(scores, &[])?;
    let gated = tape.mul_scalar(probs, w)?;
    tape.matmul(gated, vp)
}

/// Attention of `q` (m×d) over `k`, `v` ((n+m)×d) whose first `n` rows are
/// prompt positions.
///
/// Prompt columns and original columns are normalized separately; the
/// prompt half is scaled by `tanh(g)` and the two halves are summed without
/// renormalizing. Original positions see only earlier original positions.
pub fn zero_init_attention(tape: &mut Tape<'_>, q: Var, k: Var, v: Var, prefix_len: usize, g: Var) -> Result<Var> {
    let m = tape.value(q).dims2()?.0;
    let (rows, _) = tape.value(k).dims2()?;
    if rows != prefix_len + m || tape.value(v).dims2()?.0 != rows {
        return Err(Error::dim("zero_init_attention mask", &[m, prefix_len + m], tape.value(k).shape()));
    }
    if tape.value(g).numel() != 1 {
        return Err(Error::dim("zero_init_attention gate", &[], tape.value(g).shape()));
    }
    if prefix_len == 0 {
        if tape.value(g).item() != 0.0 {
            return Err(Error::arg("nonzero gate with an empty prefix"));
        }
        return causal_attention(tape, q, k, v);
    }
    let kp = tape.slice_rows(k, 0, prefix_len)?;
    let vp = tape.slice_rows(v, 0, prefix_len)?;
    let kx = tape.slice_rows(k, prefix_len, rows)?;
    let vx = tape.slice_rows(v, prefix_len, rows)?;
    let original = causal_attention(tape, q, kx, vx)?;
    let w = tape.tanh(g);
    let prefix = prefix_attention(tape, q, kp, vp, w)?;
    tape.add(original, prefix)
}

/// `Σ_l Σ_{i≠j} ‖(uᵢ·uⱼ) vᵢvⱼᵀ − I‖_F²` in closed form.
///
/// `u[task][layer]` and `v[task][layer]` index the fast weights.
pub fn orthogonality_penalty_tape(tape: &mut Tape<'_>, u: &[Vec<Var>], v: &[Vec<Var>]) -> Result<Var> {
    let t = u.len();
    if t < 2 || v.len() != t {
        return Err(Error::arg(format!("orthogonality penalty needs at least 2 tasks, got {t}")));
    }
    let layers = u[0].len();
    if u.iter().chain(v).any(|x| x.len() != layers) || layers == 0 {
        return Err(Error::arg("tasks disagree on the number of lora layers"));
    }
    let mut terms = Vec::with_capacity(layers * t * (t - 1));
    for l in 0..layers {
        let h = tape.value(v[0][l]).numel() as f64;
        let sq: Vec<Var> = (0..t).map(|i| tape.dot(v[i][l], v[i][l])).collect::<Result<_>>()?;
        // The summand is symmetric in (i, j), so each unordered pair counts twice.
        for i in 0..t {
            for j in i + 1..t {
                let c = tape.dot(u[i][l], u[j][l])?;
                let d = tape.dot(v[i][l], v[j][l])?;
                let c2 = tape.mul(c, c)?;
                let norms = tape.mul(sq[i], sq[j])?;
                let quad = tape.mul(c2, norms)?;
                let cross = tape.mul(c, d)?;
                let cross = tape.scale(cross, -2.0);
                let pair = tape.add(quad, cross)?;
                terms.push(tape.affine(pair, 2.0, 2.0 * h));
            }
        }
    }
    let mut total = terms[0];
    for &term in &terms[1..] {
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Value of the orthogonality penalty for a set of fast weights.
pub fn orthogonality_penalty(tasks: &[FastWeights]) -> Result<f64> {
    let mut tape = Tape::new();
    let u: Vec<Vec<Var>> = tasks.iter().map(|f| f.u.iter().map(|x| tape.constant(x)).collect()).collect();
    let v: Vec<Vec<Var>> = tasks.iter().map(|f| f.v.iter().map(|x| tape.constant(x)).collect()).collect();
    let p = orthogonality_penalty_tape(&mut tape, &u, &v)?;
    Ok(tape.value(p).item())
}

/// Trainable-parameter accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub tasks: usize,
    pub per_task_fast: usize,
    pub shared_slow: usize,
    pub prompt_mean: usize,
    pub gates: usize,
    pub backbone_frozen: usize,
    /// `shared_slow + gates + tasks · per_task_fast`.
    pub trainable: usize,
    /// `trainable / backbone_frozen`.
    pub ratio: f64,
    /// Per-task prompt size of vanilla prompt tuning, `L · n · H`.
    pub vanilla_pt_per_task: usize,
}

pub fn count_params(backbone: &BackboneConfig, lora: &LoraConfig, tasks: usize) -> Result<ParamCount> {
    backbone.validate()?;
    lora.validate()?;
    let (l, n, h, r) = (backbone.lora_layers, backbone.prompt_len, backbone.model_dim, lora.rank);
    let per_task_fast = l * (r + h);
    let shared_slow = l * n * r;
    let gates = l * lora.gate_shape(backbone).iter().product::<usize>();
    let trainable = shared_slow + gates + tasks * per_task_fast;
    let backbone_frozen = backbone.param_count();
    Ok(ParamCount {
        tasks,
        per_task_fast,
        shared_slow,
        prompt_mean: l * n * h,
        gates,
        backbone_frozen,
        trainable,
        ratio: trainable as f64 / backbone_frozen as f64,
        vanilla_pt_per_task: l * n * h,
    })
}
