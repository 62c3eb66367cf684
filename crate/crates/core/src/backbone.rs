//! Small pre-norm decoder-only transformer.
//!
//! The final `lora_layers` blocks accept an `n×H` prompt that is prepended to
//! the key/value inputs only; queries always come from real positions and
//! prompts carry no position embedding. Batches are ragged: the rows of all
//! sequences are stacked into one matrix and attention runs per sequence.

use std::ops::Range;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::taskgen::{Sample, TaskDataset};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub prompt_len: usize,
    /// Number of final layers that take prompts.
    pub lora_layers: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            model_dim: 64,
            n_heads: 4,
            n_layers: 8,
            max_seq_len: 64,
            prompt_len: 20,
            lora_layers: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if self.vocab_size == 0 || self.model_dim == 0 || self.max_seq_len == 0 {
            return bad(format!("vocab_size, model_dim and max_seq_len must be positive: {self:?}"));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return bad(format!("model_dim {} not divisible by n_heads {}", self.model_dim, self.n_heads));
        }
        if self.lora_layers == 0 || self.lora_layers > self.n_layers {
            return bad(format!("lora_layers {} outside 1..={}", self.lora_layers, self.n_layers));
        }
        if self.prompt_len == 0 {
            return bad("prompt_len must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    /// Index of the first layer that takes a prompt.
    pub fn first_lora_layer(&self) -> usize {
        self.n_layers - self.lora_layers
    }

    pub fn lora_range(&self) -> Range<usize> {
        self.first_lora_layer()..self.n_layers
    }

    /// Parameter count implied by the tensor shapes.
    pub fn param_count(&self) -> usize {
        let (v, h, t) = (self.vocab_size, self.model_dim, self.max_seq_len);
        let ffn = 4 * h;
        let per_layer = 2 * h // ln1
            + 4 * (h * h + h) // q, k, v, o
            + 2 * h // ln2
            + (h * ffn + ffn) + (ffn * h + h);
        v * h + t * h + self.n_layers * per_layer + 2 * h + (h * v + v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const LAYER_TENSORS: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2.gamma", "ln2.beta", "w1", "b1",
    "w2", "b2",
];

impl LayerWeights {
    fn init(h: usize, rng: &mut ChaCha8Rng) -> Self {
        let f = 4 * h;
        Self {
            ln1_g: Tensor::full(&[h], 1.0),
            ln1_b: Tensor::zeros(&[h]),
            wq: Tensor::randn(&[h, h], INIT_STD, rng),
            bq: Tensor::zeros(&[h]),
            wk: Tensor::randn(&[h, h], INIT_STD, rng),
            bk: Tensor::zeros(&[h]),
            wv: Tensor::randn(&[h, h], INIT_STD, rng),
            bv: Tensor::zeros(&[h]),
            wo: Tensor::randn(&[h, h], INIT_STD, rng),
            bo: Tensor::zeros(&[h]),
            ln2_g: Tensor::full(&[h], 1.0),
            ln2_b: Tensor::zeros(&[h]),
            w1: Tensor::randn(&[h, f], INIT_STD, rng),
            b1: Tensor::zeros(&[f]),
            w2: Tensor::randn(&[f, h], INIT_STD, rng),
            b2: Tensor::zeros(&[h]),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    frozen: bool,
}

/// Weights bound to a tape as leaves, in canonical order.
#[derive(Debug, Clone)]
pub struct Bound {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<[Var; 16]>,
    lnf_g: Var,
    lnf_b: Var,
    head_w: Var,
    head_b: Var,
}

impl Bound {
    /// Vars in the same order as [`BackboneWeights::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.extend([self.lnf_g, self.lnf_b, self.head_w, self.head_b]);
        out
    }
}

/// A prompt and its gate on the tape, for one lora layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerPrompt {
    pub layer: usize,
    /// n×H.
    pub prompt: Var,
    /// Raw gate `g`, shape `[]` or `[n_heads]`.
    pub gate: Var,
}

/// Tensor-valued counterpart of [`LayerPrompt`].
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTensors {
    pub layer: usize,
    pub prompt: Tensor,
    pub gate: Tensor,
}

/// Draws weights from the fixed Gaussian init.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, h) = (config.vocab_size, config.model_dim);
    let tok_emb = Tensor::randn(&[v, h], INIT_STD, &mut rng);
    let pos_emb = Tensor::randn(&[config.max_seq_len, h], INIT_STD, &mut rng);
    let layers = (0..config.n_layers).map(|_| LayerWeights::init(h, &mut rng)).collect();
    let head_w = Tensor::randn(&[h, v], INIT_STD, &mut rng);
    Ok(BackboneWeights {
        config: config.clone(),
        tok_emb,
        pos_emb,
        layers,
        lnf_g: Tensor::full(&[h], 1.0),
        lnf_b: Tensor::zeros(&[h]),
        head_w,
        head_b: Tensor::zeros(&[v]),
        frozen: false,
    })
}

impl BackboneWeights {
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        for t in self.all_mut() {
            t.clear_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("backbone.tok_emb".to_string(), &self.tok_emb), ("backbone.pos_emb".into(), &self.pos_emb)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("backbone.l{l}.{name}"), t));
            }
        }
        out.push(("backbone.lnf.gamma".into(), &self.lnf_g));
        out.push(("backbone.lnf.beta".into(), &self.lnf_b));
        out.push(("backbone.head.w".into(), &self.head_w));
        out.push(("backbone.head.b".into(), &self.head_b));
        out
    }

    /// Rebuilds weights from named tensors; the result is frozen.
    pub fn from_named(config: &BackboneConfig, mut get: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        let mut w = init_backbone(config, 0)?;
        let names: Vec<String> = w.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(w.all_mut()) {
            let t = get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::dim("backbone tensor", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        w.frozen = true;
        Ok(w)
    }

    fn all_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head_w, &mut self.head_b]);
        out
    }

    /// Mutable access for training; fails once frozen.
    pub fn params_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        if self.frozen {
            return Err(Error::state("backbone weights are frozen"));
        }
        Ok(self.all_mut())
    }

    /// Puts every weight on the tape. Trainable binding of frozen weights is
    /// a state error.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Result<Bound> {
        if trainable && self.frozen {
            return Err(Error::state("cannot attach gradients to frozen backbone weights"));
        }
        let mut put = |t: &'a Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let tok_emb = put(&self.tok_emb);
        let pos_emb = put(&self.pos_emb);
        let layers = self.layers.iter().map(|l| l.tensors().map(&mut put)).collect();
        Ok(Bound {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: put(&self.lnf_g),
            lnf_b: put(&self.lnf_b),
            head_w: put(&self.head_w),
            head_b: put(&self.head_b),
        })
    }

    fn check_sequences(&self, seqs: &[&[usize]]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        for s in seqs {
            if s.is_empty() || s.len() > self.config.max_seq_len {
                return Err(Error::arg(format!(
                    "sequence length {} outside 1..={}",
                    s.len(),
                    self.config.max_seq_len
                )));
            }
            if let Some(&t) = s.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::arg(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
            }
        }
        Ok(())
    }

    /// Token plus position embeddings, rows of all sequences stacked.
    pub fn embed(&self, tape: &mut Tape<'_>, b: &Bound, seqs: &[&[usize]]) -> Result<Var> {
        self.check_sequences(seqs)?;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let pos: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let te = tape.gather_rows(b.tok_emb, &ids)?;
        let pe = tape.gather_rows(b.pos_emb, &pos)?;
        tape.add(te, pe)
    }

    fn check_prompts(&self, tape: &Tape<'_>, prompts: &[LayerPrompt]) -> Result<()> {
        let cfg = &self.config;
        let range = cfg.lora_range();
        for p in prompts {
            if !range.contains(&p.layer) {
                return Err(Error::arg(format!(
                    "prompt for layer {} but only layers {range:?} take prompts",
                    p.layer
                )));
            }
            let shape = tape.value(p.prompt).shape();
            if shape != [cfg.prompt_len, cfg.model_dim] {
                return Err(Error::dim("layer prompt", &[cfg.prompt_len, cfg.model_dim], shape));
            }
            let g = tape.value(p.gate).shape();
            if !(g.is_empty() || g == [cfg.n_heads]) {
                return Err(Error::dim("gate", &[cfg.n_heads], g));
            }
        }
        for l in range {
            let n = prompts.iter().filter(|p| p.layer == l).count();
            if n != 1 {
                return Err(Error::arg(format!("layer {l} needs exactly one prompt, got {n}")));
            }
        }
        Ok(())
    }

    fn block(
        &self,
        tape: &mut Tape<'_>,
        w: &[Var; 16],
        h: Var,
        lens: &[usize],
        prompt: Option<&LayerPrompt>,
    ) -> Result<Var> {
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] = *w;
        let cfg = &self.config;

        let x = tape.layer_norm(h, ln1_g, ln1_b, LN_EPS)?;
        let proj = |tape: &mut Tape<'_>, x: Var, w: Var, b: Var| -> Result<Var> {
            let y = tape.matmul(x, w)?;
            tape.add_broadcast(y, b)
        };
        let q = proj(tape, x, wq, bq)?;
        let k = proj(tape, x, wk, bk)?;
        let v = proj(tape, x, wv, bv)?;
        let prefix = match prompt {
            Some(p) => {
                let pk = proj(tape, p.prompt, wk, bk)?;
                let pv = proj(tape, p.prompt, wv, bv)?;
                let weight = tape.tanh(p.gate);
                Some((pk, pv, weight))
            }
            None => None,
        };

        let mut attn = tape.causal_heads(q, k, v, lens, cfg.n_heads)?;
        if let Some((pk, pv, weight)) = prefix {
            // The prefix branch is row-wise, so it runs on all stacked rows at once.
            let gated = tape.prefix_heads(q, pk, pv, weight, cfg.n_heads)?;
            attn = tape.add(attn, gated)?;
        }
        let o = proj(tape, attn, wo, bo)?;
        let h = tape.add(h, o)?;

        let x = tape.layer_norm(h, ln2_g, ln2_b, LN_EPS)?;
        let f = proj(tape, x, w1, b1)?;
        let f = tape.gelu(f);
        let f = proj(tape, f, w2, b2)?;
        tape.add(h, f)
    }

    /// Runs blocks `layers` on stacked hidden rows. `prompts` must cover every
    /// lora layer inside `layers` when given.
    pub fn run_layers(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        mut h: Var,
        lens: &[usize],
        layers: Range<usize>,
        prompts: Option<&[LayerPrompt]>,
    ) -> Result<Var> {
        if let Some(p) = prompts {
            self.check_prompts(tape, p)?;
        }
        let rows: usize = lens.iter().sum();
        if tape.value(h).shape() != [rows, self.config.model_dim] {
            return Err(Error::dim("hidden rows", &[rows, self.config.model_dim], tape.value(h).shape()));
        }
        for l in layers {
            let prompt = prompts.and_then(|ps| ps.iter().find(|p| p.layer == l));
            h = self.block(tape, &b.layers[l], h, lens, prompt)?;
        }
        Ok(h)
    }

    /// Final norm and output projection.
    pub fn head(&self, tape: &mut Tape<'_>, b: &Bound, h: Var) -> Result<Var> {
        let x = tape.layer_norm(h, b.lnf_g, b.lnf_b, LN_EPS)?;
        let y = tape.matmul(x, b.head_w)?;
        tape.add_broadcast(y, b.head_b)
    }

    /// Logits for stacked rows of all sequences, `(Σ len)×V`.
    pub fn logits_tape(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        seqs: &[&[usize]],
        prompts: Option<&[LayerPrompt]>,
    ) -> Result<Var> {
        let h = self.embed(tape, b, seqs)?;
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let h = self.run_layers(tape, b, h, &lens, 0..self.config.n_layers, prompts)?;
        self.head(tape, b, h)
    }

    /// Logits of shape `batch×len×V`; all sequences must share one length.
    pub fn forward(&self, batch: &[Vec<usize>], prompts: Option<&[PromptTensors]>) -> Result<Tensor> {
        let len = batch.first().map_or(0, Vec::len);
        if batch.iter().any(|s| s.len() != len) {
            return Err(Error::arg("forward needs equal-length sequences; use logits_tape for ragged batches"));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let layer_prompts: Option<Vec<LayerPrompt>> = prompts.map(|ps| {
            ps.iter()
                .map(|p| LayerPrompt {
                    layer: p.layer,
                    prompt: tape.constant(&p.prompt),
                    gate: tape.constant(&p.gate),
                })
                .collect()
        });
        let seqs: Vec<&[usize]> = batch.iter().map(Vec::as_slice).collect();
        let logits = self.logits_tape(&mut tape, &b, &seqs, layer_prompts.as_deref())?;
        let out = tape.value(logits).clone();
        out.reshape(vec![batch.len(), len, self.config.vocab_size])
    }

    /// Hidden rows entering `layer` for one sequence; independent of prompts
    /// when `layer` is at most the first lora layer.
    pub fn hidden_before(&self, seq: &[usize], layer: usize) -> Result<Tensor> {
        if layer > self.config.first_lora_layer() {
            return Err(Error::arg(format!("hidden state before layer {layer} depends on prompts")));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let h = self.embed(&mut tape, &b, &[seq])?;
        let h = self.run_layers(&mut tape, &b, h, &[seq.len()], 0..layer, None)?;
        Ok(tape.value(h).detached())
    }
}

/// Stacked-row targets of a batch of samples: `(row, token)` pairs.
pub fn stacked_targets(samples: &[&Sample]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut off = 0;
    for s in samples {
        out.extend(s.target_positions().into_iter().map(|(p, t)| (off + p, t)));
        off += s.input.len() + s.target.len();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Give every mixture task its own trainable prompt at the prompted
    /// layers; each sample runs with its task's prompt. The prompts are
    /// discarded afterwards; the backbone keeps the habit of reading its task
    /// from the prefix.
    pub task_prompts: bool,
    /// Linear warmup length; the learning rate then follows a cosine decay to
    /// a tenth of `lr`.
    pub warmup: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            lr: 3e-3,
            seed: 7,
            task_prompts: true,
            warmup: 100,
            clip: 1.0,
        }
    }
}

impl PretrainConfig {
    /// Learning rate used at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let frac = ((step - self.warmup) as f64 / span).min(1.0);
        self.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

/// Std of the per-task prompts used while pretraining; matches the unit
/// scale of normalized hidden rows.
pub const PRETRAIN_PROMPT_STD: f64 = 1.0;
/// Initial gate of the pretraining prompts.
pub const PRETRAIN_GATE: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub weights: BackboneWeights,
    /// Mean target-token cross-entropy of every step's batch, before its update.
    pub losses: Vec<f64>,
    /// Per step, the mean target-token cross-entropy of each mixture task
    /// that had samples in the batch.
    pub task_losses: Vec<Vec<Option<f64>>>,
    /// Final per-task prompts, `prompts[task]`, when `task_prompts` was on.
    pub prompts: Vec<Vec<PromptTensors>>,
}

/// Trains all weights on next-token cross-entropy over the train splits of
/// `mixture`, then freezes them. Each batch draws its samples from tasks
/// chosen uniformly at random.
pub fn pretrain_backbone(mut weights: BackboneWeights, mixture: &[TaskDataset], cfg: &PretrainConfig) -> Result<Pretrained> {
    let usable: Vec<usize> = (0..mixture.len()).filter(|&i| !mixture[i].train.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::arg("pretraining mixture is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) || !cfg.lr.is_finite() || !(cfg.clip >= 0.0) {
        return Err(Error::arg(format!("bad pretraining settings {cfg:?}")));
    }
    let bc = weights.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prompts: Vec<Vec<PromptTensors>> = if cfg.task_prompts {
        mixture
            .iter()
            .map(|_| {
                bc.lora_range()
                    .map(|layer| PromptTensors {
                        layer,
                        prompt: Tensor::randn(&[bc.prompt_len, bc.model_dim], PRETRAIN_PROMPT_STD, &mut rng),
                        gate: Tensor::scalar(PRETRAIN_GATE),
                    })
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut opt = Adam::new(cfg.lr, AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut task_losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut groups: Vec<Vec<&Sample>> = vec![Vec::new(); mixture.len()];
        for _ in 0..cfg.batch_size {
            let t = *usable.choose(&mut rng).expect("non-empty");
            groups[t].push(mixture[t].train.choose(&mut rng).expect("non-empty"));
        }
        // Without task prompts the groups only affect the sample order.
        let grads = {
            let mut tape = Tape::new();
            let b = weights.bind(&mut tape, true)?;
            let pv: Vec<Vec<LayerPrompt>> = prompts
                .iter()
                .map(|ps| {
                    ps.iter()
                        .map(|p| LayerPrompt {
                            layer: p.layer,
                            prompt: tape.param(&p.prompt),
                            gate: tape.param(&p.gate),
                        })
                        .collect()
                })
                .collect();
            let mut total = None;
            let mut count = 0;
            let mut per_task = vec![None; mixture.len()];
            for (t, group) in groups.iter().enumerate().filter(|(_, g)| !g.is_empty()) {
                let tokens: Vec<Vec<usize>> = group.iter().map(|s| s.tokens()).collect();
                let seqs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
                let targets = stacked_targets(group);
                let lp = pv.get(t).map(Vec::as_slice);
                let logits = weights.logits_tape(&mut tape, &b, &seqs, lp)?;
                let ce = tape.cross_entropy_sum(logits, &targets)?;
                per_task[t] = Some(tape.value(ce).item() / targets.len() as f64);
                count += targets.len();
                total = Some(match total {
                    Some(acc) => tape.add(acc, ce)?,
                    None => ce,
                });
            }
            let loss = tape.scale(total.expect("batch is non-empty"), 1.0 / count as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training(format!("pretraining loss is {value} at step {step}")));
            }
            losses.push(value);
            task_losses.push(per_task);
            let grads = tape.backward(loss)?;
            let vars = b.all().into_iter().chain(pv.iter().flatten().flat_map(|p| [p.prompt, p.gate]));
            vars.map(|v| grads.get(v)).collect::<Vec<_>>()
        };
        opt.set_lr(cfg.lr_at(step));
        let mut params = weights.params_mut()?;
        params.extend(prompts.iter_mut().flatten().flat_map(|p| [&mut p.prompt, &mut p.gate]));
        Adam::zero_grad(&mut params);
        for (p, g) in params.iter_mut().zip(&grads) {
            p.accumulate_grad(g.data())?;
        }
        if cfg.clip > 0.0 {
            Adam::clip_grad_norm(&mut params, cfg.clip);
        }
        opt.step(&mut params)?;
    }
    weights.freeze();
    Ok(Pretrained {
        weights,
        losses,
        task_losses,
        prompts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{generate_task, TaskKind, TaskSpec};
    use rand::Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 11,
            model_dim: 8,
            n_heads: 2,
            n_layers: 3,
            max_seq_len: 12,
            prompt_len: 3,
            lora_layers: 2,
        }
    }

    fn perturbed(cfg: &BackboneConfig, seed: u64) -> BackboneWeights {
        // Non-trivial LN and bias values so the oracle exercises every tensor.
        let mut w = init_backbone(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in w.params_mut().unwrap() {
            for x in t.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        w
    }

    // Loop-based reference forward for one sequence.

    fn ln(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * g.data()[i] + b.data()[i])
            .collect()
    }

    fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (rows, cols) = w.dims2().unwrap();
        (0..cols).map(|c| (0..rows).map(|r| x[r] * w.at2(r, c)).sum::<f64>() + b.data()[c]).collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn softmax(xs: &[f64]) -> Vec<f64> {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn oracle(w: &BackboneWeights, seq: &[usize], prompts: &[(usize, Tensor, f64)]) -> Vec<Vec<f64>> {
        let cfg = &w.config;
        let (hdim, d) = (cfg.model_dim, cfg.head_dim());
        let mut h: Vec<Vec<f64>> = seq
            .iter()
            .enumerate()
            .map(|(p, &t)| (0..hdim).map(|c| w.tok_emb.at2(t, c) + w.pos_emb.at2(p, c)).collect())
            .collect();
        for (l, lw) in w.layers.iter().enumerate() {
            let x: Vec<Vec<f64>> = h.iter().map(|r| ln(r, &lw.ln1_g, &lw.ln1_b)).collect();
            let q: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &lw.wq, &lw.bq)).collect();
            let k: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &lw.wk, &lw.bk)).collect();
            let v: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &lw.wv, &lw.bv)).collect();
            let prompt = prompts.iter().find(|p| p.0 == l);
            let (pk, pv): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match prompt {
                Some((_, p, _)) => (0..p.dims2().unwrap().0)
                    .map(|i| (affine(p.row(i), &lw.wk, &lw.bk), affine(p.row(i), &lw.wv, &lw.bv)))
                    .unzip(),
                None => (vec![], vec![]),
            };
            let tanh_g = prompt.map_or(0.0, |p| p.2.tanh());
            let mut attn = vec![vec![0.0; hdim]; seq.len()];
            for i in 0..seq.len() {
                for hd in 0..cfg.n_heads {
                    let cs = hd * d..(hd + 1) * d;
                    let dot = |a: &[f64], b: &[f64]| cs.clone().map(|c| a[c] * b[c]).sum::<f64>() / (d as f64).sqrt();
                    let pf = softmax(&(0..=i).map(|j| dot(&q[i], &k[j])).collect::<Vec<_>>());
                    for c in cs.clone() {
                        attn[i][c] = pf.iter().enumerate().map(|(j, p)| p * v[j][c]).sum();
                    }
                    if !pk.is_empty() {
                        let pa = softmax(&pk.iter().map(|kr| dot(&q[i], kr)).collect::<Vec<_>>());
                        for c in cs.clone() {
                            attn[i][c] += tanh_g * pa.iter().enumerate().map(|(j, p)| p * pv[j][c]).sum::<f64>();
                        }
                    }
                }
            }
            for i in 0..seq.len() {
                let o = affine(&attn[i], &lw.wo, &lw.bo);
                for c in 0..hdim {
                    h[i][c] += o[c];
                }
                let x2 = ln(&h[i], &lw.ln2_g, &lw.ln2_b);
                let f: Vec<f64> = affine(&x2, &lw.w1, &lw.b1).into_iter().map(gelu).collect();
                let f = affine(&f, &lw.w2, &lw.b2);
                for c in 0..hdim {
                    h[i][c] += f[c];
                }
            }
        }
        h.iter().map(|r| affine(&ln(r, &w.lnf_g, &w.lnf_b), &w.head_w, &w.head_b)).collect()
    }

    fn random_prompts(cfg: &BackboneConfig, rng: &mut ChaCha8Rng, gate: impl Fn(usize) -> f64) -> Vec<PromptTensors> {
        cfg.lora_range()
            .map(|l| PromptTensors {
                layer: l,
                prompt: Tensor::randn(&[cfg.prompt_len, cfg.model_dim], 1.0, rng),
                gate: Tensor::scalar(gate(l)),
            })
            .collect()
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let cfg = small();
        let w = perturbed(&cfg, 1);
        let seqs = vec![vec![1, 5, 3, 9, 0, 2], vec![10, 4, 4, 1, 7, 6]];
        let got = w.forward(&seqs, None).unwrap();
        for (b, s) in seqs.iter().enumerate() {
            let want = oracle(&w, s, &[]);
            for (p, row) in want.iter().enumerate() {
                for (c, x) in row.iter().enumerate() {
                    let y = got.data()[(b * s.len() + p) * cfg.vocab_size + c];
                    assert!((x - y).abs() < 1e-12, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn prompted_forward_matches_loop_oracle() {
        let cfg = small();
        let w = perturbed(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prompts = random_prompts(&cfg, &mut rng, |l| 0.3 * l as f64 - 0.2);
        let seq = vec![3, 1, 4, 1, 5];
        let got = w.forward(&[seq.clone()], Some(&prompts)).unwrap();
        let p: Vec<(usize, Tensor, f64)> = prompts.iter().map(|p| (p.layer, p.prompt.clone(), p.gate.item())).collect();
        let want = oracle(&w, &seq, &p);
        let flat: Vec<f64> = want.into_iter().flatten().collect();
        let diff = got.data().iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn ragged_batch_matches_single_sequences() {
        let cfg = small();
        let w = perturbed(&cfg, 4);
        let seqs: Vec<&[usize]> = vec![&[1, 2, 3], &[4, 5, 6, 7, 8], &[9]];
        let mut tape = Tape::new();
        let b = w.bind(&mut tape, false).unwrap();
        let all = w.logits_tape(&mut tape, &b, &seqs, None).unwrap();
        let all = tape.value(all).clone();
        let mut row = 0;
        for s in &seqs {
            let single = w.forward(&[s.to_vec()], None).unwrap();
            for (k, x) in single.data().iter().enumerate() {
                assert!((all.data()[row * cfg.vocab_size + k] - x).abs() < 1e-12);
            }
            row += s.len();
        }
    }

    #[test]
    fn logits_shape() {
        let w = init_backbone(&BackboneConfig::default(), 0).unwrap();
        let out = w.forward(&[vec![5; 8], vec![6; 8]], None).unwrap();
        assert_eq!(out.shape(), &[2, 8, 32]);
    }

    #[test]
    fn zero_gates_are_transparent() {
        let cfg = small();
        let w = perturbed(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prompts = random_prompts(&cfg, &mut rng, |_| 0.0);
        let seqs = vec![vec![1, 2, 3, 4], vec![8, 7, 6, 5]];
        let plain = w.forward(&seqs, None).unwrap();
        let gated = w.forward(&seqs, Some(&prompts)).unwrap();
        assert!(plain.max_abs_diff(&gated) < 1e-10);
        let open = random_prompts(&cfg, &mut rng, |_| 1.0);
        assert!(plain.max_abs_diff(&w.forward(&seqs, Some(&open)).unwrap()) > 1e-6);
    }

    #[test]
    fn causality_under_perturbation() {
        let cfg = small();
        let w = perturbed(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prompts = random_prompts(&cfg, &mut rng, |_| 0.8);
        let base: Vec<usize> = (0..10).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        let v = cfg.vocab_size;
        for p in [None, Some(prompts.as_slice())] {
            let a = w.forward(&[base.clone()], p).unwrap();
            for j in 0..base.len() {
                let mut changed = base.clone();
                changed[j] = (changed[j] + 1) % v;
                let b = w.forward(&[changed], p).unwrap();
                let before = j * v;
                assert!(a.data()[..before] == b.data()[..before], "position {j} leaked backwards");
                assert!(a.data()[before..].iter().zip(&b.data()[before..]).any(|(x, y)| x != y));
            }
        }
    }

    #[test]
    fn prompt_validation() {
        let cfg = small();
        let w = init_backbone(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seqs = vec![vec![1, 2]];
        let mut ps = random_prompts(&cfg, &mut rng, |_| 0.0);
        ps[0].layer = 0;
        assert!(matches!(w.forward(&seqs, Some(&ps)), Err(Error::Argument(_))));
        let mut ps = random_prompts(&cfg, &mut rng, |_| 0.0);
        ps.pop();
        assert!(matches!(w.forward(&seqs, Some(&ps)), Err(Error::Argument(_))));
        let mut ps = random_prompts(&cfg, &mut rng, |_| 0.0);
        ps[0].prompt = Tensor::zeros(&[cfg.prompt_len + 1, cfg.model_dim]);
        assert!(matches!(w.forward(&seqs, Some(&ps)), Err(Error::Dimension { .. })));
        assert!(w.forward(&[vec![0; cfg.max_seq_len + 1]], None).is_err());
        assert!(w.forward(&[vec![cfg.vocab_size]], None).is_err());
    }

    #[test]
    fn per_head_gates_open_heads_independently() {
        let cfg = small();
        let w = perturbed(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut prompts = random_prompts(&cfg, &mut rng, |_| 0.0);
        let seqs = vec![vec![1, 2, 3]];
        let plain = w.forward(&seqs, None).unwrap();
        for p in &mut prompts {
            p.gate = Tensor::zeros(&[cfg.n_heads]);
        }
        assert!(plain.max_abs_diff(&w.forward(&seqs, Some(&prompts)).unwrap()) < 1e-10);
        prompts[0].gate = Tensor::vector(vec![0.0, 0.9]);
        assert!(plain.max_abs_diff(&w.forward(&seqs, Some(&prompts)).unwrap()) > 1e-6);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = BackboneConfig::default();
        let a = init_backbone(&cfg, 11).unwrap();
        assert_eq!(a, init_backbone(&cfg, 11).unwrap());
        assert_ne!(a, init_backbone(&cfg, 12).unwrap());
        assert!(a.head_b.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn param_count_matches_hand_formula() {
        let cfg = BackboneConfig::default();
        let w = init_backbone(&cfg, 0).unwrap();
        // tok 32·64 + pos 64·64 + 8·(12·64² + 13·64) + lnf 2·64 + head 64·32 + 32
        let hand = 2048 + 4096 + 8 * (12 * 4096 + 13 * 64) + 128 + 2048 + 32;
        assert_eq!(hand, 408_224);
        assert_eq!(w.param_count(), hand);
        assert_eq!(cfg.param_count(), hand);
    }

    #[test]
    fn config_validation() {
        let ok = BackboneConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            BackboneConfig { n_heads: 3, ..ok.clone() },
            BackboneConfig { lora_layers: 0, ..ok.clone() },
            BackboneConfig { lora_layers: 9, ..ok.clone() },
            BackboneConfig { prompt_len: 0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn cached_prefix_matches_full_forward() {
        let cfg = small();
        let w = perturbed(&cfg, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let prompts = random_prompts(&cfg, &mut rng, |_| 0.5);
        let seq = vec![2, 7, 1, 8];
        let full = w.forward(&[seq.clone()], Some(&prompts)).unwrap();
        let cached = w.hidden_before(&seq, cfg.first_lora_layer()).unwrap();
        let mut tape = Tape::new();
        let b = w.bind(&mut tape, false).unwrap();
        let h = tape.constant(&cached);
        let lp: Vec<LayerPrompt> = prompts
            .iter()
            .map(|p| LayerPrompt {
                layer: p.layer,
                prompt: tape.constant(&p.prompt),
                gate: tape.constant(&p.gate),
            })
            .collect();
        let h = w.run_layers(&mut tape, &b, h, &[seq.len()], cfg.lora_range(), Some(&lp)).unwrap();
        let logits = w.head(&mut tape, &b, h).unwrap();
        assert_eq!(tape.value(logits).data(), full.data());
        assert!(w.hidden_before(&seq, cfg.first_lora_layer() + 1).is_err());
    }

    fn tiny_mixture() -> Vec<TaskDataset> {
        [TaskKind::Copy, TaskKind::Reverse]
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                let spec = TaskSpec::with_vocab(k, 11, (5..11).collect(), 2, 4).unwrap();
                generate_task(&spec, i as u64, 60).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_step_pretraining_keeps_weights_and_freezes() {
        let cfg = small();
        let w = init_backbone(&cfg, 1).unwrap();
        let before = w.clone();
        let cfg_p = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        let mut out = pretrain_backbone(w, &tiny_mixture(), &cfg_p).unwrap();
        assert!(out.losses.is_empty());
        assert_eq!(out.weights.named_tensors(), before.named_tensors());
        assert!(out.weights.is_frozen());
        assert!(matches!(out.weights.params_mut(), Err(Error::State(_))));
        let mut tape = Tape::new();
        assert!(matches!(out.weights.bind(&mut tape, true), Err(Error::State(_))));
    }

    #[test]
    fn pretraining_reduces_loss() {
        let cfg = small();
        let cfg_p = PretrainConfig {
            steps: 60,
            batch_size: 8,
            lr: 1e-2,
            seed: 0,
            task_prompts: true,
            ..PretrainConfig::default()
        };
        let out = pretrain_backbone(init_backbone(&cfg, 2).unwrap(), &tiny_mixture(), &cfg_p).unwrap();
        let head: f64 = out.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = out.losses[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
        assert!(matches!(
            pretrain_backbone(init_backbone(&cfg, 2).unwrap(), &[], &cfg_p),
            Err(Error::Argument(_))
        ));
    }
}
