//! Synthetic sequence-to-token tasks, dataset balancing and JSONL ingestion.
//!
//! Every synthetic task shares one input distribution (uniform tokens from a
//! common vocabulary subset, uniform length), so a model cannot tell tasks
//! apart from the input alone.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
/// Separates a sample's input from its target.
pub const SEP: usize = 1;
pub const UNK: usize = 2;
pub const EVEN: usize = 3;
pub const ODD: usize = 4;
/// Lowest id available to data tokens.
pub const FIRST_DATA_TOKEN: usize = 5;

pub const DEFAULT_MIN_LEN: usize = 4;
pub const DEFAULT_MAX_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    SortAscending,
    SortDescending,
    /// Adds `k` to every token, modulo the vocabulary size.
    TokenShift(i64),
    /// Single label: [`EVEN`] or [`ODD`] occurrences of the given token.
    CountParity(usize),
}

/// Default counted token for `count-parity` when the name omits one.
pub const DEFAULT_PARITY_TOKEN: usize = FIRST_DATA_TOKEN;

impl TaskKind {
    pub fn name(&self) -> String {
        match self {
            TaskKind::Copy => "copy".into(),
            TaskKind::Reverse => "reverse".into(),
            TaskKind::SortAscending => "sort-asc".into(),
            TaskKind::SortDescending => "sort-desc".into(),
            TaskKind::TokenShift(k) if *k >= 0 => format!("shift+{k}"),
            TaskKind::TokenShift(k) => format!("shift{k}"),
            TaskKind::CountParity(t) if *t == DEFAULT_PARITY_TOKEN => "count-parity".into(),
            TaskKind::CountParity(t) => format!("count-parity:{t}"),
        }
    }

    /// Whether the answer is a single label token rather than a sequence.
    pub fn is_label(&self) -> bool {
        matches!(self, TaskKind::CountParity(_))
    }

    /// The task's target function.
    pub fn apply(&self, input: &[usize], vocab_size: usize) -> Vec<usize> {
        match *self {
            TaskKind::Copy => input.to_vec(),
            TaskKind::Reverse => input.iter().rev().copied().collect(),
            TaskKind::SortAscending => {
                let mut v = input.to_vec();
                v.sort_unstable();
                v
            }
            TaskKind::SortDescending => {
                let mut v = input.to_vec();
                v.sort_unstable_by(|a, b| b.cmp(a));
                v
            }
            TaskKind::TokenShift(k) => {
                let v = vocab_size as i64;
                input.iter().map(|&t| (t as i64 + k).rem_euclid(v) as usize).collect()
            }
            TaskKind::CountParity(tok) => {
                let n = input.iter().filter(|&&t| t == tok).count();
                vec![if n % 2 == 0 { EVEN } else { ODD }]
            }
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let kind = match s {
            "copy" => TaskKind::Copy,
            "reverse" => TaskKind::Reverse,
            "sort-asc" | "sort-ascending" => TaskKind::SortAscending,
            "sort-desc" | "sort-descending" => TaskKind::SortDescending,
            "count-parity" => TaskKind::CountParity(DEFAULT_PARITY_TOKEN),
            _ => {
                if let Some(rest) = s.strip_prefix("count-parity:") {
                    let tok = rest.parse().map_err(|_| Error::arg(format!("bad parity token in {s:?}")))?;
                    TaskKind::CountParity(tok)
                } else if let Some(rest) = s.strip_prefix("shift") {
                    let k: i64 = rest
                        .trim_start_matches('+')
                        .parse()
                        .map_err(|_| Error::arg(format!("bad shift offset in {s:?}")))?;
                    TaskKind::TokenShift(k)
                } else {
                    return Err(Error::arg(format!("unknown task kind {s:?}")));
                }
            }
        };
        Ok(kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    pub min_len: usize,
    pub max_len: usize,
    /// Tokens inputs are drawn from.
    pub vocab: Vec<usize>,
    pub vocab_size: usize,
}

impl TaskSpec {
    /// Spec with the default length range and the full data vocabulary.
    pub fn new(kind: TaskKind, vocab_size: usize) -> Result<Self> {
        Self::with_vocab(kind, vocab_size, (FIRST_DATA_TOKEN..vocab_size).collect(), DEFAULT_MIN_LEN, DEFAULT_MAX_LEN)
    }

    pub fn with_vocab(
        kind: TaskKind,
        vocab_size: usize,
        vocab: Vec<usize>,
        min_len: usize,
        max_len: usize,
    ) -> Result<Self> {
        let spec = Self {
            id: kind.name(),
            kind,
            min_len,
            max_len,
            vocab,
            vocab_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::arg(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        if let Some(&t) = self.vocab.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::arg(format!("token {t} outside vocabulary of {}", self.vocab_size)));
        }
        let distinct: HashSet<_> = self.vocab.iter().collect();
        if distinct.len() < 2 {
            return Err(Error::arg(format!("task {} needs at least 2 input tokens", self.id)));
        }
        match self.kind {
            TaskKind::TokenShift(k) if k.rem_euclid(self.vocab_size as i64) == 0 => {
                Err(Error::arg(format!("shift offset {k} is 0 mod {}", self.vocab_size)))
            }
            TaskKind::CountParity(tok) if !self.vocab.contains(&tok) => Err(Error::arg(format!(
                "counted token {tok} is not in the input vocabulary of {}",
                self.id
            ))),
            TaskKind::CountParity(_) if self.vocab_size <= ODD => {
                Err(Error::arg("vocabulary too small for parity labels"))
            }
            _ => Ok(()),
        }
    }

    pub fn target(&self, input: &[usize]) -> Vec<usize> {
        self.kind.apply(input, self.vocab_size)
    }

    /// Number of distinct inputs the spec can produce, saturating.
    fn input_space(&self) -> u128 {
        let base = self.vocab.iter().collect::<HashSet<_>>().len() as u128;
        (self.min_len..=self.max_len)
            .map(|l| base.saturating_pow(l as u32))
            .fold(0u128, u128::saturating_add)
    }

    fn random_input<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.random_range(self.min_len..=self.max_len);
        (0..len).map(|_| *self.vocab.choose(rng).expect("non-empty vocab")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl Sample {
    /// Teacher-forced model input: `input ++ [SEP] ++ target[..len-1]`.
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.input.len() + self.target.len());
        t.extend_from_slice(&self.input);
        t.push(SEP);
        t.extend_from_slice(&self.target[..self.target.len().saturating_sub(1)]);
        t
    }

    /// `(position, token)` pairs: the logits at `position` must predict `token`.
    pub fn target_positions(&self) -> Vec<(usize, usize)> {
        let base = self.input.len();
        self.target.iter().enumerate().map(|(j, &t)| (base + j, t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic { seed: u64 },
    File { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: String,
    /// Present for synthetic tasks; allows labels to be recomputed.
    pub spec: Option<TaskSpec>,
    pub train: Vec<Sample>,
    /// Held-out samples from the training distribution.
    pub unseen: Vec<Sample>,
    pub provenance: Provenance,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.unseen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `count` samples with distinct inputs and splits them 90/10 into
/// train and unseen-data.
pub fn generate_task(spec: &TaskSpec, seed: u64, count: usize) -> Result<TaskDataset> {
    spec.validate()?;
    if count < 2 {
        return Err(Error::arg(format!("need at least 2 samples, asked for {count}")));
    }
    if spec.input_space() < count as u128 {
        return Err(Error::arg(format!(
            "vocabulary of task {} admits fewer than {count} distinct inputs",
            spec.id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(count);
    let mut samples = Vec::with_capacity(count);
    while samples.len() < count {
        let input = spec.random_input(&mut rng);
        if seen.insert(input.clone()) {
            let target = spec.target(&input);
            samples.push(Sample { input, target });
        }
    }
    let n_unseen = ((count as f64) * 0.1).round().max(1.0) as usize;
    let unseen = samples.split_off(count - n_unseen);
    Ok(TaskDataset {
        task_id: spec.id.clone(),
        spec: Some(spec.clone()),
        train: samples,
        unseen,
        provenance: Provenance::Synthetic { seed },
    })
}

/// Named source and target tasks plus the data sizes to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub samples_per_task: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub data_seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            sources: ["copy", "reverse", "sort-asc", "shift+5"].map(String::from).to_vec(),
            targets: ["sort-desc", "shift+11", "count-parity"].map(String::from).to_vec(),
            samples_per_task: 1000,
            min_len: DEFAULT_MIN_LEN,
            max_len: DEFAULT_MAX_LEN,
            data_seed: 1234,
        }
    }
}

const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;
const MIXTURE_STREAM: u64 = 3;

impl SuiteConfig {
    pub fn spec(&self, name: &str, vocab_size: usize) -> Result<TaskSpec> {
        let kind: TaskKind = name.parse()?;
        let mut spec = TaskSpec::with_vocab(
            kind,
            vocab_size,
            (FIRST_DATA_TOKEN..vocab_size).collect(),
            self.min_len,
            self.max_len,
        )?;
        spec.id = name.to_string();
        Ok(spec)
    }

    fn generate(&self, names: &[String], vocab_size: usize, stream: u64) -> Result<Vec<TaskDataset>> {
        names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let spec = self.spec(name, vocab_size)?;
                generate_task(&spec, crate::derive_seed(self.data_seed, stream, i as u64), self.samples_per_task)
            })
            .collect()
    }

    pub fn source_datasets(&self, vocab_size: usize) -> Result<Vec<TaskDataset>> {
        self.generate(&self.sources, vocab_size, SOURCE_STREAM)
    }

    pub fn target_datasets(&self, vocab_size: usize) -> Result<Vec<TaskDataset>> {
        self.generate(&self.targets, vocab_size, TARGET_STREAM)
    }

    /// Fresh samples of every source and target task, for backbone
    /// pretraining. Drawn from a separate seed stream.
    pub fn pretraining_mixture(&self, vocab_size: usize) -> Result<Vec<TaskDataset>> {
        let all: Vec<String> = self.sources.iter().chain(&self.targets).cloned().collect();
        self.generate(&all, vocab_size, MIXTURE_STREAM)
    }
}

/// Fraction of `inputs` on which two tasks produce different targets.
pub fn pairwise_disagreement(a: &TaskSpec, b: &TaskSpec, inputs: &[Vec<usize>]) -> f64 {
    if inputs.is_empty() {
        return 0.0;
    }
    let differ = inputs.iter().filter(|x| a.target(x) != b.target(x)).count();
    differ as f64 / inputs.len() as f64
}

/// Random inputs drawn from `spec`'s input distribution.
pub fn sample_inputs(spec: &TaskSpec, seed: u64, count: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| spec.random_input(&mut rng)).collect()
}

/// Perturbs one sample by token substitution, insertion or deletion and
/// recomputes its label.
fn augment<R: Rng>(sample: &Sample, spec: &TaskSpec, rng: &mut R) -> Sample {
    let mut input = sample.input.clone();
    let tok = *spec.vocab.choose(rng).expect("non-empty vocab");
    let mut ops = vec![0u8];
    if input.len() < spec.max_len {
        ops.push(1);
    }
    if input.len() > spec.min_len {
        ops.push(2);
    }
    match ops.choose(rng).copied().unwrap_or(0) {
        1 => {
            let at = rng.random_range(0..=input.len());
            input.insert(at, tok);
        }
        2 => {
            let at = rng.random_range(0..input.len());
            input.remove(at);
        }
        _ => {
            let at = rng.random_range(0..input.len());
            input[at] = tok;
        }
    }
    let target = spec.target(&input);
    Sample { input, target }
}

/// Resizes every dataset's train split to exactly `target_size` samples.
///
/// Large splits are uniformly down-sampled. Small splits keep all their
/// samples and are topped up with augmented copies when the task's target
/// function is known, or plain duplicates otherwise. Unseen-data splits are
/// left untouched.
pub fn balance(datasets: &[TaskDataset], target_size: usize, seed: u64) -> Result<Vec<TaskDataset>> {
    if target_size == 0 {
        return Err(Error::arg("balance target size must be at least 1"));
    }
    let mut out = Vec::with_capacity(datasets.len());
    for (i, ds) in datasets.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut ds = ds.clone();
        if ds.train.is_empty() {
            return Err(Error::arg(format!("cannot balance empty dataset {}", ds.task_id)));
        }
        if ds.train.len() >= target_size {
            ds.train.shuffle(&mut rng);
            ds.train.truncate(target_size);
        } else {
            let originals = ds.train.clone();
            while ds.train.len() < target_size {
                let base = originals.choose(&mut rng).expect("non-empty");
                let extra = match &ds.spec {
                    Some(spec) => augment(base, spec, &mut rng),
                    None => base.clone(),
                };
                ds.train.push(extra);
            }
        }
        out.push(ds);
    }
    Ok(out)
}

/// Token vocabulary: one token per line, id = line index.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk: usize,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let unk = index.get("<unk>").copied().unwrap_or(UNK);
        Self { tokens, index, unk }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(Self::from_tokens(text.lines().map(str::to_owned).collect()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of the unknown-token placeholder: the `<unk>` line if present,
    /// otherwise the reserved [`UNK`] id.
    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    input: String,
    target: String,
}

/// Reads `{"input": .., "target": ..}` lines into a dataset, in file order.
/// Blank lines are skipped; all samples land in the train split.
pub fn load_jsonl(path: &Path, vocab_file: &Path) -> Result<TaskDataset> {
    let vocab = Vocab::load(vocab_file)?;
    let text = fs::read_to_string(path)?;
    let samples = parse_jsonl(&text, &vocab)?;
    let task_id = path.file_stem().map_or_else(|| "jsonl".into(), |s| s.to_string_lossy().into_owned());
    Ok(TaskDataset {
        task_id,
        spec: None,
        train: samples,
        unseen: Vec::new(),
        provenance: Provenance::File {
            path: path.display().to_string(),
        },
    })
}

pub fn parse_jsonl(text: &str, vocab: &Vocab) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(Sample {
            input: vocab.encode(&rec.input),
            target: vocab.encode(&rec.target),
        });
    }
    Ok(samples)
}
