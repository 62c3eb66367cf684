//! Similarity traces of per-task prompts, parameter-efficiency tables and the
//! consolidated run report.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::talora::ParamCount;
use crate::training::metrics::{read_rows, write_rows};
use crate::training::{read_metrics_csv, BankSnapshot, Metrics};

/// Version of the `report.json` layout. Bumped together with the checkpoint
/// format version.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const BASE_METRICS_FILE: &str = "base_metrics.csv";
pub const TALORA_METRICS_FILE: &str = "talora_metrics.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const SIMILARITY_FILE: &str = "similarity.csv";
pub const REPORT_FILE: &str = "report.json";
/// Prefix of per-target few-shot result files, `fewshot-<task>-k<k>.json`.
pub const FEWSHOT_PREFIX: &str = "fewshot-";

/// Cosine similarity of two flattened tensors. A zero-norm operand yields 0
/// and `true` as a warning.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<(f64, bool)> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine", &[a.len()], &[b.len()]));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0), false))
}

/// Pairwise cosine matrix of all tasks at one layer and step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTrace {
    pub step: usize,
    /// Index among the prompted layers; 0 is the shallowest.
    pub layer: usize,
    pub matrix: Vec<Vec<f64>>,
    /// Task pairs `(i, j)` where a prompt had zero norm.
    pub warnings: Vec<(usize, usize)>,
}

impl SimilarityTrace {
    fn off_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        let t = self.matrix.len();
        (0..t).flat_map(move |i| (i + 1..t).map(move |j| self.matrix[i][j]))
    }

    /// Mean over unordered task pairs.
    pub fn mean_cosine(&self) -> f64 {
        let v: Vec<f64> = self.off_diagonal().collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn mean_abs_cosine(&self) -> f64 {
        let v: Vec<f64> = self.off_diagonal().map(f64::abs).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Cosine similarity between every pair of tasks' flattened prompts
/// (row-major over prompt positions then hidden units), per snapshot and
/// requested layer.
pub fn layer_similarity(snapshots: &[BankSnapshot], layers: &[usize]) -> Result<Vec<SimilarityTrace>> {
    let mut out = Vec::with_capacity(snapshots.len() * layers.len());
    for snap in snapshots {
        let t = snap.thetas.len();
        if t < 2 {
            return Err(Error::arg(format!("similarity needs at least 2 tasks, got {t}")));
        }
        for &layer in layers {
            let mut matrix = vec![vec![0.0; t]; t];
            let mut warnings = Vec::new();
            for i in 0..t {
                for j in i..t {
                    let a = snap.thetas[i].get(layer).ok_or_else(|| Error::arg(format!("no layer {layer}")))?;
                    let b = snap.thetas[j].get(layer).ok_or_else(|| Error::arg(format!("no layer {layer}")))?;
                    let (c, warn) = cosine(a.data(), b.data())?;
                    // a non-zero vector is always parallel to itself
                    let c = if i == j && !warn { 1.0 } else { c };
                    if warn {
                        warnings.push((i, j));
                    }
                    matrix[i][j] = c;
                    matrix[j][i] = c;
                }
            }
            out.push(SimilarityTrace {
                step: snap.step,
                layer,
                matrix,
                warnings,
            });
        }
    }
    Ok(out)
}

/// One unordered task pair of a similarity trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub step: usize,
    pub layer: usize,
    pub task_i: String,
    pub task_j: String,
    pub cosine: f64,
}

pub fn similarity_rows(traces: &[SimilarityTrace], task_ids: &[String]) -> Vec<SimilarityRow> {
    let mut rows = Vec::new();
    for tr in traces {
        let t = tr.matrix.len();
        for i in 0..t {
            for j in i + 1..t {
                rows.push(SimilarityRow {
                    step: tr.step,
                    layer: tr.layer,
                    task_i: task_ids[i].clone(),
                    task_j: task_ids[j].clone(),
                    cosine: tr.matrix[i][j],
                });
            }
        }
    }
    rows
}

pub fn write_similarity_csv(path: &Path, rows: &[SimilarityRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_similarity_csv(path: &Path) -> Result<Vec<SimilarityRow>> {
    read_rows(path)
}

/// Trainable parameters of one adaptation method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub method: String,
    /// Parameters added for each task.
    pub per_task: usize,
    /// Parameters shared by all tasks.
    pub shared: usize,
    /// `shared + tasks · per_task`.
    pub total: usize,
    /// `per_task` as a fraction of the backbone.
    pub per_task_ratio: f64,
    pub total_ratio: f64,
}

/// Full fine-tuning, vanilla prompt tuning and the low-rank method side by
/// side, for `count.tasks` tasks.
pub fn efficiency_report(count: &ParamCount) -> Vec<EfficiencyRow> {
    let p = count.backbone_frozen as f64;
    let row = |method: &str, per_task: usize, shared: usize| {
        let total = shared + count.tasks * per_task;
        EfficiencyRow {
            method: method.into(),
            per_task,
            shared,
            total,
            per_task_ratio: per_task as f64 / p,
            total_ratio: total as f64 / p,
        }
    };
    vec![
        row("full-finetune", count.backbone_frozen, 0),
        row("prompt-tuning", count.vanilla_pt_per_task, 0),
        row("ta-lora", count.per_task_fast, count.shared_slow + count.gates),
    ]
}

pub fn write_efficiency(dir: &Path, rows: &[EfficiencyRow]) -> Result<()> {
    write_rows(&dir.join("efficiency.csv"), rows)?;
    fs::write(dir.join("efficiency.json"), serde_json::to_string_pretty(rows)? + "\n")?;
    Ok(())
}

/// Unseen-data metrics of one source task under both methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEval {
    pub task: String,
    pub prompt_tuning: Metrics,
    pub ta_lora: Metrics,
}

/// Contents of `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSummary {
    pub seed: u64,
    pub unseen_data: Vec<SourceEval>,
}

/// Contents of one `fewshot-<task>-k<k>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotResult {
    pub task: String,
    pub k: usize,
    pub seed: u64,
    /// Random fast weights, zero gate, no training.
    pub baseline: Metrics,
    pub adapted: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatePoint {
    pub step: usize,
    pub mean_abs_tanh_gate: f64,
}

/// Mean adapted and baseline exact match across targets at one `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotSummary {
    pub k: usize,
    pub tasks: usize,
    pub mean_exact_match: f64,
    pub mean_baseline_exact_match: f64,
}

/// Layout of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub unseen_data: Vec<SourceEval>,
    pub unseen_task: Vec<FewShotResult>,
    pub few_shot_table: Vec<FewShotSummary>,
    /// Keyed by phase: `base` then `ta_lora`.
    pub gate_trajectories: BTreeMap<String, Vec<GatePoint>>,
}

#[derive(Serialize)]
struct LossPoint<'a> {
    phase: &'a str,
    step: usize,
    task: &'a str,
    loss: f64,
    penalty: f64,
}

#[derive(Serialize)]
struct GateRow<'a> {
    phase: &'a str,
    step: usize,
    mean_abs_tanh_gate: f64,
}

#[derive(Serialize)]
struct FewShotRow<'a> {
    task: &'a str,
    k: usize,
    seed: u64,
    baseline_exact_match: f64,
    adapted_exact_match: f64,
    adapted_token_accuracy: f64,
}

#[derive(Serialize)]
struct UnseenRow<'a> {
    task: &'a str,
    prompt_tuning_exact_match: f64,
    ta_lora_exact_match: f64,
    prompt_tuning_token_accuracy: f64,
    ta_lora_token_accuracy: f64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Phase 1 records every task's own steps, so its trajectory is averaged
/// across tasks at each step.
fn gate_points(rows: &[crate::training::MetricRow]) -> Vec<GatePoint> {
    let mut by_step: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = by_step.entry(r.step).or_default();
        e.0 += r.mean_abs_tanh_gate;
        e.1 += 1;
    }
    by_step
        .into_iter()
        .map(|(step, (s, n))| GatePoint {
            step,
            mean_abs_tanh_gate: s / n as f64,
        })
        .collect()
}

/// Reads a run directory and writes `report.json` plus plot-ready CSVs:
/// `fig_loss.csv`, `fig_gates.csv`, `fig_unseen_data.csv`,
/// `fig_fewshot.csv`, and `fig_similarity.csv` when a similarity trace
/// exists. Output depends only on the input files.
pub fn emit_report(run_dir: &Path) -> Result<Report> {
    let required = [BASE_METRICS_FILE, TALORA_METRICS_FILE, EVAL_FILE];
    let missing: Vec<String> = required
        .iter()
        .filter(|f| !run_dir.join(f).is_file())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles {
            dir: run_dir.to_path_buf(),
            files: missing,
        });
    }
    let base = read_metrics_csv(&run_dir.join(BASE_METRICS_FILE))?;
    let talora = read_metrics_csv(&run_dir.join(TALORA_METRICS_FILE))?;
    let eval: EvalSummary = read_json(&run_dir.join(EVAL_FILE))?;

    let mut fewshot_files: Vec<_> = fs::read_dir(run_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(FEWSHOT_PREFIX) && n.ends_with(".json"))
        .collect();
    fewshot_files.sort();
    let mut fewshot = fewshot_files
        .iter()
        .map(|n| read_json::<FewShotResult>(&run_dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    fewshot.sort_by(|a, b| (a.k, &a.task, a.seed).cmp(&(b.k, &b.task, b.seed)));

    let mut by_k: BTreeMap<usize, Vec<&FewShotResult>> = BTreeMap::new();
    for r in &fewshot {
        by_k.entry(r.k).or_default().push(r);
    }
    let few_shot_table = by_k
        .into_iter()
        .map(|(k, rs)| FewShotSummary {
            k,
            tasks: rs.len(),
            mean_exact_match: rs.iter().map(|r| r.adapted.exact_match).sum::<f64>() / rs.len() as f64,
            mean_baseline_exact_match: rs.iter().map(|r| r.baseline.exact_match).sum::<f64>() / rs.len() as f64,
        })
        .collect();

    let mut gate_trajectories = BTreeMap::new();
    gate_trajectories.insert("base".to_string(), gate_points(&base));
    gate_trajectories.insert("ta_lora".to_string(), gate_points(&talora));

    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        unseen_data: eval.unseen_data,
        unseen_task: fewshot,
        few_shot_table,
        gate_trajectories,
    };

    let loss_rows: Vec<LossPoint> = [("base", &base), ("ta_lora", &talora)]
        .into_iter()
        .flat_map(|(phase, rows)| {
            rows.iter().map(move |r| LossPoint {
                phase,
                step: r.step,
                task: &r.task,
                loss: r.loss,
                penalty: r.penalty,
            })
        })
        .collect();
    write_rows(&run_dir.join("fig_loss.csv"), &loss_rows)?;
    let gate_rows: Vec<GateRow> = report
        .gate_trajectories
        .iter()
        .flat_map(|(phase, pts)| {
            pts.iter().map(move |p| GateRow {
                phase,
                step: p.step,
                mean_abs_tanh_gate: p.mean_abs_tanh_gate,
            })
        })
        .collect();
    write_rows(&run_dir.join("fig_gates.csv"), &gate_rows)?;
    let unseen: Vec<UnseenRow> = report
        .unseen_data
        .iter()
        .map(|e| UnseenRow {
            task: &e.task,
            prompt_tuning_exact_match: e.prompt_tuning.exact_match,
            ta_lora_exact_match: e.ta_lora.exact_match,
            prompt_tuning_token_accuracy: e.prompt_tuning.token_accuracy,
            ta_lora_token_accuracy: e.ta_lora.token_accuracy,
        })
        .collect();
    write_rows(&run_dir.join("fig_unseen_data.csv"), &unseen)?;
    let few: Vec<FewShotRow> = report
        .unseen_task
        .iter()
        .map(|r| FewShotRow {
            task: &r.task,
            k: r.k,
            seed: r.seed,
            baseline_exact_match: r.baseline.exact_match,
            adapted_exact_match: r.adapted.exact_match,
            adapted_token_accuracy: r.adapted.token_accuracy,
        })
        .collect();
    write_rows(&run_dir.join("fig_fewshot.csv"), &few)?;
    let sim_path = run_dir.join(SIMILARITY_FILE);
    if sim_path.is_file() {
        let rows = read_similarity_csv(&sim_path)?;
        write_rows(&run_dir.join("fig_similarity.csv"), &mean_similarity(&rows))?;
    }
    fs::write(run_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

/// Pair-averaged cosine per (step, layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSimilarity {
    pub step: usize,
    pub layer: usize,
    pub mean_cosine: f64,
    pub mean_abs_cosine: f64,
}

pub fn mean_similarity(rows: &[SimilarityRow]) -> Vec<MeanSimilarity> {
    let mut acc: BTreeMap<(usize, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.step, r.layer)).or_default();
        e.0 += r.cosine;
        e.1 += r.cosine.abs();
        e.2 += 1;
    }
    acc.into_iter()
        .map(|((step, layer), (s, a, n))| MeanSimilarity {
            step,
            layer,
            mean_cosine: s / n as f64,
            mean_abs_cosine: a / n as f64,
        })
        .collect()
}
