//! Tensor naming for the checkpoints of each pipeline stage.
//!
//! ```text
//! backbone.*            frozen transformer weights
//! theta.t{i}.l{l}       phase-1 prompt of task i at lora layer l
//! base_gate.t{i}.l{l}   its gate
//! theta0.l{l}           mean prompt
//! B.l{l}                shared slow factor
//! u.t{i}.l{l}, v.t{i}.l{l}
//! gate.l{l}             shared phase-2 gate
//! ```
//!
//! Task ids are stored in the embedded config under `"task_ids"`.

use serde_json::Value;

use crate::backbone::{BackboneConfig, BackboneWeights};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::talora::{FastWeights, LoraFactors, PromptBank};

use super::{BaseModels, Checkpoint, TargetAdapter};

pub fn push_backbone(ckpt: &mut Checkpoint, w: &BackboneWeights) {
    for (name, t) in w.named_tensors() {
        ckpt.push(name, t);
    }
}

/// Frozen backbone weights read from `ckpt`.
pub fn read_backbone(ckpt: &Checkpoint, cfg: &BackboneConfig) -> Result<BackboneWeights> {
    BackboneWeights::from_named(cfg, |name| ckpt.get(name).cloned())
}

pub fn task_ids(ckpt: &Checkpoint) -> Result<Vec<String>> {
    ckpt.config
        .get("task_ids")
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(|v| v.as_str().map(String::from)).collect())
        .ok_or_else(|| Error::arg("checkpoint config has no task_ids list"))
}

fn checked(ckpt: &Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = ckpt.get(name)?;
    if t.shape() != shape {
        return Err(Error::dim("checkpoint tensor shape", shape, t.shape()));
    }
    Ok(t.clone())
}

pub fn push_base(ckpt: &mut Checkpoint, base: &BaseModels) {
    for (i, (thetas, gates)) in base.bank.thetas.iter().zip(&base.gates).enumerate() {
        for (l, (p, g)) in thetas.iter().zip(gates).enumerate() {
            ckpt.push(format!("theta.t{i}.l{l}"), p);
            ckpt.push(format!("base_gate.t{i}.l{l}"), g);
        }
    }
    for (l, t0) in base.bank.theta0.iter().enumerate() {
        ckpt.push(format!("theta0.l{l}"), t0);
    }
}

/// Per-task prompts and gates; `theta0` is recomputed from the prompts and
/// checked against the stored copy.
pub fn read_base(ckpt: &Checkpoint, cfg: &BackboneConfig, gate_shape: &[usize]) -> Result<(PromptBank, Vec<Vec<Tensor>>)> {
    let ids = task_ids(ckpt)?;
    let ph = [cfg.prompt_len, cfg.model_dim];
    let mut thetas = Vec::with_capacity(ids.len());
    let mut gates = Vec::with_capacity(ids.len());
    for i in 0..ids.len() {
        let mut th = Vec::with_capacity(cfg.lora_layers);
        let mut gs = Vec::with_capacity(cfg.lora_layers);
        for l in 0..cfg.lora_layers {
            th.push(checked(ckpt, &format!("theta.t{i}.l{l}"), &ph)?);
            gs.push(checked(ckpt, &format!("base_gate.t{i}.l{l}"), gate_shape)?);
        }
        thetas.push(th);
        gates.push(gs);
    }
    let bank = PromptBank::new(ids, thetas)?;
    for (l, t0) in bank.theta0.iter().enumerate() {
        let stored = checked(ckpt, &format!("theta0.l{l}"), &ph)?;
        // the stored copy may have been rounded to 32 bits
        if stored.max_abs_diff(t0) > 1e-6 {
            return Err(Error::arg(format!("theta0.l{l} does not match the mean of the stored prompts")));
        }
    }
    Ok((bank, gates))
}

pub fn read_theta0(ckpt: &Checkpoint, cfg: &BackboneConfig) -> Result<Vec<Tensor>> {
    (0..cfg.lora_layers)
        .map(|l| checked(ckpt, &format!("theta0.l{l}"), &[cfg.prompt_len, cfg.model_dim]))
        .collect()
}

pub fn push_factors(ckpt: &mut Checkpoint, theta0: &[Tensor], f: &LoraFactors) {
    for (l, t0) in theta0.iter().enumerate() {
        ckpt.push(format!("theta0.l{l}"), t0);
    }
    for (l, (b, g)) in f.b.iter().zip(&f.gates).enumerate() {
        ckpt.push(format!("B.l{l}"), b);
        ckpt.push(format!("gate.l{l}"), g);
    }
    for (i, fw) in f.tasks.iter().enumerate() {
        for (l, (u, v)) in fw.u.iter().zip(&fw.v).enumerate() {
            ckpt.push(format!("u.t{i}.l{l}"), u);
            ckpt.push(format!("v.t{i}.l{l}"), v);
        }
    }
}

pub fn read_factors(
    ckpt: &Checkpoint,
    cfg: &BackboneConfig,
    rank: usize,
    scale: f64,
    gate_shape: &[usize],
) -> Result<LoraFactors> {
    let ids = task_ids(ckpt)?;
    let layers = cfg.lora_layers;
    let b = (0..layers)
        .map(|l| checked(ckpt, &format!("B.l{l}"), &[cfg.prompt_len, rank]))
        .collect::<Result<Vec<_>>>()?;
    let gates = (0..layers)
        .map(|l| checked(ckpt, &format!("gate.l{l}"), gate_shape))
        .collect::<Result<Vec<_>>>()?;
    let tasks = (0..ids.len())
        .map(|i| -> Result<FastWeights> {
            let mut fw = FastWeights {
                u: Vec::with_capacity(layers),
                v: Vec::with_capacity(layers),
            };
            for l in 0..layers {
                fw.u.push(checked(ckpt, &format!("u.t{i}.l{l}"), &[rank])?);
                fw.v.push(checked(ckpt, &format!("v.t{i}.l{l}"), &[cfg.model_dim])?);
            }
            Ok(fw)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoraFactors {
        task_ids: ids,
        b,
        tasks,
        gates,
        scale,
        rank,
    })
}

pub fn push_adapter(ckpt: &mut Checkpoint, a: &TargetAdapter) {
    for (l, ((u, v), g)) in a.fast.u.iter().zip(&a.fast.v).zip(&a.gates).enumerate() {
        ckpt.push(format!("target.u.l{l}"), u);
        ckpt.push(format!("target.v.l{l}"), v);
        ckpt.push(format!("target.gate.l{l}"), g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::talora::LoraConfig;
    use crate::training::{Checkpoint, Dtype};
    use serde_json::json;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 11,
            model_dim: 8,
            n_heads: 2,
            n_layers: 3,
            max_seq_len: 16,
            prompt_len: 3,
            lora_layers: 2,
        }
    }

    #[test]
    fn factors_survive_a_checkpoint() {
        let c = cfg();
        let lora = LoraConfig::default();
        let ids = vec!["a".to_string(), "b".to_string()];
        let f = LoraFactors::init(&c, &lora, ids.clone(), 3).unwrap();
        let theta0 = vec![Tensor::zeros(&[3, 8]), Tensor::full(&[3, 8], 0.5)];
        let mut ck = Checkpoint::new(json!({ "task_ids": ids }));
        push_factors(&mut ck, &theta0, &f);
        let back = Checkpoint::from_bytes(&ck.to_bytes(Dtype::F64).unwrap()).unwrap();
        assert_eq!(read_factors(&back, &c, lora.rank, lora.scale, &[]).unwrap(), f);
        assert_eq!(read_theta0(&back, &c).unwrap(), theta0);
        assert!(matches!(read_factors(&back, &c, 3, 1.0, &[]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn missing_task_ids() {
        assert!(task_ids(&Checkpoint::new(json!({}))).is_err());
        assert!(task_ids(&Checkpoint::new(json!({"task_ids": [1]}))).is_err());
    }
}
