use super::*;
use crate::backbone::{init_backbone, pretrain_backbone, PretrainConfig};
use crate::talora::orthogonality_penalty;
use crate::taskgen::{generate_task, TaskKind, TaskSpec};
use rand::Rng;
use std::sync::OnceLock;

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

fn tasks() -> Vec<TaskDataset> {
    [TaskKind::Copy, TaskKind::Reverse, TaskKind::SortAscending]
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let spec = TaskSpec::with_vocab(k, 11, (5..11).collect(), 2, 4).unwrap();
            generate_task(&spec, i as u64, 50).unwrap()
        })
        .collect()
}

fn frozen() -> BackboneWeights {
    static BB: OnceLock<BackboneWeights> = OnceLock::new();
    BB.get_or_init(|| {
        let p = PretrainConfig {
            steps: 1000,
            batch_size: 16,
            lr: 1e-2,
            warmup: 20,
            seed: 0,
            task_prompts: true,
            ..PretrainConfig::default()
        };
        let r = pretrain_backbone(init_backbone(&cfg(), 1).unwrap(), &tasks(), &p).unwrap();
        r.weights
    })
    .clone()
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        base_steps: 30,
        talora_steps: 30,
        adapt_steps: 20,
        batch_size: 4,
        snapshot_every: 10,
        lr_prompt: 2e-2,
        ..TrainConfig::default()
    }
}

fn factors(bb: &BackboneWeights, ts: &[TaskDataset]) -> LoraFactors {
    let ids = ts.iter().map(|t| t.task_id.clone()).collect();
    LoraFactors::init(&bb.config, &LoraConfig::default(), ids, 5).unwrap()
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let zero = TrainConfig {
        lr_fast: 0.0,
        lambda: 0.0,
        ..TrainConfig::default()
    };
    assert!(zero.validate().is_ok());
    for bad in [
        TrainConfig {
            lr_slow: -1e-3,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr_prompt: f64::NAN,
            ..TrainConfig::default()
        },
        TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Argument(_))));
    }
}

#[test]
fn cached_batches_match_full_forward() {
    let bb = frozen();
    let ts = tasks();
    let cache = CachedSplit::new(&bb, &ts[0].train[..5]).unwrap();
    let batch = cache.batch(&[3, 0, 3]).unwrap();
    let mut tape = Tape::new();
    let bound = bb.bind(&mut tape, false).unwrap();
    let h = tape.constant(&batch.hidden);
    let h = bb.run_layers(&mut tape, &bound, h, &batch.lens, bb.config.lora_range(), None).unwrap();
    let logits = bb.head(&mut tape, &bound, h).unwrap();
    let samples = [&ts[0].train[3], &ts[0].train[0], &ts[0].train[3]];
    let toks: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens()).collect();
    let seqs: Vec<&[usize]> = toks.iter().map(Vec::as_slice).collect();
    let mut tape2 = Tape::new();
    let b2 = bb.bind(&mut tape2, false).unwrap();
    let full = bb.logits_tape(&mut tape2, &b2, &seqs, None).unwrap();
    assert!(tape.value(logits).max_abs_diff(tape2.value(full)) < 1e-12);
    assert_eq!(batch.targets, stacked_targets(&samples));
}

#[test]
fn base_prompts_need_a_frozen_backbone_and_two_tasks() {
    let ts = tasks();
    let lora = LoraConfig::default();
    let live = init_backbone(&cfg(), 1).unwrap();
    assert!(matches!(train_base_prompts(&live, &ts, &lora, &train_cfg()), Err(Error::State(_))));
    assert!(matches!(train_base_prompts(&frozen(), &ts[..1], &lora, &train_cfg()), Err(Error::Argument(_))));
}

#[test]
fn zero_base_steps_keep_the_random_init() {
    let bb = frozen();
    let c = TrainConfig {
        base_steps: 0,
        ..train_cfg()
    };
    let base = train_base_prompts(&bb, &tasks(), &LoraConfig::default(), &c).unwrap();
    for (i, thetas) in base.bank.thetas.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, STREAM_BASE_INIT, i as u64));
        for th in thetas {
            assert_eq!(th, &Tensor::randn(&[3, 8], INIT_STD, &mut rng));
        }
    }
    assert!(base.metrics.is_empty());
    assert_eq!(base.snapshots.len(), 1);
    assert_eq!(base.snapshots[0].step, 0);
}

#[test]
fn base_training_reduces_loss_and_is_deterministic() {
    let bb = frozen();
    let lora = LoraConfig::default();
    let c = TrainConfig {
        base_steps: 60,
        batch_size: 8,
        snapshot_every: 20,
        ..train_cfg()
    };
    let a = train_base_prompts(&bb, &tasks(), &lora, &c).unwrap();
    let b = train_base_prompts(&bb, &tasks(), &lora, &c).unwrap();
    assert_eq!(a.bank, b.bank);
    assert_eq!(a.metrics, b.metrics);
    // per-task decrease is checked at desk scale in the integration tests
    let (mut head, mut tail) = (0.0, 0.0);
    for t in &a.bank.task_ids {
        let losses: Vec<f64> = a.metrics.iter().filter(|r| &r.task == t).map(|r| r.loss).collect();
        assert_eq!(losses.len(), 60);
        head += metrics::window_mean(&losses[..10]);
        tail += metrics::window_mean(&losses[50..]);
    }
    assert!(tail < head, "{head} -> {tail}");
    let steps: Vec<usize> = a.snapshots.iter().map(|s| s.step).collect();
    assert_eq!(steps, vec![0, 20, 40, 60]);
    assert_eq!(a.snapshots[3].thetas, a.bank.thetas);
    assert!(a.gates.iter().flatten().all(|g| g.item() != 0.0));
}

#[test]
fn talora_lambda_adds_exactly_the_weighted_penalty() {
    let bb = frozen();
    let ts = tasks();
    let base = train_base_prompts(&bb, &ts, &LoraConfig::default(), &train_cfg()).unwrap();
    let one = |lambda| {
        let c = TrainConfig {
            talora_steps: 1,
            lambda,
            ..train_cfg()
        };
        train_talora(&bb, &base.bank, factors(&bb, &ts), &ts, &c).unwrap().metrics[0].clone()
    };
    let plain = one(0.0);
    let weighted = one(2.0);
    let pen = orthogonality_penalty(&factors(&bb, &ts).tasks).unwrap();
    assert!((plain.penalty - pen).abs() < 1e-12);
    assert!((weighted.loss - plain.loss - 2.0 * pen).abs() < 1e-10);
    assert_eq!(plain.mean_abs_tanh_gate, 0.0);
}

#[test]
fn talora_round_robin_and_determinism() {
    let bb = frozen();
    let ts = tasks();
    let base = train_base_prompts(&bb, &ts, &LoraConfig::default(), &train_cfg()).unwrap();
    let a = train_talora(&bb, &base.bank, factors(&bb, &ts), &ts, &train_cfg()).unwrap();
    let b = train_talora(&bb, &base.bank, factors(&bb, &ts), &ts, &train_cfg()).unwrap();
    assert_eq!(a.factors, b.factors);
    assert_eq!(a.metrics, b.metrics);
    let order: Vec<&str> = a.metrics.iter().take(4).map(|r| r.task.as_str()).collect();
    assert_eq!(order, ["copy", "reverse", "sort-asc", "copy"]);
    assert!(a.factors.gates.iter().all(|g| g.item() != 0.0));
}

#[test]
fn learning_rate_groups_are_wired_separately() {
    let bb = frozen();
    let ts = tasks();
    let base = train_base_prompts(&bb, &ts, &LoraConfig::default(), &train_cfg()).unwrap();
    // closed gates would zero every prompt gradient
    let mut init = factors(&bb, &ts);
    init.gates.iter_mut().for_each(|g| *g = Tensor::scalar(0.5));
    let run = |lr_slow, lr_fast| {
        let c = TrainConfig {
            lr_slow,
            lr_fast,
            talora_steps: 6,
            ..train_cfg()
        };
        train_talora(&bb, &base.bank, init.clone(), &ts, &c).unwrap().factors
    };
    let fast_frozen = run(1e-3, 0.0);
    assert_eq!(fast_frozen.tasks, init.tasks);
    assert_eq!(fast_frozen.gates, init.gates);
    assert!(fast_frozen.b.iter().zip(&init.b).all(|(a, b)| a != b));
    let slow_frozen = run(0.0, 1e-3);
    assert_eq!(slow_frozen.b, init.b);
    assert!(slow_frozen.tasks.iter().zip(&init.tasks).all(|(a, b)| a.u != b.u && a.v != b.v));
    assert!(slow_frozen.gates.iter().zip(&init.gates).all(|(a, b)| a != b));
}

#[test]
fn stale_gradients_do_not_leak_into_updates() {
    let bb = frozen();
    let ts = tasks();
    let base = train_base_prompts(&bb, &ts, &LoraConfig::default(), &train_cfg()).unwrap();
    let clean = factors(&bb, &ts);
    let mut poisoned = clean.clone();
    for t in poisoned.b.iter_mut().chain(poisoned.gates.iter_mut()) {
        let n = t.numel();
        t.accumulate_grad(&vec![f64::NAN; n]).unwrap();
    }
    let c = TrainConfig {
        talora_steps: 3,
        ..train_cfg()
    };
    let a = train_talora(&bb, &base.bank, clean, &ts, &c).unwrap();
    let b = train_talora(&bb, &base.bank, poisoned, &ts, &c).unwrap();
    assert_eq!(a.factors.b, b.factors.b);
    assert_eq!(a.factors.gates, b.factors.gates);
}

#[test]
fn talora_rejects_mismatched_inputs() {
    let bb = frozen();
    let ts = tasks();
    let base = train_base_prompts(&bb, &ts, &LoraConfig::default(), &train_cfg()).unwrap();
    let mut bad = factors(&bb, &ts);
    bad.b[1] = Tensor::zeros(&[4, 4]);
    assert!(matches!(train_talora(&bb, &base.bank, bad, &ts, &train_cfg()), Err(Error::Dimension { .. })));
    let mut bank = base.bank.clone();
    bank.theta0[0] = Tensor::zeros(&[3, 7]);
    assert!(matches!(
        train_talora(&bb, &bank, factors(&bb, &ts), &ts, &train_cfg()),
        Err(Error::Dimension { .. })
    ));
    assert!(matches!(
        train_talora(&bb, &base.bank, factors(&bb, &ts), &ts[..2], &train_cfg()),
        Err(Error::Argument(_))
    ));
}

#[test]
fn adaptation_trains_only_the_new_factors() {
    let bb = frozen();
    let ts = tasks();
    let lora = LoraConfig::default();
    let base = train_base_prompts(&bb, &ts, &lora, &train_cfg()).unwrap();
    let run = train_talora(&bb, &base.bank, factors(&bb, &ts), &ts, &train_cfg()).unwrap();
    let target = {
        let spec = TaskSpec::with_vocab(TaskKind::SortDescending, 11, (5..11).collect(), 2, 4).unwrap();
        generate_task(&spec, 9, 40).unwrap()
    };
    let frozen_b = run.factors.b.clone();
    let out = adapt_target(&bb, &base.bank.theta0, &run.factors, &lora, &target, 8, &train_cfg()).unwrap();
    assert_eq!(run.factors.b, frozen_b);
    assert_eq!(out.shots.len(), 8);
    assert!(out.shots.iter().all(|s| target.train.contains(s)));
    assert!(out.initial.gates.iter().all(|g| g.item() == 0.0));
    assert!(out.adapter.gates.iter().all(|g| g.item() != 0.0));
    assert_ne!(out.adapter.fast, out.initial.fast);
    assert_eq!(out.metrics.len(), 20);

    let again = adapt_target(&bb, &base.bank.theta0, &run.factors, &lora, &target, 8, &train_cfg()).unwrap();
    assert_eq!(again.adapter, out.adapter);

    let err = |k| adapt_target(&bb, &base.bank.theta0, &run.factors, &lora, &target, k, &train_cfg());
    assert!(matches!(err(0), Err(Error::Argument(_))));
    assert!(matches!(err(target.train.len() + 1), Err(Error::Argument(_))));
}

#[test]
fn perfect_logits_score_one() {
    let samples = &tasks()[0].train[..6];
    let per: Vec<Vec<(usize, usize)>> = {
        let mut base = 0;
        samples
            .iter()
            .map(|s| {
                let t = s.target_positions().into_iter().map(|(p, t)| (base + p, t)).collect();
                base += s.input.len() + s.target.len();
                t
            })
            .collect()
    };
    let rows: usize = samples.iter().map(|s| s.input.len() + s.target.len()).sum();
    let mut logits = Tensor::zeros(&[rows, 11]);
    for &(r, t) in per.iter().flatten() {
        logits.data_mut()[r * 11 + t] = 10.0;
    }
    let m = score_logits(&logits, &per).unwrap();
    assert_eq!(m.exact_match, 1.0);
    assert_eq!(m.token_accuracy, 1.0);
    assert_eq!(m.samples, 6);
    // one wrong token fails only its sample
    let (r, t) = per[2][0];
    logits.data_mut()[r * 11 + t] = -10.0;
    let m = score_logits(&logits, &per).unwrap();
    assert!((m.exact_match - 5.0 / 6.0).abs() < 1e-15);
    assert!(score_logits(&logits, &[]).is_err());
}

#[test]
fn random_logits_score_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2000;
    let logits = Tensor::randn(&[n, 32], 1.0, &mut rng);
    let per: Vec<Vec<(usize, usize)>> = (0..n).map(|i| vec![(i, rng.random_range(0..32))]).collect();
    let m = score_logits(&logits, &per).unwrap();
    assert!((m.token_accuracy - 1.0 / 32.0).abs() < 0.02, "{}", m.token_accuracy);
    assert_eq!(m.exact_match, m.token_accuracy);
}

#[test]
fn evaluate_matches_single_forward_and_repeats() {
    let bb = frozen();
    let split = &tasks()[1].unseen;
    let m = evaluate(&bb, None, split).unwrap();
    assert_eq!(m, evaluate(&bb, None, split).unwrap());
    let mut correct = 0;
    let mut total = 0;
    for s in split {
        let logits = bb.forward(&[s.tokens()], None).unwrap();
        for (p, t) in s.target_positions() {
            let row = &logits.data()[p * 11..(p + 1) * 11];
            let best = (0..11).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            correct += (best == t) as usize;
            total += 1;
        }
    }
    assert_eq!(m.token_accuracy, correct as f64 / total as f64);
    assert!(evaluate(&bb, None, &[]).is_err());
}

#[test]
fn zero_gate_prompts_evaluate_like_no_prompts() {
    let bb = frozen();
    let split = &tasks()[0].unseen;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let thetas: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[3, 8], 1.0, &mut rng)).collect();
    let gates = vec![Tensor::scalar(0.0); 2];
    let with = evaluate(&bb, Some(&base_prompts(&bb.config, &thetas, &gates)), split).unwrap();
    let without = evaluate(&bb, None, split).unwrap();
    assert!((with.loss - without.loss).abs() < 1e-12);
    assert_eq!(with.exact_match, without.exact_match);
}
