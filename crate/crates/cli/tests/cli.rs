use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[backbone]
vocab_size = 32
model_dim = 8
n_heads = 2
n_layers = 2
max_seq_len = 32
prompt_len = 2
lora_layers = 1

[pretrain]
steps = 4
batch_size = 4
warmup = 1

[train]
base_steps = 3
talora_steps = 3
adapt_steps = 2
batch_size = 2
snapshot_every = 1

[suite]
samples_per_task = 80
"#;

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.toml");
    let out = d.path().join("runs");
    fs::write(&cfg, format!("out = {:?}\n{extra}{TINY}", out.display().to_string())).unwrap();
    (d, cfg)
}

fn talora(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_talora"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .env_remove("TALORA_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr_json(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    serde_json::from_str(lines[0]).unwrap()
}

fn run_dir(o: &Output) -> PathBuf {
    let s = stdout(o);
    let line = s.lines().find_map(|l| l.strip_prefix("run directory: ")).unwrap();
    PathBuf::from(line)
}

#[test]
fn count_params_prints_table_and_writes_json() {
    let (_d, cfg) = setup("");
    let o = talora(&cfg, &["count-params"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("seed: 42 (from default)"));
    assert!(s.contains("per_task"));
    let dir = run_dir(&o);
    let params: Value = serde_json::from_str(&fs::read_to_string(dir.join("params.json")).unwrap()).unwrap();
    assert!(params.is_object());
    assert!(dir.join("efficiency.csv").is_file());
    assert!(dir.join("config.toml").is_file());
}

#[test]
fn talora_without_base_is_a_stage_order_error() {
    let (_d, cfg) = setup("");
    let o = talora(&cfg, &["train-talora"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["error"], "stage_order");
    assert_eq!(e["requires"], "train-base");
}

#[test]
fn seed_flag_wins_and_is_echoed() {
    let (_d, cfg) = setup("seed = 5\n");
    let o = talora(&cfg, &["count-params", "--seed", "17"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("seed: 17 (from --seed)"));
    let echoed: toml::Value = toml::from_str(&fs::read_to_string(run_dir(&o).join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed["seed"].as_integer(), Some(17));
    assert_eq!(echoed["train"]["seed"].as_integer(), Some(17));

    let env = Command::new(env!("CARGO_BIN_EXE_talora"))
        .args(["count-params", "--config"])
        .arg(&cfg)
        .env("TALORA_SEED", "23")
        .output()
        .unwrap();
    assert!(stdout(&env).contains("seed: 23 (from TALORA_SEED)"));
    assert!(stdout(&talora(&cfg, &["count-params"])).contains("seed: 5 (from config file)"));
}

#[test]
fn out_flag_overrides_the_file() {
    let (d, cfg) = setup("");
    let elsewhere = d.path().join("elsewhere");
    let o = talora(&cfg, &["count-params", "--out", elsewhere.to_str().unwrap()]);
    assert!(o.status.success());
    let dir = run_dir(&o);
    assert!(dir.starts_with(&elsewhere));
    let echoed: toml::Value = toml::from_str(&fs::read_to_string(dir.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed["out"].as_str(), elsewhere.to_str());
}

#[test]
fn bad_config_exits_with_config_error() {
    let (_d, cfg) = setup("unknown_key = 1\n");
    let o = talora(&cfg, &["count-params"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "config");
}

#[test]
fn full_pipeline_and_force() {
    let (_d, cfg) = setup("");
    for cmd in ["pretrain-backbone", "train-base", "train-talora", "eval", "analyze-sim"] {
        let o = talora(&cfg, &[cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = talora(&cfg, &["adapt-target", "--task", "sort-desc", "--shots", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    let fewshot: Value = serde_json::from_str(&fs::read_to_string(dir.join("fewshot-sort-desc-k16.json")).unwrap()).unwrap();
    assert_eq!(fewshot["k"], 16);
    assert!(fewshot["adapted"]["exact_match"].is_number());

    let o = talora(&cfg, &["report"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["backbone.talr", "pretrain_metrics.csv", "base.talr", "talora.talr", "eval.json", "similarity.csv", "report.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }

    let again = talora(&cfg, &["train-base"]);
    assert_eq!(again.status.code(), Some(1));
    assert_eq!(stderr_json(&again)["error"], "output_exists");
    let before = fs::read(dir.join("base.talr")).unwrap();
    let forced = talora(&cfg, &["train-base", "--force"]);
    assert!(forced.status.success());
    assert_eq!(fs::read(dir.join("base.talr")).unwrap(), before);
}

#[test]
fn shots_outside_the_protocol_are_rejected() {
    let (_d, cfg) = setup("");
    let o = talora(&cfg, &["adapt-target", "--task", "sort-desc", "--shots", "8"]);
    assert!(!o.status.success());
}
