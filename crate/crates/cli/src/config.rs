//! Run configuration: TOML file, then command-line flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use talora::backbone::{BackboneConfig, PretrainConfig};
use talora::talora::LoraConfig;
use talora::taskgen::SuiteConfig;
use talora::training::{Dtype, TrainConfig};

use crate::stages::CliError;

pub const DEFAULT_SEED: u64 = 42;
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";
/// Hex digits of the config hash in a run directory name.
const HASH_CHARS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Parent directory of run directories.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Every training stage derives its randomness from this.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_dtype: Dtype,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub suite: SuiteConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

/// Raw file contents; `seed` stays optional so precedence can be reported.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    out: Option<PathBuf>,
    seed: Option<u64>,
    #[serde(default)]
    checkpoint_dtype: Dtype,
    #[serde(default)]
    backbone: BackboneConfig,
    #[serde(default)]
    pretrain: PretrainConfig,
    #[serde(default)]
    lora: LoraConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    suite: SuiteConfig,
}

pub struct Overrides {
    pub seed: Option<u64>,
    pub seed_env: Option<String>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedSource {
    Flag,
    Env,
    Config,
    Default,
}

impl fmt::Display for SeedSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeedSource::Flag => "--seed",
            SeedSource::Env => "TALORA_SEED",
            SeedSource::Config => "config file",
            SeedSource::Default => "default",
        })
    }
}

pub struct Resolved {
    pub config: RunConfig,
    pub seed_source: SeedSource,
}

pub fn resolve(path: &Path, o: &Overrides) -> Result<Resolved, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let file: FileConfig = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))?;
    let env_seed = match &o.seed_env {
        Some(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliError::config(format!("TALORA_SEED={s:?} is not an unsigned integer")))?,
        ),
        None => None,
    };
    let (seed, seed_source) = match (o.seed, env_seed, file.seed) {
        (Some(s), _, _) => (s, SeedSource::Flag),
        (None, Some(s), _) => (s, SeedSource::Env),
        (None, None, Some(s)) => (s, SeedSource::Config),
        (None, None, None) => (DEFAULT_SEED, SeedSource::Default),
    };
    let mut train = file.train;
    train.seed = seed;
    let config = RunConfig {
        out: o.out.clone().or(file.out).unwrap_or_else(default_out),
        seed,
        checkpoint_dtype: file.checkpoint_dtype,
        backbone: file.backbone,
        pretrain: file.pretrain,
        lora: file.lora,
        train,
        suite: file.suite,
    };
    config.validate()?;
    Ok(Resolved { config, seed_source })
}

impl RunConfig {
    fn validate(&self) -> Result<(), CliError> {
        self.backbone.validate()?;
        self.lora.validate()?;
        self.train.validate()?;
        // TOML integers are signed 64-bit.
        if i64::try_from(self.seed).is_err() {
            return Err(CliError::config(format!("seed {} does not fit in a signed 64-bit integer", self.seed)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    /// Hash of everything that affects results; `out` is excluded so a run
    /// can be moved.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        hex::encode(digest)[..HASH_CHARS].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(format!("run-{}", self.hash()))
    }
}

impl Resolved {
    /// Creates the run directory and echoes the resolved config into it.
    pub fn prepare_run_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.config.run_dir();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(RESOLVED_CONFIG_FILE), self.config.to_toml())?;
        Ok(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("cfg.toml");
        fs::write(&p, text).unwrap();
        p
    }

    fn none() -> Overrides {
        Overrides {
            seed: None,
            seed_env: None,
            out: None,
        }
    }

    #[test]
    fn seed_precedence() {
        let d = tempfile::tempdir().unwrap();
        let with_seed = write(d.path(), "seed = 5\n");
        let r = resolve(&with_seed, &none()).unwrap();
        assert_eq!((r.config.seed, r.seed_source), (5, SeedSource::Config));
        assert_eq!(r.config.train.seed, 5);

        let env = Overrides {
            seed_env: Some("9".into()),
            ..none()
        };
        let r = resolve(&with_seed, &env).unwrap();
        assert_eq!((r.config.seed, r.seed_source), (9, SeedSource::Env));

        let flag = Overrides { seed: Some(11), ..env };
        let r = resolve(&with_seed, &flag).unwrap();
        assert_eq!((r.config.seed, r.seed_source), (11, SeedSource::Flag));

        let bare = write(d.path(), "");
        let r = resolve(&bare, &none()).unwrap();
        assert_eq!((r.config.seed, r.seed_source), (DEFAULT_SEED, SeedSource::Default));
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        let d = tempfile::tempdir().unwrap();
        let bad_env = Overrides {
            seed_env: Some("x".into()),
            ..none()
        };
        assert!(resolve(&write(d.path(), ""), &bad_env).is_err());
        assert!(resolve(&write(d.path(), "no_such_key = 1\n"), &none()).is_err());
        assert!(resolve(&write(d.path(), "[backbone]\nmodel_dim = 30\nn_heads = 4\n"), &none()).is_err());
        assert!(resolve(&d.path().join("missing.toml"), &none()).is_err());
    }

    #[test]
    fn hash_tracks_settings_but_not_location() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "[train]\nbase_steps = 7\n");
        let a = resolve(&p, &none()).unwrap().config;
        let moved = resolve(
            &p,
            &Overrides {
                out: Some("elsewhere".into()),
                ..none()
            },
        )
        .unwrap()
        .config;
        assert_eq!(a.hash(), moved.hash());
        assert_ne!(a.run_dir(), moved.run_dir());
        let reseeded = resolve(&p, &Overrides { seed: Some(1), ..none() }).unwrap().config;
        assert_ne!(a.hash(), reseeded.hash());
        assert_eq!(a.train.base_steps, 7);
    }

    #[test]
    fn echoed_config_reads_back() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), &format!("out = {:?}\nseed = 3\n", d.path().join("runs")));
        let r = resolve(&p, &none()).unwrap();
        let dir = r.prepare_run_dir().unwrap();
        let echoed: RunConfig = toml::from_str(&fs::read_to_string(dir.join(RESOLVED_CONFIG_FILE)).unwrap()).unwrap();
        assert_eq!(echoed, r.config);
    }
}
