//! Run configuration: one TOML document with a section per stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::TaskCategory;
use crate::grpo::GrpoConfig;
use crate::rewards::RewardConfig;
use crate::sft::SftConfig;
use crate::variance::VarianceConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub per_category: BTreeMap<TaskCategory, usize>,
    pub split_ratio: f64,
    pub allow_replacement: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            per_category: TaskCategory::ALL.iter().map(|&c| (c, 400)).collect(),
            split_ratio: 0.8,
            allow_replacement: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub max_len: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            max_len: crate::policy::DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPathway {
    PassThrough,
    Sft,
    Rl,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Reported in this order; the first one is the comparison baseline.
    pub pathways: Vec<EvalPathway>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pathways: vec![
                EvalPathway::PassThrough,
                EvalPathway::Sft,
                EvalPathway::Rl,
                EvalPathway::Oracle,
            ],
        }
    }
}

/// Optional input locations; unset entries default to files in `out_dir`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sft_checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rl_checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalizer: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub rewards: RewardConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
    pub variance: VarianceConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            rewards: RewardConfig::default(),
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            eval: EvalConfig::default(),
            variance: VarianceConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Builds a config from an optional TOML document plus `key.path=value`
    /// overrides. Values are parsed as TOML and fall back to plain strings.
    pub fn build(document: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = match document {
            Some(text) => toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?,
            None => toml::Value::Table(Default::default()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.grpo.seed = cfg.stage_seed(Stage::Grpo);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::build(Some(&text), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            return Err(Error::InvalidConfig("data: split_ratio must be in (0, 1)".into()));
        }
        if self.policy.max_len == 0 {
            return Err(Error::InvalidConfig("policy: max_len must be at least 1".into()));
        }
        self.rewards.validate()?;
        self.sft.validate()?;
        self.grpo.validate()?;
        self.variance.validate()?;
        Ok(())
    }

    /// Seed of an individual stage, derived from the run seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        use rand::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stage as u64);
        rng.next_u64()
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.paths.dataset.clone().unwrap_or_else(|| self.out_dir.join("dataset.jsonl"))
    }

    pub fn sft_checkpoint_path(&self) -> PathBuf {
        self.paths
            .sft_checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("sft.ckpt.json"))
    }

    pub fn rl_checkpoint_path(&self) -> PathBuf {
        self.paths
            .rl_checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("rl.ckpt.json"))
    }

    pub fn normalizer_path(&self) -> PathBuf {
        self.paths
            .normalizer
            .clone()
            .unwrap_or_else(|| self.out_dir.join("normalizer.json"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Sft = 1,
    Grpo = 2,
    Variance = 3,
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {spec:?} is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("override {spec:?} has an empty key")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = root;
    for p in parents {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override {spec:?} goes through a non-table")))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::InvalidConfig(format!("override {spec:?} goes through a non-table")))?
        .insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::build(None, &[]).unwrap();
        let again = RunConfig::build(Some(&cfg.to_toml()), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.sft.fraction, 8.0 / 9.0);
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::build(
            None,
            &[
                "grpo.steps=0".into(),
                "data.per_category.position=12".into(),
                "out_dir=/tmp/x".into(),
                "grpo.ratio_mode=per_token".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.grpo.steps, 0);
        assert_eq!(cfg.data.per_category[&TaskCategory::Position], 12);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.grpo.ratio_mode, crate::grpo::RatioMode::PerToken);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::build(None, &["grpo.stepz=1".into()]).is_err());
        assert!(RunConfig::build(None, &["nonsense".into()]).is_err());
        assert!(RunConfig::build(None, &["grpo.group_size=1".into()]).is_err());
        assert!(RunConfig::build(Some("[grpo]\nseed = 3\n"), &[]).is_err());
        assert!(RunConfig::build(Some("seed = \"x\""), &[]).is_err());
        assert!(RunConfig::build(None, &["data.per_category.blob=3".into()]).is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.stage_seed(Stage::Sft), cfg.stage_seed(Stage::Grpo));
    }
}
