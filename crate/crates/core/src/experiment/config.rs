//! Experiment configuration: one TOML file, every default materialised.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::policy::Architecture;
use crate::ppo::PpoConfig;
use crate::reward::Granularity;
use crate::sft::SftConfig;
use crate::world::{OverlapTag, WorldSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Sft,
    SftExtended,
    Ppo,
    OraclePpo,
    Eval,
    LengthStudy,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Pretrain,
        Stage::Sft,
        Stage::SftExtended,
        Stage::Ppo,
        Stage::OraclePpo,
        Stage::Eval,
        Stage::LengthStudy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::SftExtended => "sft_extended",
            Stage::Ppo => "ppo",
            Stage::OraclePpo => "oracle_ppo",
            Stage::Eval => "eval",
            Stage::LengthStudy => "length_study",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }

    /// Stages that must run before this one.
    pub fn requires(&self) -> &'static [Stage] {
        match self {
            Stage::Pretrain => &[],
            Stage::Sft => &[Stage::Pretrain],
            Stage::SftExtended | Stage::Ppo | Stage::OraclePpo | Stage::Eval | Stage::LengthStudy => {
                &[Stage::Sft]
            }
        }
    }
}

/// How the PPO prompt set relates to the SFT prompts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    /// PPO prompts are fresh prompts disjoint from the SFT prompts.
    #[default]
    Minimum,
    /// A subset of the SFT prompts receives extra annotated demonstrations
    /// (second SFT pass); PPO runs on that subset plus fresh prompts.
    Medium,
    /// SFT sees only part of its demonstrations; PPO runs on every SFT
    /// prompt plus fresh prompts.
    Diminished,
}

impl Overlap {
    pub fn tag(&self) -> OverlapTag {
        match self {
            Overlap::Minimum => OverlapTag::Minimum,
            Overlap::Medium => OverlapTag::Medium,
            Overlap::Diminished => OverlapTag::Diminished,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub architecture: Architecture,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Tabular { order: 1 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Pairs drawn from the pretraining distribution.
    pub samples: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            samples: 4000,
            learning_rate: 1.0,
            batch_size: 32,
            epochs: 4,
        }
    }
}

impl PretrainConfig {
    pub fn as_sft(&self, shuffle_seed: u64) -> SftConfig {
        SftConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            shuffle_seed,
            eval_every: 0,
            grad_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub overlap: Overlap,
    /// Distinct prompts carrying SFT demonstrations.
    pub sft_prompts: usize,
    pub demos: usize,
    /// Fresh prompts added to the PPO prompt set.
    pub extra_ppo_prompts: usize,
    /// Medium overlap: SFT prompts that receive annotated demonstrations.
    pub annotated_prompts: usize,
    pub annotated_demos: usize,
    /// Diminished overlap: demonstrations kept for SFT.
    pub diminish_demos: usize,
    /// Above this many demos a fraction of demo prompts is held out.
    pub heldout_threshold: usize,
    pub heldout_fraction: f64,
    /// Otherwise, this many fresh held-out prompts ...
    pub heldout_prompts: usize,
    /// ... with this many expert pairs on them for held-out NLL.
    pub heldout_demos: usize,
    /// Demonstrations read from a JSONL file instead of sampled.
    pub demos_file: Option<PathBuf>,
    /// PPO prompts read from a JSONL file instead of sampled.
    pub ppo_prompts_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            overlap: Overlap::Minimum,
            sft_prompts: 4,
            demos: 32,
            extra_ppo_prompts: 8,
            annotated_prompts: 2,
            annotated_demos: 16,
            diminish_demos: 16,
            heldout_threshold: 50,
            heldout_fraction: 0.2,
            heldout_prompts: 8,
            heldout_demos: 200,
            demos_file: None,
            ppo_prompts_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftExtendedConfig {
    pub extra_epochs: usize,
}

impl Default for SftExtendedConfig {
    fn default() -> Self {
        Self { extra_epochs: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub granularity: Granularity,
    /// Symmetric per-step clip; absent means no clipping.
    pub clip: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// World seed; the global seed when absent.
    pub world_seed: Option<u64>,
    pub output_dir: PathBuf,
    pub stages: Vec<Stage>,
    pub world: WorldSpec,
    pub policy: PolicyConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub sft: SftConfig,
    pub sft_extended: SftExtendedConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "srppo".into(),
            seed: 0,
            world_seed: None,
            output_dir: PathBuf::from("runs/srppo"),
            stages: vec![Stage::Pretrain, Stage::Sft, Stage::SftExtended, Stage::Ppo, Stage::Eval],
            world: WorldSpec::default(),
            policy: PolicyConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            sft: SftConfig::default(),
            sft_extended: SftExtendedConfig::default(),
            reward: RewardConfig::default(),
            ppo: PpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative data files are resolved against the config's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for f in [&mut cfg.data.demos_file, &mut cfg.data.ppo_prompts_file].into_iter().flatten() {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        Ok(cfg)
    }

    /// Canonical text with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn world_seed(&self) -> u64 {
        self.world_seed.unwrap_or(self.seed)
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    /// Stage dependencies, per-stage settings and referenced files.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("stages: at least one stage is required".into()));
        }
        let mut sorted = self.stages.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.stages.len() {
            return Err(Error::Config("stages: duplicate stage".into()));
        }
        for s in &self.stages {
            for dep in s.requires() {
                if !self.has(*dep) {
                    return Err(Error::Config(format!(
                        "stages: `{}` requires `{}`",
                        s.as_str(),
                        dep.as_str()
                    )));
                }
            }
        }
        self.world.validate().map_err(|e| prefix("world", e))?;
        self.policy
            .architecture
            .validate(crate::sequence::Vocabulary::new(self.world.vocab_size)?)
            .map_err(|e| prefix("policy.architecture", e))?;
        self.pretrain.as_sft(0).validate().map_err(|e| prefix("pretrain", e))?;
        if self.pretrain.samples == 0 {
            return Err(Error::Config("pretrain.samples must be >= 1".into()));
        }
        self.sft.validate().map_err(|e| prefix("sft", e))?;
        self.ppo.validate().map_err(|e| prefix("ppo", e))?;
        let d = &self.data;
        if d.sft_prompts == 0 {
            return Err(Error::Config("data.sft_prompts must be >= 1".into()));
        }
        if d.demos == 0 && d.demos_file.is_none() {
            return Err(Error::Config("data.demos must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&d.heldout_fraction) {
            return Err(Error::Config("data.heldout_fraction must lie in [0, 1)".into()));
        }
        match d.overlap {
            Overlap::Medium if d.annotated_prompts == 0 || d.annotated_demos == 0 => {
                return Err(Error::Config(
                    "data.annotated_prompts and data.annotated_demos must be >= 1 for medium overlap".into(),
                ));
            }
            Overlap::Diminished if d.diminish_demos == 0 => {
                return Err(Error::Config("data.diminish_demos must be >= 1 for diminished overlap".into()));
            }
            _ => {}
        }
        if let Some(c) = self.reward.clip {
            if !(c > 0.0) {
                return Err(Error::Config("reward.clip must be > 0".into()));
            }
        }
        if self.eval.samples == 0 {
            return Err(Error::Config("eval.samples must be >= 1".into()));
        }
        let missing: Vec<PathBuf> = [&d.demos_file, &d.ppo_prompts_file]
            .into_iter()
            .flatten()
            .filter(|p| !p.exists())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingArtifacts(missing));
        }
        Ok(())
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{section}: {m}")),
        other => other,
    }
}
