//! Run configuration, read from TOML. Every section is optional; the defaults
//! are the full-size model and training settings.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shapcast::explainers::SamplerConfig;
use shapcast::model::ModelConfig;
use shapcast::schema::FeatureSchema;
use shapcast::shapley::CoalitionStructure;
use shapcast::training::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SchemaKind {
    #[default]
    Synthetic,
    Real,
}

impl SchemaKind {
    pub fn schema(self) -> FeatureSchema {
        match self {
            SchemaKind::Synthetic => FeatureSchema::synthetic(),
            SchemaKind::Real => FeatureSchema::real(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Exact,
    Permutation,
    CustomMasker,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Exact => "exact",
            Mode::Permutation => "permutation",
            Mode::CustomMasker => "custom-masker",
        }
    }
}

/// Coalition structure used by exact explanations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StructureKind {
    /// Plain Shapley values over all groups.
    #[default]
    Singletons,
    /// Owen values with the past days forming one block.
    DayBlock,
}

impl StructureKind {
    pub fn build(self, schema: &FeatureSchema) -> CoalitionStructure {
        match self {
            StructureKind::Singletons => CoalitionStructure::singletons(schema.n_groups()),
            StructureKind::DayBlock => CoalitionStructure::day_block(schema),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory written by `synth-gen` or `ingest`.
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoint: "model.json".into(),
            output: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSettings {
    pub mode: Mode,
    pub structure: StructureKind,
    /// Training examples kept as background data for the sampling explainers.
    pub background: usize,
    /// Horizon step (0-based) used for dependence data.
    pub step: usize,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        Self {
            mode: Mode::Exact,
            structure: StructureKind::Singletons,
            background: 1000,
            step: shapcast::aggregate::DEPENDENCE_STEP,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Required by every stochastic command; copied into the train and
    /// sampler sections.
    pub seed: Option<u64>,
    pub schema: SchemaKind,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub explain: ExplainSettings,
}

impl RunConfig {
    /// Parses `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.data, &mut cfg.paths.checkpoint, &mut cfg.paths.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text)?;
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
            cfg.sampler.seed = seed;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.sampler.validate()?;
        if cfg.explain.background == 0 {
            bail!("explain.background must be at least 1");
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.context("the config must set `seed` for this command")
    }

    pub fn schema(&self) -> FeatureSchema {
        self.schema.schema()
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

pub fn fingerprint_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration serialises");
    hex::encode(Sha256::digest(&json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert!(cfg.seed().is_err());
    }

    #[test]
    fn seed_propagates_and_fingerprint_changes() {
        let a = RunConfig::from_toml("seed = 3\n[model]\nd_model = 16\nlayers = 1\n").unwrap();
        assert_eq!(a.train.seed, 3);
        assert_eq!(a.sampler.seed, 3);
        assert_eq!(a.model.d_model, 16);
        let b = RunConfig::from_toml("seed = 4\n[model]\nd_model = 16\nlayers = 1\n").unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::from_toml("[train]\nlr = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[model]\nd_model = 15\nheads = 2\n").is_err());
        assert!(RunConfig::from_toml("[sampler]\npermutations = 0\n").is_err());
        assert!(RunConfig::from_toml("[paths]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[explain]\nmode = \"custom-masker\"\n").is_ok());
    }
}
