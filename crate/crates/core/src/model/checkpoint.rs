use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::schema::{FeatureSchema, Standardizer};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Everything needed to run a trained model: weights, configuration, schema
/// and the standardizer fitted on its training data. Stored as JSON; `f32`
/// values are written in shortest round-trip form so reloads are bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub schema_fingerprint: String,
    pub standardizer: Standardizer,
    /// Free-form provenance such as the training flavor.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, standardizer: &Standardizer) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: params.config().clone(),
            schema: params.schema().clone(),
            schema_fingerprint: params.schema().fingerprint(),
            standardizer: standardizer.clone(),
            metadata: BTreeMap::new(),
            tensors: params
                .names()
                .iter()
                .zip(params.tensors())
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(self.version));
        }
        if self.schema.fingerprint() != self.schema_fingerprint {
            return Err(Error::Schema(
                "checkpoint schema fingerprint does not match its schema".into(),
            ));
        }
        let named = self
            .tensors
            .iter()
            .map(|t| Ok((t.name.clone(), Tensor::new(t.shape.clone(), t.data.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        ModelParams::from_named(&self.config, &self.schema, named)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(c.version));
        }
        Ok(c)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Replaces `path` with `bytes` so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
