use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, TrainingMetadata};
use super::spec::ModelSpec;
use crate::datapipe::{ClassMap, NormalizationStats};
use crate::error::{Error, Result};
use crate::numcore::{RunningStats, Tensor};

pub const MODEL_FORMAT: &str = "openset-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    spec: ModelSpec,
    class_ids: Option<Vec<i64>>,
    normalization: Option<NormalizationStats>,
    metadata: TrainingMetadata,
    parameters: Vec<NamedTensor>,
    buffers: Vec<NamedStats>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    #[serde(flatten)]
    value: Tensor,
}

#[derive(Serialize, Deserialize)]
struct NamedStats {
    name: String,
    #[serde(flatten)]
    stats: RunningStats,
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            spec: self.spec().clone(),
            class_ids: self.classes.as_ref().map(|c| c.ids().to_vec()),
            normalization: self.normalization.clone(),
            metadata: self.metadata.clone(),
            parameters: self
                .params()
                .iter()
                .map(|(n, t)| NamedTensor {
                    name: n.to_string(),
                    value: t.clone(),
                })
                .collect(),
            buffers: self
                .buffers()
                .map(|(n, s)| NamedStats {
                    name: n.to_string(),
                    stats: s.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let format = raw.get("format").and_then(|v| v.as_str()).unwrap_or("");
        if format != MODEL_FORMAT {
            return Err(Error::Invalid(format!("not a model file (format `{format}`)")));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != MODEL_VERSION {
            return Err(Error::Version {
                kind: "model",
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_value(raw)?;
        let mut model = Model::from_parts(
            file.spec,
            file.parameters.into_iter().map(|p| (p.name, p.value)).collect(),
            file.buffers.into_iter().map(|b| (b.name, b.stats)).collect(),
        )?;
        if let Some(ids) = file.class_ids {
            let map = ClassMap::new(ids)?;
            if map.len() != model.spec().classes {
                return Err(Error::SpecMismatch(format!(
                    "class map lists {} classes, head has {}",
                    map.len(),
                    model.spec().classes
                )));
            }
            model.classes = Some(map);
        }
        model.normalization = file.normalization;
        model.metadata = file.metadata;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_json(&text)
    }

    /// Load and check the head against an expected class count.
    pub fn load_expecting(path: impl AsRef<Path>, classes: usize) -> Result<Self> {
        let model = Model::load(path)?;
        if model.spec().classes != classes {
            return Err(Error::SpecMismatch(format!(
                "model was built for {} classes, expected {classes}",
                model.spec().classes
            )));
        }
        Ok(model)
    }
}
