//! Versioned JSON model files and the bundled pretrained registry.
//!
//! Files are UTF-8 JSON with a fixed key order. Weights are stored as
//! shortest round-trip single-precision decimals (integral values without a
//! fractional part), so saving the same model always yields the same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::datasets::{Dataset, DatasetKind};
use crate::diffusion::{Objective, ScheduleConfig};
use crate::geometry::Bounds;
use crate::model::{DenoiserModel, Provenance};
use crate::nn::{Dense, MlpConfig, MlpParams};
use crate::scalar::Scalar;
use crate::trainer::{train_with_provenance, EpochSnapshot, TrainConfig, TrainError};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model file at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("truncated model file: field `{field}` is incomplete or missing")]
    Truncated { field: String },
    #[error("model file is missing field `{0}`")]
    MissingField(String),
    #[error("unsupported model format version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: String },
    #[error("invalid field `{field}`: {message}")]
    InvalidField { field: String, message: String },
    #[error("malformed number at `{field}[{index}]`: {found}")]
    MalformedNumber { field: String, index: usize, found: String },
    #[error("shape mismatch in layer {layer}: {message}")]
    Shape { layer: usize, message: String },
    #[error("model cannot be saved: {0}")]
    Unsavable(String),
    #[error("unknown pretrained model `{0}`")]
    UnknownPretrained(String),
    #[error(transparent)]
    Model(#[from] crate::Error),
}

fn serialize_f32_vec<S: Serializer>(values: &[f32], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(values.len()))?;
    for &v in values {
        if v == v.trunc() && v.abs() < 1.0e7 {
            seq.serialize_element(&(v as i64))?;
        } else {
            seq.serialize_element(&v)?;
        }
    }
    seq.end()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    #[serde(serialize_with = "serialize_f32_vec")]
    pub weight: Vec<f32>,
    #[serde(serialize_with = "serialize_f32_vec")]
    pub bias: Vec<f32>,
}

/// On-disk representation of a [`DenoiserModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u64,
    pub objective: Objective,
    pub dataset: Option<DatasetKind>,
    pub network: MlpConfig,
    pub schedule: Option<ScheduleConfig>,
    pub data_bounds: Bounds<f64>,
    pub provenance: Option<Provenance>,
    pub layers: Vec<LayerRecord>,
}

/// Keys in file order; all are required (nullable ones may be `null`).
const KEYS: [&str; 8] = [
    "format_version",
    "objective",
    "dataset",
    "network",
    "schedule",
    "data_bounds",
    "provenance",
    "layers",
];

impl ModelFile {
    pub fn from_model<F: Scalar>(model: &DenoiserModel<F>) -> Result<Self, StoreError> {
        model.validate()?;
        if !model.params.all_finite() {
            return Err(StoreError::Unsavable("non-finite parameters".into()));
        }
        let to32 = |v: &[F]| v.iter().map(|x| x.to_f64_lossy() as f32).collect();
        Ok(Self {
            format_version: FORMAT_VERSION,
            objective: model.objective,
            dataset: model.provenance.as_ref().map(|p| p.dataset),
            network: model.params.config.clone(),
            schedule: model.schedule.as_ref().map(|s| s.config),
            data_bounds: model.data_bounds.cast(),
            provenance: model.provenance.clone(),
            layers: model
                .params
                .layers
                .iter()
                .map(|l| LayerRecord {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    weight: to32(&l.weight),
                    bias: to32(&l.bias),
                })
                .collect(),
        })
    }

    pub fn to_model<F: Scalar>(&self) -> Result<DenoiserModel<F>, StoreError> {
        if self.format_version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion {
                found: self.format_version.to_string(),
            });
        }
        self.network.validate()?;
        let shapes = self.network.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(StoreError::Shape {
                layer: self.layers.len().min(shapes.len()),
                message: format!(
                    "network declares {} layers, file has {}",
                    shapes.len(),
                    self.layers.len()
                ),
            });
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (idx, (rec, &(i, o))) in self.layers.iter().zip(&shapes).enumerate() {
            if (rec.in_dim, rec.out_dim) != (i, o) {
                return Err(StoreError::Shape {
                    layer: idx,
                    message: format!("declared {}x{}, network expects {}x{}", rec.out_dim, rec.in_dim, o, i),
                });
            }
            if rec.weight.len() != i * o || rec.bias.len() != o {
                return Err(StoreError::Shape {
                    layer: idx,
                    message: format!(
                        "weight has {} entries (expected {}), bias has {} (expected {})",
                        rec.weight.len(),
                        i * o,
                        rec.bias.len(),
                        o
                    ),
                });
            }
            let up = |v: &[f32]| v.iter().map(|&x| F::of(x as f64)).collect();
            layers.push(Dense {
                in_dim: i,
                out_dim: o,
                weight: up(&rec.weight),
                bias: up(&rec.bias),
            });
        }
        let params = MlpParams {
            config: self.network.clone(),
            layers,
        };
        let schedule = self.schedule.map(|s| s.build()).transpose()?;
        let mut model = DenoiserModel::new(params, self.objective, schedule, self.data_bounds.cast())?;
        model.provenance = self.provenance.clone();
        Ok(model)
    }

    /// Canonical bytes: pretty-printed JSON plus a trailing newline.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("model file serializes");
        out.push(b'\n');
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, StoreError> {
        let value: Value = serde_json::from_slice(bytes).map_err(|e| {
            if e.classify() == serde_json::error::Category::Eof {
                StoreError::Truncated {
                    field: truncated_field(bytes),
                }
            } else {
                StoreError::Syntax {
                    line: e.line(),
                    column: e.column(),
                    message: e.to_string(),
                }
            }
        })?;
        let Value::Object(obj) = value else {
            return Err(StoreError::InvalidField {
                field: "<root>".into(),
                message: "expected a JSON object".into(),
            });
        };
        let version = obj
            .get("format_version")
            .ok_or_else(|| StoreError::MissingField("format_version".into()))?;
        if version.as_u64() != Some(FORMAT_VERSION) {
            return Err(StoreError::UnsupportedVersion {
                found: version.to_string(),
            });
        }
        for key in KEYS {
            if !obj.contains_key(key) {
                return Err(StoreError::MissingField(key.into()));
            }
        }
        check_numbers(&obj)?;
        Ok(Self {
            format_version: FORMAT_VERSION,
            objective: field(&obj, "objective")?,
            dataset: field(&obj, "dataset")?,
            network: field(&obj, "network")?,
            schedule: field(&obj, "schedule")?,
            data_bounds: field(&obj, "data_bounds")?,
            provenance: field(&obj, "provenance")?,
            layers: field(&obj, "layers")?,
        })
    }
}

fn field<T: serde::de::DeserializeOwned>(obj: &Map<String, Value>, key: &str) -> Result<T, StoreError> {
    serde_json::from_value(obj[key].clone()).map_err(|e| StoreError::InvalidField {
        field: key.into(),
        message: e.to_string(),
    })
}

/// Every weight must be a JSON number representable in single precision.
fn check_numbers(obj: &Map<String, Value>) -> Result<(), StoreError> {
    let Some(layers) = obj["layers"].as_array() else {
        return Ok(());
    };
    for (l, layer) in layers.iter().enumerate() {
        for part in ["weight", "bias"] {
            let Some(values) = layer.get(part).and_then(Value::as_array) else {
                continue;
            };
            for (index, v) in values.iter().enumerate() {
                let ok = v.as_f64().is_some_and(|x| (x as f32).is_finite());
                if !ok {
                    return Err(StoreError::MalformedNumber {
                        field: format!("layers[{l}].{part}"),
                        index,
                        found: v.to_string(),
                    });
                }
            }
        }
    }
    Ok(())
}

/// The last top-level key whose name appears in a truncated file, or the
/// first key when none does.
fn truncated_field(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    KEYS.iter()
        .rev()
        .find(|k| text.contains(&format!("\"{k}\":")))
        .unwrap_or(&KEYS[0])
        .to_string()
}

/// Serializes a model to canonical bytes.
pub fn model_to_bytes<F: Scalar>(model: &DenoiserModel<F>) -> Result<Vec<u8>, StoreError> {
    Ok(ModelFile::from_model(model)?.to_bytes())
}

/// Writes a model file and returns the bytes written.
pub fn save_model<F: Scalar>(model: &DenoiserModel<F>, path: impl AsRef<Path>) -> Result<Vec<u8>, StoreError> {
    let bytes = model_to_bytes(model)?;
    let path = path.as_ref();
    std::fs::write(path, &bytes).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(bytes)
}

pub fn load_model<F: Scalar>(bytes: &[u8]) -> Result<DenoiserModel<F>, StoreError> {
    ModelFile::parse(bytes)?.to_model()
}

pub fn load_model_file<F: Scalar>(path: impl AsRef<Path>) -> Result<DenoiserModel<F>, StoreError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_model(&bytes)
}

/// How a bundled model is produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedRecipe {
    pub name: &'static str,
    pub dataset: DatasetKind,
    pub dataset_n: usize,
    pub dataset_seed: u64,
    pub objective: Objective,
    pub train: TrainConfig,
}

/// Recipes for the four bundled models.
pub fn pretrained_recipes() -> Vec<PretrainedRecipe> {
    let train = TrainConfig {
        epochs: 150,
        seed: 7,
        ..TrainConfig::default()
    };
    [
        ("smiley_noise", DatasetKind::Smiley, Objective::NoisePrediction),
        ("smiley_flow", DatasetKind::Smiley, Objective::FlowMatching),
        ("three_dots_noise", DatasetKind::ThreeDots, Objective::NoisePrediction),
        ("three_dots_flow", DatasetKind::ThreeDots, Objective::FlowMatching),
    ]
    .into_iter()
    .map(|(name, dataset, objective)| PretrainedRecipe {
        name,
        dataset,
        dataset_n: 4000,
        dataset_seed: 2024,
        objective,
        train: train.clone(),
    })
    .collect()
}

const BUNDLED: [(&str, &str); 4] = [
    ("smiley_noise", include_str!("../pretrained/smiley_noise.json")),
    ("smiley_flow", include_str!("../pretrained/smiley_flow.json")),
    ("three_dots_noise", include_str!("../pretrained/three_dots_noise.json")),
    ("three_dots_flow", include_str!("../pretrained/three_dots_flow.json")),
];

/// Parses every bundled model file.
pub fn pretrained_registry() -> Result<Vec<(String, ModelFile)>, StoreError> {
    BUNDLED
        .iter()
        .map(|(name, text)| Ok((name.to_string(), ModelFile::parse(text.as_bytes())?)))
        .collect()
}

pub fn pretrained_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

pub fn load_pretrained<F: Scalar>(name: &str) -> Result<DenoiserModel<F>, StoreError> {
    let (_, text) = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| StoreError::UnknownPretrained(name.into()))?;
    load_model(text.as_bytes())
}

/// Trains one recipe from scratch.
pub fn train_recipe<C>(recipe: &PretrainedRecipe, on_epoch: C) -> Result<DenoiserModel<f64>, TrainError>
where
    C: FnMut(&EpochSnapshot<f64>),
{
    let dataset: Dataset<f64> = Dataset::builtin(recipe.dataset, recipe.dataset_n, recipe.dataset_seed)?;
    let out = train_with_provenance(
        &dataset,
        recipe.dataset_n,
        recipe.dataset_seed,
        recipe.objective,
        &recipe.train,
        on_epoch,
        None,
    )?;
    Ok(out.model)
}
