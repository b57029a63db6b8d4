//! Versioned JSON container for float and quantized models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{ModelDims, ModelParams, Network, TensorKind, TENSOR_NAMES};
use super::ModelError;
use crate::biomech::FeatureVector;
use crate::edge_opt::{QMatrix, QuantizedParams};

pub const MODEL_FORMAT: &str = "asana-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Float,
    Quantized,
    Pruned,
}

impl ModelVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Float => "float",
            ModelVariant::Quantized => "quantized",
            ModelVariant::Pruned => "pruned",
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub class_labels: Vec<String>,
    pub angle_table_version: String,
    /// Sequence length the model was trained on.
    pub window: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Float(ModelParams),
    Quantized(QuantizedParams),
}

impl AnyModel {
    pub fn dims(&self) -> ModelDims {
        match self {
            AnyModel::Float(p) => p.dims,
            AnyModel::Quantized(q) => q.dims,
        }
    }

    pub fn forward(&self, seq: &[FeatureVector]) -> Result<Vec<f64>, ModelError> {
        match self {
            AnyModel::Float(p) => p.forward(seq),
            AnyModel::Quantized(q) => q.forward(seq),
        }
    }

    pub fn predict(&self, seq: &[FeatureVector]) -> Result<(usize, f64), ModelError> {
        match self {
            AnyModel::Float(p) => p.predict(seq),
            AnyModel::Quantized(q) => q.predict(seq),
        }
    }

    pub fn check_consistent(&self) -> Result<(), ModelError> {
        match self {
            AnyModel::Float(p) => p.check_consistent(),
            AnyModel::Quantized(q) => q.check_consistent(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub meta: ModelMeta,
    pub model: AnyModel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    format: String,
    format_version: u32,
    variant: ModelVariant,
    meta: ModelMeta,
    dims: ModelDims,
    tensors: Vec<RawTensor>,
}

/// One tensor, row-major. Quantized weights carry `scale` and `q` instead
/// of `data`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    name: String,
    shape: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<Vec<i8>>,
}

fn format_err(msg: impl Into<String>) -> ModelError {
    ModelError::Format(msg.into())
}

impl ModelFile {
    pub fn new(meta: ModelMeta, model: AnyModel) -> Self {
        Self { meta, model }
    }

    pub fn variant(&self) -> ModelVariant {
        match (&self.model, self.meta.pruned_fraction) {
            (AnyModel::Quantized(_), _) => ModelVariant::Quantized,
            (AnyModel::Float(_), Some(_)) => ModelVariant::Pruned,
            (AnyModel::Float(_), None) => ModelVariant::Float,
        }
    }

    pub fn float_params(&self) -> Option<&ModelParams> {
        match &self.model {
            AnyModel::Float(p) => Some(p),
            AnyModel::Quantized(_) => None,
        }
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        let tensors = match &self.model {
            AnyModel::Float(p) => p
                .tensors()
                .into_iter()
                .map(|t| RawTensor {
                    name: t.name.to_owned(),
                    shape: [t.shape.0, t.shape.1],
                    data: Some(t.data.to_vec()),
                    scale: None,
                    q: None,
                })
                .collect(),
            AnyModel::Quantized(q) => quantized_tensors(q),
        };
        let raw = RawFile {
            format: MODEL_FORMAT.to_owned(),
            format_version: MODEL_FORMAT_VERSION,
            variant: self.variant(),
            meta: self.meta.clone(),
            dims: self.model.dims(),
            tensors,
        };
        serde_json::to_string(&raw).map_err(|e| format_err(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let raw: RawFile = serde_json::from_str(text).map_err(|e| format_err(e.to_string()))?;
        if raw.format != MODEL_FORMAT {
            return Err(format_err(format!("not a model file (format {:?})", raw.format)));
        }
        if raw.format_version != MODEL_FORMAT_VERSION {
            return Err(format_err(format!("unsupported format version {}", raw.format_version)));
        }
        if raw.tensors.len() != TENSOR_NAMES.len() {
            return Err(format_err(format!("expected {} tensors, found {}", TENSOR_NAMES.len(), raw.tensors.len())));
        }
        for (t, want) in raw.tensors.iter().zip(TENSOR_NAMES) {
            if t.name != want {
                return Err(format_err(format!("expected tensor {want}, found {}", t.name)));
            }
        }
        if raw.meta.class_labels.len() != raw.dims.classes {
            return Err(format_err("class label count differs from model classes"));
        }
        let model = if raw.variant == ModelVariant::Quantized {
            AnyModel::Quantized(read_quantized(raw.dims, raw.tensors)?)
        } else {
            AnyModel::Float(read_float(raw.dims, raw.tensors)?)
        };
        model.check_consistent()?;
        let file = Self { meta: raw.meta, model };
        if file.variant() != raw.variant {
            return Err(format_err("variant tag disagrees with metadata"));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn quantized_tensors(q: &QuantizedParams) -> Vec<RawTensor> {
    let weight = |name: &str, m: &QMatrix| RawTensor {
        name: name.to_owned(),
        shape: [m.rows, m.cols],
        data: None,
        scale: Some(m.scale),
        q: Some(m.q.clone()),
    };
    let bias = |name: &str, b: &Vec<f64>| RawTensor {
        name: name.to_owned(),
        shape: [b.len(), 1],
        data: Some(b.clone()),
        scale: None,
        q: None,
    };
    let mut out = vec![weight(TENSOR_NAMES[0], &q.conv_w), bias(TENSOR_NAMES[1], &q.conv_b)];
    out.extend(q.gate_w.iter().enumerate().map(|(k, m)| weight(TENSOR_NAMES[2 + k], m)));
    out.extend(q.gate_b.iter().enumerate().map(|(k, b)| bias(TENSOR_NAMES[6 + k], b)));
    out.push(weight(TENSOR_NAMES[10], &q.head_w));
    out.push(bias(TENSOR_NAMES[11], &q.head_b));
    out
}

fn read_float(dims: ModelDims, tensors: Vec<RawTensor>) -> Result<ModelParams, ModelError> {
    let mut params = ModelParams::zeros(dims);
    for (view, raw) in params.tensors_mut().into_iter().zip(tensors) {
        let data = raw
            .data
            .ok_or_else(|| format_err(format!("{} has no data", raw.name)))?;
        if raw.shape != [view.shape.0, view.shape.1] || data.len() != view.data.len() {
            return Err(format_err(format!("{} has the wrong shape", raw.name)));
        }
        view.data.copy_from_slice(&data);
    }
    Ok(params)
}

fn read_quantized(dims: ModelDims, tensors: Vec<RawTensor>) -> Result<QuantizedParams, ModelError> {
    let template = ModelParams::zeros(dims);
    let mut weights = Vec::with_capacity(6);
    let mut biases = Vec::with_capacity(6);
    for (view, raw) in template.tensors().into_iter().zip(tensors) {
        if raw.shape != [view.shape.0, view.shape.1] {
            return Err(format_err(format!("{} has the wrong shape", raw.name)));
        }
        let len = view.data.len();
        match view.kind {
            TensorKind::Weight => {
                let (Some(scale), Some(q)) = (raw.scale, raw.q) else {
                    return Err(format_err(format!("{} is missing scale or q", raw.name)));
                };
                if q.len() != len || !(scale > 0.0 && scale.is_finite()) || q.contains(&i8::MIN) {
                    return Err(format_err(format!("{} has invalid quantized data", raw.name)));
                }
                weights.push(QMatrix {
                    rows: raw.shape[0],
                    cols: raw.shape[1],
                    scale,
                    q,
                });
            }
            TensorKind::Bias => {
                let data = raw.data.filter(|d| d.len() == len);
                biases.push(data.ok_or_else(|| format_err(format!("{} has invalid data", raw.name)))?);
            }
        }
    }
    let mut w = weights.into_iter();
    let mut b = biases.into_iter();
    let mut next_w = || w.next().expect("six weight tensors");
    let mut next_b = || b.next().expect("six bias tensors");
    let conv_w = next_w();
    let conv_b = next_b();
    let gate_w = [next_w(), next_w(), next_w(), next_w()];
    let gate_b = [next_b(), next_b(), next_b(), next_b()];
    Ok(Network {
        dims,
        conv_w,
        conv_b,
        gate_w,
        gate_b,
        head_w: next_w(),
        head_b: next_b(),
    })
}
