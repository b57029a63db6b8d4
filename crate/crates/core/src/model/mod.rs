//! Sequence classifier: 1-D temporal convolution over the joint-angle
//! sequence, an LSTM over the convolution output, and a softmax head on the
//! last hidden state.

mod grad;
mod io;
mod metrics;
mod network;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biomech::FeatureVector;

pub use grad::{batch_gradients, cross_entropy, loss_and_gradients, mean_loss, BatchGradients};
pub use io::{ModelFile, ModelMeta, ModelVariant, AnyModel, MODEL_FORMAT, MODEL_FORMAT_VERSION};
pub use metrics::{evaluate, ClassMetrics, Metrics};
pub use network::{
    argmax, encode_frame, sigmoid, softmax, LinearOp, Matrix, ModelDims, ModelParams, Network, TensorKind,
    TensorView, TensorViewMut, CANDIDATE, FORGET, GATE_NAMES, INPUT, OUTPUT, TENSOR_NAMES,
};
pub use train::{split_indices, train, Adam, EpochStats, Split, SplitFractions, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("class {0} has no samples in the training split")]
    EmptyClass(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A labelled sequence of per-frame features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub features: Vec<FeatureVector>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub class_labels: Vec<String>,
    pub samples: Vec<SequenceSample>,
}

impl Dataset {
    /// Angles per frame, checked to be uniform across the dataset.
    pub fn input_width(&self) -> Result<usize, ModelError> {
        let first = self
            .samples
            .first()
            .and_then(|s| s.features.first())
            .ok_or(ModelError::EmptyBatch)?
            .len();
        let uniform = self.samples.iter().all(|s| s.features.iter().all(|f| f.len() == first));
        if !uniform {
            return Err(ModelError::DimensionMismatch("feature widths differ across samples".into()));
        }
        Ok(first)
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&SequenceSample> {
        indices.iter().map(|&i| &self.samples[i]).collect()
    }
}
