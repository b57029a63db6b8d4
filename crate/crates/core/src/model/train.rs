//! Mini-batch Adam training with a seeded train/validation/test split.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grad::{batch_gradients, cross_entropy};
use super::network::{argmax, Matrix, ModelDims, ModelParams, FORGET};
use super::{Dataset, ModelError, SequenceSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            validation: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub split: SplitFractions,
    pub seed: u64,
    pub conv_channels: usize,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            split: SplitFractions::default(),
            seed: 42,
            conv_channels: 16,
            hidden: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let s = self.split;
        let fractions_ok = [s.train, s.validation, s.test].iter().all(|f| (0.0..=1.0).contains(f))
            && (s.train + s.validation + s.test - 1.0).abs() < 1e-9
            && s.train > 0.0;
        if !fractions_ok {
            return Err(ModelError::InvalidConfig(format!(
                "split {}/{}/{} must be non-negative and sum to 1",
                s.train, s.validation, s.test
            )));
        }
        // NaN fails the comparison
        if !(self.learning_rate >= 0.0) {
            return Err(ModelError::InvalidConfig("learning rate must be non-negative".into()));
        }
        if self.batch_size == 0 || self.conv_channels == 0 || self.hidden == 0 {
            return Err(ModelError::InvalidConfig(
                "batch size and layer widths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn dims(&self, input: usize, classes: usize) -> ModelDims {
        ModelDims::new(input, self.conv_channels, self.hidden, classes)
    }
}

/// Sample indices of the three partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`, cut into train/validation/test.
pub fn split_indices(n: usize, fractions: SplitFractions, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut split_rng(seed));
    let n_train = (((n as f64) * fractions.train).round() as usize).min(n);
    let n_val = (((n as f64) * fractions.validation).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let validation = idx.split_off(n_train);
    Split {
        train: idx,
        validation,
        test,
    }
}

fn split_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    rng
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, forget-gate bias 1.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        let mut params = ModelParams::zeros(dims);
        let glorot = |m: &mut Matrix, rng: &mut R| {
            let a = (6.0 / (m.rows + m.cols) as f64).sqrt();
            m.data.iter_mut().for_each(|w| *w = rng.random_range(-a..a));
        };
        glorot(&mut params.conv_w, rng);
        for m in params.gate_w.iter_mut() {
            glorot(m, rng);
        }
        glorot(&mut params.head_w, rng);
        params.gate_b[FORGET].iter_mut().for_each(|b| *b = 1.0);
        params
    }

    pub fn init_seeded(dims: ModelDims, seed: u64) -> Self {
        Self::init(dims, &mut init_rng(seed))
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(dims: ModelDims, config: &TrainConfig) -> Self {
        Self {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            m: ModelParams::zeros(dims),
            v: ModelParams::zeros(dims),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powi(self.step);
        let bias2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.learning_rate, self.epsilon);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for (((p, &g), m), v) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss over the epoch's batches, measured before each update.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation accuracy.
    pub params: ModelParams,
    pub initial: ModelParams,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub split: Split,
}

fn loss_and_accuracy(params: &ModelParams, samples: &[&SequenceSample]) -> Result<(f64, f64), ModelError> {
    let mut loss = 0.0;
    let mut correct = 0;
    for s in samples {
        let trace = params.run(&s.features)?;
        loss += cross_entropy(&trace.logits, s.label);
        if argmax(&trace.probs).0 == s.label {
            correct += 1;
        }
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    let classes = dataset.class_labels.len();
    if classes == 0 || dataset.samples.len() < classes {
        return Err(ModelError::InvalidConfig(format!(
            "{} samples cannot cover {} classes",
            dataset.samples.len(),
            classes
        )));
    }
    let input = dataset.input_width()?;
    let split = split_indices(dataset.samples.len(), config.split, config.seed);
    for class in 0..classes {
        if !split.train.iter().any(|&i| dataset.samples[i].label == class) {
            return Err(ModelError::EmptyClass(dataset.class_labels[class].clone()));
        }
    }

    let dims = config.dims(input, classes);
    let initial = ModelParams::init_seeded(dims, config.seed);
    let mut params = initial.clone();
    let mut adam = Adam::new(dims, config);
    let mut order = split.train.clone();
    let mut rng = shuffle_rng(config.seed);
    let val: Vec<&SequenceSample> = split.validation.iter().map(|&i| &dataset.samples[i]).collect();

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SequenceSample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let out = batch_gradients(&batch, &params)?;
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct;
            adam.step(&mut params, &out.grads);
        }
        let n = order.len() as f64;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = loss_and_accuracy(&params, &val)?;
            (Some(l), Some(a))
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        };
        let selection = stats.val_accuracy.unwrap_or(stats.train_accuracy);
        if best.as_ref().is_none_or(|(b, ..)| selection > *b) {
            best = Some((selection, epoch, params.clone()));
        }
        history.push(stats);
    }

    let (best_epoch, params) = match best {
        Some((_, epoch, p)) => (epoch, p),
        None => (0, params),
    };
    Ok(TrainOutcome {
        params,
        initial,
        history,
        best_epoch,
        split,
    })
}
