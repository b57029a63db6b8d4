use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::biomech::FeatureVector;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self += a ⊗ b`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!((a.len(), b.len()), (self.rows, self.cols));
        for (row, &ai) in self.data.chunks_exact_mut(self.cols).zip(a) {
            if ai == 0.0 {
                continue;
            }
            for (w, &bj) in row.iter_mut().zip(b) {
                *w += ai * bj;
            }
        }
    }

    /// `out += selfᵀ · v`
    pub fn add_transposed_mul(&self, v: &[f64], out: &mut [f64]) {
        for (row, &vi) in self.data.chunks_exact(self.cols).zip(v) {
            if vi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += vi * w;
            }
        }
    }
}

/// A weight matrix that can multiply a vector. Implemented by the
/// double-precision [`Matrix`] and by the int8 quantized matrix.
pub trait LinearOp {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `out = self · x + bias`
    fn affine(&self, x: &[f64], bias: &[f64], out: &mut [f64]);
}

impl LinearOp for Matrix {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn affine(&self, x: &[f64], bias: &[f64], out: &mut [f64]) {
        for ((o, row), &b) in out.iter_mut().zip(self.data.chunks_exact(self.cols)).zip(bias) {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Angles per frame.
    pub input: usize,
    pub conv_channels: usize,
    pub kernel_width: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn new(input: usize, conv_channels: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input,
            conv_channels,
            kernel_width: 3,
            hidden,
            classes,
        }
    }

    /// Length of the `[z; h]` vector the gates see.
    pub fn gate_input(&self) -> usize {
        self.conv_channels + self.hidden
    }

    pub fn min_frames(&self) -> usize {
        self.kernel_width
    }
}

pub const GATE_NAMES: [&str; 4] = ["input", "forget", "output", "candidate"];
pub const INPUT: usize = 0;
pub const FORGET: usize = 1;
pub const OUTPUT: usize = 2;
pub const CANDIDATE: usize = 3;

/// Temporal convolution, LSTM and softmax head over some weight storage.
///
/// The convolution weight has one row per output channel; its columns are
/// the `kernel_width` consecutive input frames concatenated oldest first.
/// Each gate matrix acts on `[conv output; previous hidden state]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<W> {
    pub dims: ModelDims,
    pub conv_w: W,
    pub conv_b: Vec<f64>,
    /// Input, forget, output and candidate gates.
    pub gate_w: [W; 4],
    pub gate_b: [Vec<f64>; 4],
    pub head_w: W,
    pub head_b: Vec<f64>,
}

/// Double-precision parameters; also used for gradients and optimizer moments.
pub type ModelParams = Network<Matrix>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
}

/// Named view of one parameter tensor.
pub struct TensorView<'a> {
    pub name: &'static str,
    pub kind: TensorKind,
    pub shape: (usize, usize),
    pub data: &'a [f64],
}

pub struct TensorViewMut<'a> {
    pub name: &'static str,
    pub kind: TensorKind,
    pub shape: (usize, usize),
    pub data: &'a mut [f64],
}

pub const TENSOR_NAMES: [&str; 12] = [
    "conv.weight",
    "conv.bias",
    "lstm.input.weight",
    "lstm.forget.weight",
    "lstm.output.weight",
    "lstm.candidate.weight",
    "lstm.input.bias",
    "lstm.forget.bias",
    "lstm.output.bias",
    "lstm.candidate.bias",
    "head.weight",
    "head.bias",
];

impl<W: LinearOp> Network<W> {
    pub fn check_consistent(&self) -> Result<(), ModelError> {
        let d = &self.dims;
        let mismatch = |what: &str| Err(ModelError::DimensionMismatch(what.to_owned()));
        if d.kernel_width == 0 || d.input == 0 || d.conv_channels == 0 || d.hidden == 0 || d.classes == 0 {
            return mismatch("all dimensions must be positive");
        }
        if self.conv_w.rows() != d.conv_channels || self.conv_w.cols() != d.input * d.kernel_width {
            return mismatch("conv weight shape");
        }
        if self.conv_b.len() != d.conv_channels {
            return mismatch("conv bias length");
        }
        for (w, b) in self.gate_w.iter().zip(&self.gate_b) {
            if w.rows() != d.hidden || w.cols() != d.gate_input() || b.len() != d.hidden {
                return mismatch("lstm gate shape");
            }
        }
        if self.head_w.rows() != d.classes || self.head_w.cols() != d.hidden || self.head_b.len() != d.classes {
            return mismatch("head shape");
        }
        Ok(())
    }

    /// One LSTM step on conv output `x`.
    pub fn lstm_step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let d = &self.dims;
        if x.len() != d.conv_channels || h_prev.len() != d.hidden || c_prev.len() != d.hidden {
            return Err(ModelError::DimensionMismatch(format!(
                "lstm_step expects x[{}], h[{}], c[{}]; got x[{}], h[{}], c[{}]",
                d.conv_channels,
                d.hidden,
                d.hidden,
                x.len(),
                h_prev.len(),
                c_prev.len()
            )));
        }
        let mut v = Vec::with_capacity(d.gate_input());
        v.extend_from_slice(x);
        v.extend_from_slice(h_prev);
        let step = self.lstm_cell(&v, c_prev);
        Ok((step.h, step.c))
    }

    pub(crate) fn lstm_cell(&self, v: &[f64], c_prev: &[f64]) -> LstmStep {
        let hdim = self.dims.hidden;
        let mut gates: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hdim]);
        for ((w, b), g) in self.gate_w.iter().zip(&self.gate_b).zip(gates.iter_mut()) {
            w.affine(v, b, g);
        }
        for (k, g) in gates.iter_mut().enumerate() {
            let f: fn(f64) -> f64 = if k == CANDIDATE { f64::tanh } else { sigmoid };
            g.iter_mut().for_each(|a| *a = f(*a));
        }
        let [i, f, o, g] = &gates;
        let c: Vec<f64> = (0..hdim).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|x| x.tanh()).collect();
        let h = (0..hdim).map(|j| o[j] * tanh_c[j]).collect();
        LstmStep {
            gates,
            c,
            tanh_c,
            h,
        }
    }

    /// Convolution output for every valid window position.
    pub(crate) fn conv(&self, inputs: &[Vec<f64>]) -> Vec<ConvStep> {
        let d = &self.dims;
        let windows = inputs.len() + 1 - d.kernel_width;
        (0..windows)
            .map(|tau| {
                let window: Vec<f64> = inputs[tau..tau + d.kernel_width].concat();
                let mut pre = vec![0.0; d.conv_channels];
                self.conv_w.affine(&window, &self.conv_b, &mut pre);
                let out = pre.iter().map(|&p| p.max(0.0)).collect();
                ConvStep { window, pre, out }
            })
            .collect()
    }

    pub(crate) fn check_sequence(&self, seq: &[FeatureVector]) -> Result<(), ModelError> {
        let d = &self.dims;
        if seq.len() < d.min_frames() {
            return Err(ModelError::DimensionMismatch(format!(
                "sequence of {} frames is shorter than the conv width {}",
                seq.len(),
                d.kernel_width
            )));
        }
        if let Some(bad) = seq.iter().find(|f| f.angles.len() != d.input || f.mask.len() != d.input) {
            return Err(ModelError::DimensionMismatch(format!(
                "frame has {} angles, model expects {}",
                bad.angles.len(),
                d.input
            )));
        }
        Ok(())
    }

    pub(crate) fn run(&self, seq: &[FeatureVector]) -> Result<Trace, ModelError> {
        self.check_sequence(seq)?;
        let inputs: Vec<Vec<f64>> = seq.iter().map(encode_frame).collect();
        let conv = self.conv(&inputs);
        let hdim = self.dims.hidden;
        let mut steps: Vec<LstmStep> = Vec::with_capacity(conv.len());
        let mut vs = Vec::with_capacity(conv.len());
        let zero = vec![0.0; hdim];
        for cs in &conv {
            let (h_prev, c_prev) = match steps.last() {
                Some(s) => (&s.h, &s.c),
                None => (&zero, &zero),
            };
            let v = [cs.out.as_slice(), h_prev.as_slice()].concat();
            let step = self.lstm_cell(&v, c_prev);
            vs.push(v);
            steps.push(step);
        }
        let h_last = &steps.last().expect("at least one window").h;
        let mut logits = vec![0.0; self.dims.classes];
        self.head_w.affine(h_last, &self.head_b, &mut logits);
        let probs = softmax(&logits);
        Ok(Trace {
            conv,
            gate_inputs: vs,
            steps,
            logits,
            probs,
        })
    }

    /// Class probabilities for a feature sequence.
    pub fn forward(&self, seq: &[FeatureVector]) -> Result<Vec<f64>, ModelError> {
        Ok(self.run(seq)?.probs)
    }

    /// Index and probability of the most likely class; ties go to the lower index.
    pub fn predict(&self, seq: &[FeatureVector]) -> Result<(usize, f64), ModelError> {
        let probs = self.forward(seq)?;
        Ok(argmax(&probs))
    }
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let gate = || Matrix::zeros(dims.hidden, dims.gate_input());
        Self {
            dims,
            conv_w: Matrix::zeros(dims.conv_channels, dims.input * dims.kernel_width),
            conv_b: vec![0.0; dims.conv_channels],
            gate_w: [gate(), gate(), gate(), gate()],
            gate_b: std::array::from_fn(|_| vec![0.0; dims.hidden]),
            head_w: Matrix::zeros(dims.classes, dims.hidden),
            head_b: vec![0.0; dims.classes],
        }
    }

    /// All tensors in a fixed order (see [`TENSOR_NAMES`]).
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::with_capacity(12);
        fn mat<'a>(name: &'static str, m: &'a Matrix) -> TensorView<'a> {
            TensorView {
                name,
                kind: TensorKind::Weight,
                shape: (m.rows, m.cols),
                data: &m.data,
            }
        }
        fn vector<'a>(name: &'static str, v: &'a [f64]) -> TensorView<'a> {
            TensorView {
                name,
                kind: TensorKind::Bias,
                shape: (v.len(), 1),
                data: v,
            }
        }
        out.push(mat(TENSOR_NAMES[0], &self.conv_w));
        out.push(vector(TENSOR_NAMES[1], &self.conv_b));
        for (k, m) in self.gate_w.iter().enumerate() {
            out.push(mat(TENSOR_NAMES[2 + k], m));
        }
        for (k, b) in self.gate_b.iter().enumerate() {
            out.push(vector(TENSOR_NAMES[6 + k], b));
        }
        out.push(mat(TENSOR_NAMES[10], &self.head_w));
        out.push(vector(TENSOR_NAMES[11], &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out = Vec::with_capacity(12);
        fn mat<'a>(name: &'static str, m: &'a mut Matrix) -> TensorViewMut<'a> {
            TensorViewMut {
                name,
                kind: TensorKind::Weight,
                shape: (m.rows, m.cols),
                data: &mut m.data,
            }
        }
        fn vector<'a>(name: &'static str, v: &'a mut Vec<f64>) -> TensorViewMut<'a> {
            TensorViewMut {
                name,
                kind: TensorKind::Bias,
                shape: (v.len(), 1),
                data: v.as_mut_slice(),
            }
        }
        out.push(mat(TENSOR_NAMES[0], &mut self.conv_w));
        out.push(vector(TENSOR_NAMES[1], &mut self.conv_b));
        for (k, m) in self.gate_w.iter_mut().enumerate() {
            out.push(mat(TENSOR_NAMES[2 + k], m));
        }
        for (k, b) in self.gate_b.iter_mut().enumerate() {
            out.push(vector(TENSOR_NAMES[6 + k], b));
        }
        out.push(mat(TENSOR_NAMES[10], &mut self.head_w));
        out.push(vector(TENSOR_NAMES[11], &mut self.head_b));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

pub(crate) struct ConvStep {
    pub window: Vec<f64>,
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
}

pub(crate) struct LstmStep {
    /// Activated gate values: input, forget, output, candidate.
    pub gates: [Vec<f64>; 4],
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct Trace {
    pub conv: Vec<ConvStep>,
    pub gate_inputs: Vec<Vec<f64>>,
    pub steps: Vec<LstmStep>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Model input for one frame: angles scaled to [0, 1], masked angles as 0.
pub fn encode_frame(f: &FeatureVector) -> Vec<f64> {
    f.angles
        .iter()
        .zip(&f.mask)
        .map(|(&a, &valid)| if valid { a / 180.0 } else { 0.0 })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}
