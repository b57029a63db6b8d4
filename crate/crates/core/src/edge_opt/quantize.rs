//! Symmetric per-tensor int8 weight quantization. Biases stay in floating
//! point; activations are never quantized.

use crate::model::{LinearOp, Matrix, ModelParams, Network};

use super::EdgeOptError;

/// Largest magnitude of a quantized value.
pub const QMAX: f64 = 127.0;

/// int8 weights with one scale per tensor: `w ≈ q * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QMatrix {
    pub rows: usize,
    pub cols: usize,
    pub scale: f64,
    pub q: Vec<i8>,
}

impl QMatrix {
    pub fn quantize(m: &Matrix) -> Self {
        let max_abs = m.data.iter().fold(0.0f64, |acc, w| acc.max(w.abs()));
        let scale = if max_abs == 0.0 { 1.0 } else { max_abs / QMAX };
        let q = m
            .data
            .iter()
            .map(|&w| (w / scale).round().clamp(-QMAX, QMAX) as i8)
            .collect();
        Self {
            rows: m.rows,
            cols: m.cols,
            scale,
            q,
        }
    }

    pub fn dequantize(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.q.iter().map(|&q| q as f64 * self.scale).collect(),
        )
    }
}

impl LinearOp for QMatrix {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn affine(&self, x: &[f64], bias: &[f64], out: &mut [f64]) {
        for ((o, row), &b) in out.iter_mut().zip(self.q.chunks_exact(self.cols)).zip(bias) {
            let acc: f64 = row.iter().zip(x).map(|(&q, &v)| q as f64 * v).sum();
            *o = b + acc * self.scale;
        }
    }
}

pub type QuantizedParams = Network<QMatrix>;

pub fn quantize(params: &ModelParams) -> Result<QuantizedParams, EdgeOptError> {
    if !params.all_finite() {
        return Err(EdgeOptError::NonFiniteWeights);
    }
    Ok(Network {
        dims: params.dims,
        conv_w: QMatrix::quantize(&params.conv_w),
        conv_b: params.conv_b.clone(),
        gate_w: std::array::from_fn(|k| QMatrix::quantize(&params.gate_w[k])),
        gate_b: params.gate_b.clone(),
        head_w: QMatrix::quantize(&params.head_w),
        head_b: params.head_b.clone(),
    })
}

pub fn dequantize(q: &QuantizedParams) -> ModelParams {
    Network {
        dims: q.dims,
        conv_w: q.conv_w.dequantize(),
        conv_b: q.conv_b.clone(),
        gate_w: std::array::from_fn(|k| q.gate_w[k].dequantize()),
        gate_b: q.gate_b.clone(),
        head_w: q.head_w.dequantize(),
        head_b: q.head_b.clone(),
    }
}

impl QuantizedParams {
    pub fn weight_matrices(&self) -> [(&'static str, &QMatrix); 6] {
        [
            ("conv.weight", &self.conv_w),
            ("lstm.input.weight", &self.gate_w[0]),
            ("lstm.forget.weight", &self.gate_w[1]),
            ("lstm.output.weight", &self.gate_w[2]),
            ("lstm.candidate.weight", &self.gate_w[3]),
            ("head.weight", &self.head_w),
        ]
    }
}
