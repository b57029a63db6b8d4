//! Cross-entropy loss and its gradient by backpropagation through time.

use super::network::{ModelParams, Trace, CANDIDATE, FORGET, INPUT, OUTPUT};
use super::{ModelError, SequenceSample};

/// Mean loss, gradients and how many samples the model got right.
pub struct BatchGradients {
    pub loss: f64,
    pub grads: ModelParams,
    pub correct: usize,
}

/// Mean cross-entropy over `batch` and its gradient with respect to every
/// parameter.
pub fn loss_and_gradients(batch: &[SequenceSample], params: &ModelParams) -> Result<(f64, ModelParams), ModelError> {
    let refs: Vec<&SequenceSample> = batch.iter().collect();
    let out = batch_gradients(&refs, params)?;
    Ok((out.loss, out.grads))
}

pub fn batch_gradients(batch: &[&SequenceSample], params: &ModelParams) -> Result<BatchGradients, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut grads = ModelParams::zeros(params.dims);
    let mut loss = 0.0;
    let mut correct = 0;
    for sample in batch {
        if sample.label >= params.dims.classes {
            return Err(ModelError::DimensionMismatch(format!(
                "label {} with {} classes",
                sample.label, params.dims.classes
            )));
        }
        let trace = params.run(&sample.features)?;
        loss += cross_entropy(&trace.logits, sample.label);
        if super::network::argmax(&trace.probs).0 == sample.label {
            correct += 1;
        }
        accumulate(params, &trace, sample.label, &mut grads);
    }
    let n = batch.len() as f64;
    for t in grads.tensors_mut() {
        t.data.iter_mut().for_each(|g| *g /= n);
    }
    Ok(BatchGradients {
        loss: loss / n,
        grads,
        correct,
    })
}

fn accumulate(params: &ModelParams, trace: &Trace, label: usize, grads: &mut ModelParams) {
    let d = params.dims;
    let hdim = d.hidden;
    let cdim = d.conv_channels;

    let mut dlogits = trace.probs.clone();
    dlogits[label] -= 1.0;
    let h_last = &trace.steps.last().expect("non-empty trace").h;
    grads.head_w.add_outer(&dlogits, h_last);
    add_into(&mut grads.head_b, &dlogits);

    let mut dh = vec![0.0; hdim];
    params.head_w.add_transposed_mul(&dlogits, &mut dh);
    let mut dc_next = vec![0.0; hdim];
    let zero = vec![0.0; hdim];

    for tau in (0..trace.steps.len()).rev() {
        let step = &trace.steps[tau];
        let c_prev = if tau == 0 { &zero } else { &trace.steps[tau - 1].c };
        let [i, f, o, g] = &step.gates;

        let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hdim]);
        let mut dc = vec![0.0; hdim];
        for j in 0..hdim {
            let tc = step.tanh_c[j];
            da[OUTPUT][j] = dh[j] * tc * o[j] * (1.0 - o[j]);
            dc[j] = dc_next[j] + dh[j] * o[j] * (1.0 - tc * tc);
            da[INPUT][j] = dc[j] * g[j] * i[j] * (1.0 - i[j]);
            da[CANDIDATE][j] = dc[j] * i[j] * (1.0 - g[j] * g[j]);
            da[FORGET][j] = dc[j] * c_prev[j] * f[j] * (1.0 - f[j]);
            dc_next[j] = dc[j] * f[j];
        }

        let v = &trace.gate_inputs[tau];
        let mut dv = vec![0.0; d.gate_input()];
        for k in 0..4 {
            grads.gate_w[k].add_outer(&da[k], v);
            add_into(&mut grads.gate_b[k], &da[k]);
            params.gate_w[k].add_transposed_mul(&da[k], &mut dv);
        }

        let conv = &trace.conv[tau];
        let dpre: Vec<f64> = dv[..cdim]
            .iter()
            .zip(&conv.pre)
            .map(|(&dz, &p)| if p > 0.0 { dz } else { 0.0 })
            .collect();
        grads.conv_w.add_outer(&dpre, &conv.window);
        add_into(&mut grads.conv_b, &dpre);

        dh.copy_from_slice(&dv[cdim..]);
    }
}

/// `-log softmax(logits)[label]`, via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// Mean cross-entropy without gradients.
pub fn mean_loss(batch: &[SequenceSample], params: &ModelParams) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut total = 0.0;
    for s in batch {
        total += cross_entropy(&params.run(&s.features)?.logits, s.label);
    }
    Ok(total / batch.len() as f64)
}
