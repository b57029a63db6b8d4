//! Per-tensor magnitude pruning.

use crate::model::{ModelParams, TensorKind};

use super::EdgeOptError;

/// Zeroes the `floor(fraction * len)` smallest-magnitude entries of every
/// weight tensor, ties going to the lower flat index. Biases are kept.
pub fn prune(params: &ModelParams, fraction: f64) -> Result<ModelParams, EdgeOptError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(EdgeOptError::InvalidFraction(fraction));
    }
    let mut out = params.clone();
    for tensor in out.tensors_mut() {
        if tensor.kind != TensorKind::Weight {
            continue;
        }
        prune_slice(tensor.data, fraction);
    }
    Ok(out)
}

pub fn prune_slice(data: &mut [f64], fraction: f64) {
    let count = (fraction * data.len() as f64).floor() as usize;
    if count == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs()).then(a.cmp(&b)));
    for &i in &order[..count] {
        data[i] = 0.0;
    }
}

/// Fraction of exactly-zero entries per weight tensor.
pub fn sparsity(params: &ModelParams) -> Vec<(&'static str, f64)> {
    params
        .tensors()
        .into_iter()
        .filter(|t| t.kind == TensorKind::Weight)
        .map(|t| {
            let zeros = t.data.iter().filter(|&&w| w == 0.0).count();
            (t.name, zeros as f64 / t.data.len() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use proptest::prelude::*;

    fn random_params(seed: u64) -> ModelParams {
        ModelParams::init_seeded(ModelDims::new(8, 4, 6, 3), seed)
    }

    #[test]
    fn worked_example() {
        let mut t = [0.1, -0.5, 0.2, -0.05];
        prune_slice(&mut t, 0.5);
        assert_eq!(t, [0.0, -0.5, 0.2, 0.0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let mut t = [0.3, -0.1, 0.1, 0.1];
        prune_slice(&mut t, 0.5);
        assert_eq!(t, [0.3, 0.0, 0.0, 0.1]);
    }

    #[test]
    fn zero_fraction_is_bit_identical() {
        let p = random_params(1);
        let q = prune(&p, 0.0).unwrap();
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert!(a.data.iter().zip(b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn full_fraction_keeps_biases() {
        let mut p = random_params(2);
        p.conv_b.iter_mut().for_each(|b| *b = 0.25);
        let q = prune(&p, 1.0).unwrap();
        for t in q.tensors() {
            match t.kind {
                TensorKind::Weight => assert!(t.data.iter().all(|&w| w == 0.0), "{}", t.name),
                TensorKind::Bias => {}
            }
        }
        assert_eq!(q.conv_b, p.conv_b);
        assert_eq!(q.gate_b, p.gate_b);
    }

    #[test]
    fn invalid_fraction() {
        let p = random_params(3);
        assert!(matches!(prune(&p, 1.5), Err(EdgeOptError::InvalidFraction(_))));
        assert!(matches!(prune(&p, -0.1), Err(EdgeOptError::InvalidFraction(_))));
        assert!(matches!(prune(&p, f64::NAN), Err(EdgeOptError::InvalidFraction(_))));
    }

    proptest! {
        #[test]
        fn sparsity_exact_and_idempotent(seed in 0u64..1000, p in 0.0f64..=1.0) {
            let params = random_params(seed);
            let once = prune(&params, p).unwrap();
            prop_assert_eq!(&prune(&once, p).unwrap(), &once);
            for (t, (_, s)) in params
                .tensors()
                .iter()
                .filter(|t| t.kind == TensorKind::Weight)
                .zip(sparsity(&once))
            {
                let want = (p * t.data.len() as f64).floor() / t.data.len() as f64;
                // Glorot init never yields exact zeros, so the count is exact
                prop_assert_eq!(s, want);
            }
        }
    }
}
