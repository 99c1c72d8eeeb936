use crate::error::{MoceError, Result};
use crate::tensor::{self, Tensor};

/// Router logits `h = W_Gᵀ·x` for one token.
pub fn router_logits(w_g: &Tensor, x: &Tensor) -> Result<Tensor> {
    let [d, n] = w_g.shape() else {
        return Err(MoceError::shape(format!(
            "router weight must be 2-D, got {:?}",
            w_g.shape()
        )));
    };
    if x.numel() != *d {
        return Err(MoceError::shape(format!(
            "token of shape {:?} does not match router of shape {:?}",
            x.shape(),
            w_g.shape()
        )));
    }
    let row = x.reshape(&[1, *d])?;
    tensor::matmul(&row, w_g)?.reshape(&[*n])
}

/// Softmax gate over expert logits.
pub fn gate(h: &Tensor) -> Result<Tensor> {
    tensor::softmax(h)
}

/// Indices of the `k` largest weights, largest first; equal weights prefer the lower index.
pub fn top_k_indices(weights: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > weights.len() {
        return Err(MoceError::contract(format!(
            "top-k with k = {k} over {} experts",
            weights.len()
        )));
    }
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Keeps the `k` largest weights at their original values and zeroes the rest.
///
/// No renormalization is applied.
pub fn top_k_select(weights: &Tensor, k: usize) -> Result<Tensor> {
    let keep = top_k_indices(weights.data(), k)?;
    let mut out = vec![0.0; weights.numel()];
    for i in keep {
        out[i] = weights.data()[i];
    }
    Tensor::new(weights.shape(), out)
}

/// Position of the largest weight, lowest index on ties.
pub fn argmax(weights: &[f64]) -> usize {
    let mut best = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > weights[best] {
            best = i;
        }
    }
    best
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn gate_is_a_distribution(logits in prop::collection::vec(-300.0f64..300.0, 1..16)) {
            let g = gate(&Tensor::vector(logits).unwrap()).unwrap();
            prop_assert!((g.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(g.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }

        #[test]
        fn top_k_keeps_exactly_k_largest(
            raw in prop::collection::vec(1u8..5, 1..10),
            k_frac in 0.0f64..1.0,
        ) {
            let w: Vec<f64> = raw.iter().map(|v| f64::from(*v) / 4.0).collect();
            let n = w.len();
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let sel = top_k_select(&Tensor::vector(w.clone()).unwrap(), k).unwrap();
            let kept: Vec<usize> = (0..n).filter(|&i| sel.data()[i] != 0.0).collect();
            prop_assert_eq!(kept.len(), k);
            for &i in &kept {
                prop_assert_eq!(sel.data()[i], w[i]);
            }
            let min_kept = kept.iter().map(|&i| w[i]).fold(f64::INFINITY, f64::min);
            for i in (0..n).filter(|i| !kept.contains(i)) {
                prop_assert!(w[i] < min_kept || (w[i] == min_kept && kept.iter().all(|&j| j < i || w[j] > w[i])));
            }
        }
    }
}
