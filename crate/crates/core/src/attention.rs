//! Scaled dot-product multi-head attention with boolean masks.

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::tensor::{gemm, Tensor};

/// Forward result: output `n×d` and the per-head attention weights laid out
/// as `heads × n × m` (masked entries are exactly zero).
pub struct AttentionOutput {
    pub output: Tensor,
    pub weights: Vec<f64>,
}

fn head_block(x: &Tensor, head: usize, dh: usize) -> Vec<f64> {
    let (rows, d) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x.data()[r * d + head * dh..r * d + (head + 1) * dh]);
    }
    out
}

fn check_inputs(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask, heads: usize) -> Result<()> {
    let (n, d) = q.require_matrix("attention query")?;
    let (m, dk) = k.require_matrix("attention key")?;
    let (mv, dv) = v.require_matrix("attention value")?;
    if dk != d || dv != d || mv != m {
        return Err(Error::Shape(format!(
            "attention q {n}x{d}, k {m}x{dk}, v {mv}x{dv}"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    if mask.rows() != n || mask.cols() != m {
        return Err(Error::Shape(format!(
            "mask {}x{} for attention {n}x{m}",
            mask.rows(),
            mask.cols()
        )));
    }
    mask.check_rows_nonempty()
}

/// `softmax(q kᵀ / √d_h)` restricted to allowed keys, applied to `v`,
/// independently per head.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    heads: usize,
) -> Result<AttentionOutput> {
    check_inputs(q, k, v, mask, heads)?;
    let (n, d) = (q.rows(), q.cols());
    let m = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut weights = vec![0.0; heads * n * m];
    let mut scores = vec![0.0; n * m];
    let mut head_out = vec![0.0; n * dh];
    for h in 0..heads {
        let qh = head_block(q, h, dh);
        let kh = head_block(k, h, dh);
        let vh = head_block(v, h, dh);
        gemm(n, dh, m, &qh, false, &kh, true, &mut scores, false);
        let w = &mut weights[h * n * m..(h + 1) * n * m];
        for i in 0..n {
            let allow = mask.row(i);
            let srow = &scores[i * m..(i + 1) * m];
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                if allow[j] {
                    max = max.max(srow[j] * scale);
                }
            }
            let wrow = &mut w[i * m..(i + 1) * m];
            let mut sum = 0.0;
            for j in 0..m {
                if allow[j] {
                    let e = (srow[j] * scale - max).exp();
                    wrow[j] = e;
                    sum += e;
                }
            }
            for x in wrow.iter_mut() {
                *x /= sum;
            }
        }
        gemm(n, m, dh, w, false, &vh, false, &mut head_out, false);
        for i in 0..n {
            out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&head_out[i * dh..(i + 1) * dh]);
        }
    }
    Ok(AttentionOutput {
        output: Tensor::matrix(n, d, out)?,
        weights,
    })
}

/// Gradients of [`multi_head_attention`] with respect to `q`, `k`, `v` given
/// the saved weights and the upstream gradient of the output.
pub fn multi_head_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    weights: &[f64],
    heads: usize,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (q.rows(), q.cols());
    let m = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; m * d];
    let mut dv = vec![0.0; m * d];
    let mut dp = vec![0.0; n * m];
    let mut dqh = vec![0.0; n * dh];
    let mut dkh = vec![0.0; m * dh];
    let mut dvh = vec![0.0; m * dh];
    for h in 0..heads {
        let qh = head_block(q, h, dh);
        let kh = head_block(k, h, dh);
        let vh = head_block(v, h, dh);
        let goh = head_block(grad_out, h, dh);
        let p = &weights[h * n * m..(h + 1) * n * m];
        // dV = Pᵀ dO, dP = dO Vᵀ
        gemm(m, n, dh, p, true, &goh, false, &mut dvh, false);
        gemm(n, dh, m, &goh, false, &vh, true, &mut dp, false);
        for i in 0..n {
            let prow = &p[i * m..(i + 1) * m];
            let drow = &mut dp[i * m..(i + 1) * m];
            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            for j in 0..m {
                drow[j] = prow[j] * (drow[j] - dot) * scale;
            }
        }
        gemm(n, m, dh, &dp, false, &kh, false, &mut dqh, false);
        gemm(m, n, dh, &dp, true, &qh, false, &mut dkh, false);
        for i in 0..n {
            dq[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&dqh[i * dh..(i + 1) * dh]);
        }
        for j in 0..m {
            dk[j * d + h * dh..j * d + (h + 1) * dh].copy_from_slice(&dkh[j * dh..(j + 1) * dh]);
            dv[j * d + h * dh..j * d + (h + 1) * dh].copy_from_slice(&dvh[j * dh..(j + 1) * dh]);
        }
    }
    (
        Tensor::matrix(n, d, dq).expect("shape"),
        Tensor::matrix(m, d, dk).expect("shape"),
        Tensor::matrix(m, d, dv).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::build_causal_mask;

    #[test]
    fn one_hot_mask_copies_value_rows() {
        let q = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.1]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let mut mask = AttentionMask::empty(2, 3);
        mask.set(0, 2, true);
        mask.set(1, 0, true);
        let out = multi_head_attention(&q, &k, &v, &mask, 2).unwrap().output;
        assert_eq!(out.row(0), &[5.0, 6.0]);
        assert_eq!(out.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn uniform_scores_average_values() {
        let q = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![2.0, 0.0], vec![4.0, 6.0]]).unwrap();
        let out = multi_head_attention(&q, &k, &v, &AttentionMask::full(1, 2), 1).unwrap();
        assert_eq!(out.output.row(0), &[3.0, 3.0]);
    }

    #[test]
    fn causal_row_ignores_later_values() {
        let x = Tensor::from_rows(&[vec![0.1, 0.2], vec![0.5, -0.3], vec![1.0, 0.7]]).unwrap();
        let mut v2 = x.clone();
        v2.row_mut(2).copy_from_slice(&[50.0, -40.0]);
        let mask = build_causal_mask(3);
        let a = multi_head_attention(&x, &x, &x, &mask, 1).unwrap().output;
        let b = multi_head_attention(&x, &x, &v2, &mask, 1).unwrap().output;
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn fully_masked_row_is_a_contract_error() {
        let x = Tensor::from_rows(&[vec![0.1, 0.2], vec![0.5, -0.3]]).unwrap();
        let mut mask = build_causal_mask(2);
        mask.set(1, 0, false);
        mask.set(1, 1, false);
        assert!(matches!(
            multi_head_attention(&x, &x, &x, &mask, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn weights_sum_to_one_over_allowed_keys() {
        let x = Tensor::from_rows(&[
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.5, -0.3, 0.0, 1.0],
            vec![1.0, 0.7, -2.0, 0.1],
        ])
        .unwrap();
        let mask = build_causal_mask(3);
        let out = multi_head_attention(&x, &x, &x, &mask, 2).unwrap();
        for h in 0..2 {
            for i in 0..3 {
                let row = &out.weights[h * 9 + i * 3..h * 9 + i * 3 + 3];
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                for j in (i + 1)..3 {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }
}
