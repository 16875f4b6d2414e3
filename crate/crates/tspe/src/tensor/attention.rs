//! Single-query scaled dot-product attention.
//!
//! This is the kernel both pipeline stages use to pool a clip's timesteps
//! into one context vector: the query is projected with `W_q`, the keys
//! with `W_k`, scores are scaled by the inverse square root of the
//! projected width, and the soft weights contract the projected values.
//!
//! The same graph builder serves training (on a live tape) and inference
//! (through [`scaled_dot_attention`], which runs a throwaway tape), so
//! the two paths produce bit-identical numbers.

use super::matrix::Matrix;
use super::tape::Tape;
use super::VarId;
use crate::error::{Error, Result};

/// Attention weights over timesteps plus the pooled context vector.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// 1 x t soft weights; non-negative, summing to one.
    pub weights: Matrix,
    /// 1 x d pooled context.
    pub context: Matrix,
}

/// Build the attention subgraph on `tape`.
///
/// `q` is 1 x d_q, `keys` t x d_k, `values` t x d_v; the projections map
/// all three into a shared width d. Returns (weights, context) node ids.
pub fn attention_graph(
    tape: &mut Tape,
    q: VarId,
    keys: VarId,
    values: VarId,
    w_q: VarId,
    w_k: VarId,
    w_v: VarId,
) -> Result<(VarId, VarId)> {
    let t = tape.value(keys).rows();
    if t == 0 {
        return Err(Error::EmptyClip(
            "attention over zero timesteps".into(),
        ));
    }
    if tape.value(values).rows() != t {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: format!("{t} key rows"),
            right: format!("{} value rows", tape.value(values).rows()),
        });
    }
    let d = tape.value(w_q).cols();
    if tape.value(w_k).cols() != d || tape.value(w_v).cols() != d {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: format!("projected width {d}"),
            right: format!(
                "{} / {}",
                tape.value(w_k).cols(),
                tape.value(w_v).cols()
            ),
        });
    }
    let vp = tape.matmul(values, w_v)?; // t x d
    let weights = attention_weights_graph(tape, q, keys, w_q, w_k)?;
    let context = tape.attend(weights, vp)?;
    Ok((weights, context))
}

/// Attention weights only: softmax((qW_q)(KW_k)^T / sqrt(d)), 1 x t.
///
/// Split out for callers that pool values under a different (fused)
/// weight row than the one this query produces.
pub fn attention_weights_graph(
    tape: &mut Tape,
    q: VarId,
    keys: VarId,
    w_q: VarId,
    w_k: VarId,
) -> Result<VarId> {
    if tape.value(keys).rows() == 0 {
        return Err(Error::EmptyClip("attention over zero timesteps".into()));
    }
    let d = tape.value(w_q).cols();
    let qp = tape.matmul(q, w_q)?; // 1 x d
    let kp = tape.matmul(keys, w_k)?; // t x d
    let scores = tape.matmul_nt(qp, kp)?; // 1 x t
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    Ok(tape.softmax_rows(scaled))
}

/// Run attention outside a training graph.
pub fn scaled_dot_attention(
    q: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    w_q: &Matrix,
    w_k: &Matrix,
    w_v: &Matrix,
) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let qn = tape.leaf(q.clone());
    let kn = tape.leaf(keys.clone());
    let vn = tape.leaf(values.clone());
    let wq = tape.leaf(w_q.clone());
    let wk = tape.leaf(w_k.clone());
    let wv = tape.leaf(w_v.clone());
    let (w, c) = attention_graph(&mut tape, qn, kn, vn, wq, wk, wv)?;
    Ok(AttentionOutput {
        weights: tape.value(w).clone(),
        context: tape.value(c).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matrix::argmax;

    fn identity_proj(d: usize) -> Matrix {
        Matrix::identity(d)
    }

    #[test]
    fn uniform_weights_for_identical_keys() {
        let q = Matrix::row_vec(vec![1.0, 0.0]);
        let keys = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let values =
            Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 3.0], vec![3.0, 3.0]]).unwrap();
        let id = identity_proj(2);
        let out = scaled_dot_attention(&q, &keys, &values, &id, &id, &id).unwrap();
        for w in out.weights.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        // context is the mean of the values
        assert!((out.context.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((out.context.get(0, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn aligned_key_dominates() {
        let q = Matrix::row_vec(vec![10.0, 0.0]);
        let keys = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let values = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let id2 = identity_proj(2);
        // values are 1-wide; project them with a 1x2 matrix so widths agree
        let wv = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let out = scaled_dot_attention(&q, &keys, &values, &id2, &id2, &wv).unwrap();
        assert_eq!(argmax(out.weights.row(0)), 1);
        assert!(out.weights.get(0, 1) > 0.99);
    }

    #[test]
    fn weights_sum_to_one() {
        let q = Matrix::row_vec(vec![0.3, -0.7, 0.2]);
        let keys = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![-1.0, 0.5, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![2.0, -2.0, 0.1],
        ])
        .unwrap();
        let id = identity_proj(3);
        let out = scaled_dot_attention(&q, &keys, &keys, &id, &id, &id).unwrap();
        let sum: f64 = out.weights.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_clip_is_an_error() {
        let q = Matrix::row_vec(vec![1.0]);
        let empty = Matrix::zeros(0, 1);
        let id = identity_proj(1);
        let err = scaled_dot_attention(&q, &empty, &empty, &id, &id, &id);
        assert!(matches!(err, Err(Error::EmptyClip(_))));
    }

    #[test]
    fn permuting_timesteps_permutes_weights_bitwise() {
        let q = Matrix::row_vec(vec![0.37, -1.41, 0.9]);
        let keys = Matrix::from_rows(&[
            vec![1.0, 0.2, -0.3],
            vec![-0.4, 0.5, 0.6],
            vec![0.07, -0.8, 0.09],
            vec![1.3, 1.1, -1.2],
        ])
        .unwrap();
        let values = Matrix::from_rows(&[
            vec![2.0, 0.0, 1.0],
            vec![0.0, 2.0, -1.0],
            vec![1.0, 1.0, 0.5],
            vec![-1.0, 0.5, 2.5],
        ])
        .unwrap();
        let id = identity_proj(3);
        let base = scaled_dot_attention(&q, &keys, &values, &id, &id, &id).unwrap();

        let perm = [2usize, 0, 3, 1];
        let pk = Matrix::from_rows(&perm.iter().map(|i| keys.row(*i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let pv =
            Matrix::from_rows(&perm.iter().map(|i| values.row(*i).to_vec()).collect::<Vec<_>>())
                .unwrap();
        let permuted = scaled_dot_attention(&q, &pk, &pv, &id, &id, &id).unwrap();

        for (new_pos, old_pos) in perm.iter().enumerate() {
            assert_eq!(
                base.weights.get(0, *old_pos).to_bits(),
                permuted.weights.get(0, new_pos).to_bits()
            );
        }
        for c in 0..3 {
            assert_eq!(
                base.context.get(0, c).to_bits(),
                permuted.context.get(0, c).to_bits()
            );
        }
    }
}
