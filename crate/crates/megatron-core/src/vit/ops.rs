//! Standalone scaled dot-product attention and its multi-head form.
//!
//! These are plain (non-differentiable) reference operations; the model's
//! recorded forward pass computes the same quantities on the tape, and the
//! tests cross-check the two routes.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// softmax(QKᵀ/√d)·V. Returns (output, attention weights); every row of the
/// weight matrix sums to 1.
pub fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    d: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if d == 0 {
        return Err(Error::Input("key dimensionality d must be > 0".into()));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::Dimension(format!(
            "Q has {} columns but K has {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::Dimension(format!(
            "K has {} rows but V has {}",
            k.nrows(),
            v.nrows()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = q.dot(&k.t()) * scale;
    for mut row in weights.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    let out = weights.dot(v);
    Ok((out, weights))
}

/// Per-head projection weights plus the output projection.
#[derive(Debug, Clone)]
pub struct MhaWeights {
    /// One (embed_dim, head_dim) matrix per head.
    pub wq: Vec<Array2<f64>>,
    pub wk: Vec<Array2<f64>>,
    pub wv: Vec<Array2<f64>>,
    /// (n_heads · head_dim, embed_dim)
    pub wo: Array2<f64>,
}

impl MhaWeights {
    pub fn n_heads(&self) -> usize {
        self.wq.len()
    }
}

/// Concat(head_1, …, head_h)·Wᴼ where head_i = attention(X·Wᵢ^Q, X·Wᵢ^K, X·Wᵢ^V).
pub fn multi_head_attention(tokens: &Array2<f64>, weights: &MhaWeights) -> Result<Array2<f64>> {
    let h = weights.n_heads();
    if h == 0 || weights.wk.len() != h || weights.wv.len() != h {
        return Err(Error::Dimension(
            "per-head weight lists must be non-empty and equal-length".into(),
        ));
    }
    let d = tokens.ncols();
    let dh = weights.wq[0].ncols();
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        for (name, w) in [("W^Q", &weights.wq[i]), ("W^K", &weights.wk[i]), ("W^V", &weights.wv[i])]
        {
            if w.nrows() != d || w.ncols() != dh {
                return Err(Error::Dimension(format!(
                    "head {i} {name} has shape ({},{}), expected ({d},{dh})",
                    w.nrows(),
                    w.ncols()
                )));
            }
        }
        let q = tokens.dot(&weights.wq[i]);
        let k = tokens.dot(&weights.wk[i]);
        let v = tokens.dot(&weights.wv[i]);
        let (out, _) = attention(&q, &k, &v, dh)?;
        heads.push(out);
    }
    let views: Vec<_> = heads.iter().map(|m| m.view()).collect();
    let cat = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
    if weights.wo.nrows() != h * dh {
        return Err(Error::Dimension(format!(
            "W^O has {} rows, expected {}",
            weights.wo.nrows(),
            h * dh
        )));
    }
    Ok(cat.dot(&weights.wo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_is_identity() {
        let m = arr2(&[[2.0]]);
        let (out, w) = attention(&m, &m, &m, 1).unwrap();
        assert_abs_diff_eq!(w[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[[0, 0]], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_scores_give_uniform_weights() {
        let q = Array2::zeros((3, 2));
        let k = Array2::zeros((3, 2));
        let v = arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let (out, w) = attention(&q, &k, &v, 2).unwrap();
        for row in w.rows() {
            for &x in row {
                assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-12);
            }
        }
        let mean = v.mean_axis(Axis(0)).unwrap();
        for row in out.rows() {
            assert_abs_diff_eq!(row[0], mean[0], epsilon = 1e-12);
            assert_abs_diff_eq!(row[1], mean[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn two_key_softmax_hand_evaluated() {
        // softmax(1/sqrt(2), 0) computed directly.
        let q = arr2(&[[1.0, 0.0]]);
        let k = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let v = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let (out, w) = attention(&q, &k, &v, 2).unwrap();
        let z = (1.0f64 / 2.0f64.sqrt()).exp();
        let w0 = z / (z + 1.0);
        assert_abs_diff_eq!(w[[0, 0]], w0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[[0, 1]], 1.0 - w0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[[0, 0]], 0.6698, epsilon = 1e-4);
        assert_abs_diff_eq!(out[[0, 0]], w0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[[0, 1]], 1.0 - w0, epsilon = 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-2.0..2.0));
            let k = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-2.0..2.0));
            let v = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-2.0..2.0));
            let (_, w) = attention(&q, &k, &v, 3).unwrap();
            for row in w.rows() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let q = Array2::<f64>::zeros((2, 3));
        let k = Array2::<f64>::zeros((2, 4));
        let v = Array2::<f64>::zeros((2, 2));
        assert!(matches!(
            attention(&q, &k, &v, 3),
            Err(crate::error::Error::Dimension(_))
        ));
        let k = Array2::<f64>::zeros((3, 3));
        assert!(attention(&q, &k, &v, 3).is_err());
    }

    #[test]
    fn single_head_with_identity_output_matches_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tokens = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let wq = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let wk = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let wv = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let weights = MhaWeights {
            wq: vec![wq.clone()],
            wk: vec![wk.clone()],
            wv: vec![wv.clone()],
            wo: Array2::eye(4),
        };
        let got = multi_head_attention(&tokens, &weights).unwrap();
        let (expect, _) =
            attention(&tokens.dot(&wq), &tokens.dot(&wk), &tokens.dot(&wv), 4).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn zero_value_projections_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tokens = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let rand = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let weights = MhaWeights {
            wq: vec![rand(&mut rng), rand(&mut rng)],
            wk: vec![rand(&mut rng), rand(&mut rng)],
            wv: vec![Array2::zeros((4, 2)), Array2::zeros((4, 2))],
            wo: Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0)),
        };
        let got = multi_head_attention(&tokens, &weights).unwrap();
        assert!(got.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_heads_match_straight_line_oracle() {
        // Independent computation: explicit per-head loops, then
        // concatenate and project.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 4;
        let dh = 2;
        let tokens = Array2::from_shape_fn((2, d), |_| rng.gen_range(-1.0..1.0));
        let mk = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((d, dh), |_| rng.gen_range(-0.5..0.5));
        let weights = MhaWeights {
            wq: vec![mk(&mut rng), mk(&mut rng)],
            wk: vec![mk(&mut rng), mk(&mut rng)],
            wv: vec![mk(&mut rng), mk(&mut rng)],
            wo: Array2::from_shape_fn((d, d), |_| rng.gen_range(-0.5..0.5)),
        };
        let got = multi_head_attention(&tokens, &weights).unwrap();

        let mut cat = Array2::<f64>::zeros((2, d));
        for h in 0..2 {
            let q = tokens.dot(&weights.wq[h]);
            let k = tokens.dot(&weights.wk[h]);
            let v = tokens.dot(&weights.wv[h]);
            for i in 0..2 {
                // scores for token i against every token j
                let mut scores = [0.0f64; 2];
                for j in 0..2 {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q[[i, c]] * k[[j, c]];
                    }
                    scores[j] = s / (dh as f64).sqrt();
                }
                let m = scores[0].max(scores[1]);
                let e0 = (scores[0] - m).exp();
                let e1 = (scores[1] - m).exp();
                let z = e0 + e1;
                for c in 0..dh {
                    cat[[i, h * dh + c]] = (e0 * v[[0, c]] + e1 * v[[1, c]]) / z;
                }
            }
        }
        let expect = cat.dot(&weights.wo);
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
    }
}
