//! Attention primitives used for style injection: query fusion, contrast
//! adjustment of attention maps and scaled dot-product attention against
//! borrowed keys and values.

use ndarray::{Array2, Array4, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::HeadFeatures;

/// `gamma * q_img + delta * q_edges`, elementwise.
pub fn fuse_queries<S: Scalar>(
    q_img: &HeadFeatures<S>,
    q_edges: &HeadFeatures<S>,
    gamma: S,
    delta: S,
) -> Result<HeadFeatures<S>> {
    if q_img.shape() != q_edges.shape() {
        return Err(Error::Shape(format!(
            "fuse_queries: {:?} vs {:?}",
            q_img.shape(),
            q_edges.shape()
        )));
    }
    let mut out = q_img.clone();
    out.zip_mut_with(q_edges, |a, &b| *a = gamma * *a + delta * b);
    Ok(out)
}

/// Sharpens (beta > 1) or flattens (beta < 1) one probability row around its mean.
///
/// Negative entries are clipped and the row renormalized. A row that clips to
/// all zeros is left as it was.
pub fn contrast_adjust_row<S: Scalar>(row: &mut [S], beta: S) {
    if beta == S::one() || row.is_empty() {
        return;
    }
    let n = S::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<S>() / n;
    let adjusted: Vec<S> = row.iter().map(|&a| (beta * (a - mean) + mean).max(S::zero())).collect();
    let total: S = adjusted.iter().copied().sum();
    if total <= S::zero() || !total.is_finite() {
        return;
    }
    for (dst, a) in row.iter_mut().zip(adjusted) {
        *dst = a / total;
    }
}

/// Applies [`contrast_adjust_row`] to every row of an attention map.
pub fn contrast_adjust<S: Scalar>(map: &mut Array2<S>, beta: S) {
    for mut row in map.rows_mut() {
        match row.as_slice_mut() {
            Some(slice) => contrast_adjust_row(slice, beta),
            None => {
                let mut owned = row.to_vec();
                contrast_adjust_row(&mut owned, beta);
                row.assign(&ndarray::ArrayView1::from(&owned));
            }
        }
    }
}

/// Row-wise softmax of `q kᵀ / sqrt(head_dim)` for one head; rows index queries.
pub fn attention_map<S: Scalar>(q: ArrayView2<S>, k: ArrayView2<S>, head_dim: usize) -> Result<Array2<S>> {
    let scale = S::one() / S::from_usize(head_dim).unwrap().sqrt();
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|x| x * scale);
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("non-finite attention logits".into()));
    }
    for mut row in logits.rows_mut() {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        row.mapv_inplace(|x| (x - m).exp());
        let s: S = row.iter().copied().sum();
        row.mapv_inplace(|x| x / s);
    }
    Ok(logits)
}

/// Multi-head attention of `q` against borrowed keys and values, with the
/// contrast factor applied to each head's post-softmax map.
///
/// `q` is `[heads, Hq, Wq, d]`, `k` and `v` are `[heads, Hk, Wk, d]`; the
/// result has the shape of `q`.
pub fn styled_attention<S: Scalar>(
    q: &HeadFeatures<S>,
    k: &HeadFeatures<S>,
    v: &HeadFeatures<S>,
    head_dim: usize,
    beta: S,
) -> Result<HeadFeatures<S>> {
    let (heads, hq, wq, d) = q.dim();
    let (kh, hk, wk, kd) = k.dim();
    if kh != heads || kd != d || k.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "styled_attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut out = Array4::<S>::zeros((heads, hq, wq, d));
    for h in 0..heads {
        let qh = q.index_axis(Axis(0), h);
        let qh = qh.to_shape((hq * wq, d)).map_err(|e| Error::Shape(e.to_string()))?;
        let kh = k.index_axis(Axis(0), h);
        let kh = kh.to_shape((hk * wk, d)).map_err(|e| Error::Shape(e.to_string()))?;
        let vh = v.index_axis(Axis(0), h);
        let vh = vh.to_shape((hk * wk, d)).map_err(|e| Error::Shape(e.to_string()))?;
        let mut map = attention_map(qh.view(), kh.view(), head_dim)?;
        contrast_adjust(&mut map, beta);
        let o = map.dot(&vh);
        let o = o.into_shape_with_order((hq, wq, d)).map_err(|e| Error::Shape(e.to_string()))?;
        out.index_axis_mut(Axis(0), h).assign(&o);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn fuse_identity_cases() {
        let a = Array4::from_shape_fn((2, 2, 1, 2), |(h, y, x, c)| (h + 2 * y + 3 * x + 5 * c) as f64);
        let b = a.mapv(|x| -2.0 * x + 1.0);
        assert_eq!(fuse_queries(&a, &b, 1.0, 0.0).unwrap(), a);
        assert_eq!(fuse_queries(&a, &b, 0.0, 1.0).unwrap(), b);
        let bad = Array4::<f64>::zeros((2, 2, 2, 2));
        assert!(fuse_queries(&a, &bad, 1.0, 0.5).is_err());
    }

    #[test]
    fn contrast_row_cases() {
        let mut row = [0.7f64, 0.2, 0.1];
        let before = row;
        contrast_adjust_row(&mut row, 1.0);
        assert_eq!(row, before);

        let mut uniform = [0.25f64; 4];
        contrast_adjust_row(&mut uniform, 1.67);
        for x in uniform {
            assert!((x - 0.25).abs() < 1e-15);
        }

        // mean 1/3; 1.67*(0.7-1/3)+1/3 = 0.945555.., 1.67*(0.2-1/3)+1/3 = 0.110666..,
        // 1.67*(0.1-1/3)+1/3 = -0.056333.. -> 0; total 1.056222..
        let mut row = [0.7f64, 0.2, 0.1];
        contrast_adjust_row(&mut row, 1.67);
        let m = 1.0 / 3.0;
        let a = 1.67 * (0.7 - m) + m;
        let b = 1.67 * (0.2 - m) + m;
        assert!((row[0] - a / (a + b)).abs() < 1e-12);
        assert!((row[1] - b / (a + b)).abs() < 1e-12);
        assert_eq!(row[2], 0.0);
    }

    #[test]
    fn contrast_all_clipped_row_falls_back() {
        // the unclipped row sums to n * mean, so only a zero row clips away entirely
        let mut zeros = [0.0f64, 0.0];
        contrast_adjust_row(&mut zeros, 2.0);
        assert_eq!(zeros, [0.0, 0.0]);
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = Array4::from_shape_fn((1, 2, 2, 3), |(_, y, x, c)| (y * 7 + x * 3 + c) as f64 - 4.0);
        let k = array![[[[0.3, -1.0, 2.0]]]];
        let v = array![[[[5.0, 6.0, 7.0]]]];
        let out = styled_attention(&q, &k, &v, 3, 1.67).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    assert!((out[[0, y, x, c]] - v[[0, 0, 0, c]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let q = array![[[[0.0f64, 0.0, 1.0]]]];
        let k = array![[[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]]];
        let v = array![[[[2.0, 4.0, 6.0], [0.0, 0.0, 2.0]]]];
        let out = styled_attention(&q, &k, &v, 3, 1.0).unwrap();
        assert!((out[[0, 0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!((out[[0, 0, 0, 1]] - 2.0).abs() < 1e-12);
        assert!((out[[0, 0, 0, 2]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_mismatched_heads() {
        let q = Array4::<f64>::zeros((2, 2, 2, 3));
        let k = Array4::<f64>::zeros((1, 2, 2, 3));
        assert!(styled_attention(&q, &k, &k, 3, 1.0).is_err());
    }

    #[test]
    fn non_finite_logits_error() {
        let q = array![[[[f64::INFINITY]]]];
        let k = array![[[[1.0]]]];
        assert!(styled_attention(&q, &k, &k, 1, 1.0).is_err());
    }
}
