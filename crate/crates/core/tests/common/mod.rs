//! Brute-force oracles for the attention-core operations and a seeded case
//! generator shared by the property suites and the acceptance run.
#![allow(dead_code)]

pub mod spline;

use illusign::attention::{contrast_adjust, fuse_queries, styled_attention};
use illusign::overlay::{compose_queries, dissimilarity_mask, query_similarity, MaskKind, SpatialMask};
use illusign::style::adain;
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    FuseQueries,
    StyledAttention,
    ContrastAdjust,
    Adain,
    QuerySimilarity,
    DissimilarityMask,
    ComposeQueries,
}

pub const OPS: [Op; 7] = [
    Op::FuseQueries,
    Op::StyledAttention,
    Op::ContrastAdjust,
    Op::Adain,
    Op::QuerySimilarity,
    Op::DissimilarityMask,
    Op::ComposeQueries,
];

pub fn feats(rng: &mut ChaCha8Rng, heads: usize, h: usize, w: usize, d: usize) -> Array4<f64> {
    Array4::from_shape_simple_fn((heads, h, w, d), || rng.random_range(-2.0..2.0))
}

fn binary(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((h, w), || if rng.random_bool(p) { 1.0 } else { 0.0 })
}

pub fn max_diff<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn contrast_row(row: &[f64], beta: f64) -> Vec<f64> {
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    let clipped: Vec<f64> = row.iter().map(|a| f64::max(beta * (a - mean) + mean, 0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        return row.to_vec();
    }
    clipped.iter().map(|a| a / total).collect()
}

pub fn styled(q: &Array4<f64>, k: &Array4<f64>, v: &Array4<f64>, head_dim: usize, beta: f64) -> Array4<f64> {
    let (heads, hq, wq, d) = q.dim();
    let (_, hk, wk, _) = k.dim();
    let mut out = Array4::zeros((heads, hq, wq, d));
    for h in 0..heads {
        for qy in 0..hq {
            for qx in 0..wq {
                let mut logits = Vec::new();
                for ky in 0..hk {
                    for kx in 0..wk {
                        let dot: f64 = (0..d).map(|c| q[[h, qy, qx, c]] * k[[h, ky, kx, c]]).sum();
                        logits.push(dot / (head_dim as f64).sqrt());
                    }
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                let p = contrast_row(&e.iter().map(|x| x / s).collect::<Vec<_>>(), beta);
                for c in 0..d {
                    let mut acc = 0.0;
                    for (j, pj) in p.iter().enumerate() {
                        acc += pj * v[[h, j / wk, j % wk, c]];
                    }
                    out[[h, qy, qx, c]] = acc;
                }
            }
        }
    }
    out
}

pub fn adain_oracle(c: &Array3<f64>, s: &Array3<f64>) -> Array3<f64> {
    let stats = |a: &Array3<f64>, ch: usize| {
        let vals: Vec<f64> = a.index_axis(ndarray::Axis(0), ch).iter().cloned().collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        (m, v.sqrt())
    };
    let mut out = c.clone();
    for ch in 0..c.shape()[0] {
        let (mc, sc) = stats(c, ch);
        let (ms, ss) = stats(s, ch);
        for y in 0..c.shape()[1] {
            for x in 0..c.shape()[2] {
                out[[ch, y, x]] = if sc == 0.0 { ms } else { (c[[ch, y, x]] - mc) / sc * ss + ms };
            }
        }
    }
    out
}

pub fn similarity(q1: &Array4<f64>, q2: &Array4<f64>) -> Array2<f64> {
    let (heads, h, w, d) = q1.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut total = 0.0;
        for hd in 0..heads {
            let a: Vec<f64> = (0..d).map(|c| q1[[hd, y, x, c]]).collect();
            let b: Vec<f64> = (0..d).map(|c| q2[[hd, y, x, c]]).collect();
            let dot: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
            let na = a.iter().map(|p| p * p).sum::<f64>().sqrt();
            let nb = b.iter().map(|p| p * p).sum::<f64>().sqrt();
            total += if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
        }
        total / heads as f64
    })
}

/// Pixels strictly below the linearly interpolated order statistic at rank
/// `q (n - 1)`.
pub fn dissimilarity(sim: &Array2<f64>, q: f64) -> Array2<f64> {
    let n = sim.len();
    let rank = q * (n - 1) as f64;
    let nth = |k: usize| {
        // k-th smallest by counting, no sort
        *sim.iter()
            .find(|&&v| {
                let below = sim.iter().filter(|&&u| u < v).count();
                let equal = sim.iter().filter(|&&u| u == v).count();
                below <= k && k < below + equal
            })
            .unwrap()
    };
    let (lo, hi) = (nth(rank.floor() as usize), nth(rank.ceil() as usize));
    let t = lo + (hi - lo) * (rank - rank.floor());
    sim.mapv(|v| if v < t { 1.0 } else { 0.0 })
}

/// Per-pixel case analysis for disjoint `m1`, `m2`.
pub fn compose_cases(q1: &Array4<f64>, q2: &Array4<f64>, md: &Array2<f64>, m1: &Array2<f64>, m2: &Array2<f64>) -> Array4<f64> {
    let mut out = q1.clone();
    for ((h, y, x, c), v) in out.indexed_iter_mut() {
        *v = if m2[[y, x]] == 1.0 {
            q2[[h, y, x, c]]
        } else if m1[[y, x]] == 1.0 {
            q1[[h, y, x, c]]
        } else if md[[y, x]] == 1.0 {
            q2[[h, y, x, c]]
        } else {
            q1[[h, y, x, c]]
        };
    }
    out
}

/// Runs one random case of `op` (at most 2 heads, 4x4 spatial) and returns
/// the largest deviation from its oracle.
pub fn check(op: Op, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..=2);
    let (h, w, d) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    match op {
        Op::FuseQueries => {
            let (a, b) = (feats(&mut rng, heads, h, w, d), feats(&mut rng, heads, h, w, d));
            let (g, dl) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
            let got = fuse_queries(&a, &b, g, dl).unwrap();
            let want = Array4::from_shape_fn(a.dim(), |i| g * a[i] + dl * b[i]);
            max_diff(&got, &want)
        }
        Op::StyledAttention => {
            let q = feats(&mut rng, heads, h, w, d);
            let (hk, wk) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let (k, v) = (feats(&mut rng, heads, hk, wk, d), feats(&mut rng, heads, hk, wk, d));
            let beta = rng.random_range(0.5..2.5);
            let got = styled_attention(&q, &k, &v, d, beta).unwrap();
            max_diff(&got, &styled(&q, &k, &v, d, beta))
        }
        Op::ContrastAdjust => {
            let (rows, cols) = (h * w, rng.random_range(1..=16));
            let mut map = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(0.0..1.0));
            for mut r in map.rows_mut() {
                let s = r.sum();
                r.mapv_inplace(|x| x / s);
            }
            let beta = rng.random_range(0.3..3.0);
            let want = Array2::from_shape_fn((rows, cols), |(i, j)| contrast_row(&map.row(i).to_vec(), beta)[j]);
            contrast_adjust(&mut map, beta);
            max_diff(&map, &want)
        }
        Op::Adain => {
            let ch = rng.random_range(1..=4);
            let c = Array3::from_shape_simple_fn((ch, h, w), || rng.random_range(-3.0..3.0));
            let s = Array3::from_shape_simple_fn((ch, rng.random_range(1..=4), rng.random_range(1..=4)), || rng.random_range(-1.0..5.0));
            max_diff(&adain(&c, &s).unwrap(), &adain_oracle(&c, &s))
        }
        Op::QuerySimilarity => {
            let (a, b) = (feats(&mut rng, heads, h, w, d), feats(&mut rng, heads, h, w, d));
            max_diff(&query_similarity(&a, &b).unwrap().values, &similarity(&a, &b))
        }
        Op::DissimilarityMask => {
            let sim = Array2::from_shape_simple_fn((h, w), || rng.random_range(-1.0..1.0));
            let q = rng.random_range(0.01..0.99);
            let got = dissimilarity_mask(&SpatialMask::new(sim.clone(), MaskKind::Similarity).unwrap(), q);
            max_diff(&got.values, &dissimilarity(&sim, q))
        }
        Op::ComposeQueries => {
            let (a, b) = (feats(&mut rng, heads, h, w, d), feats(&mut rng, heads, h, w, d));
            let md = binary(&mut rng, h, w, 0.4);
            let m1 = binary(&mut rng, h, w, 0.3);
            let m2 = binary(&mut rng, h, w, 0.3).mapv(|v| v) * m1.mapv(|v| 1.0 - v);
            let got = compose_queries(&a, &b, &md, &m1, &m2).unwrap();
            max_diff(&got, &compose_cases(&a, &b, &md, &m1, &m2))
        }
    }
}
