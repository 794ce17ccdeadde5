//! Cox-de Boor basis and a normal-equations least-squares solve by
//! Gaussian elimination.

use illusign::trajectory::{chord_parameters, SplineCurve};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Cox-de Boor recursion; the last basis function is 1 at `u = 1`.
pub fn cox_de_boor(knots: &[f64], i: usize, p: usize, u: f64) -> f64 {
    if p == 0 {
        let last = knots.iter().rposition(|&k| k < knots[knots.len() - 1]).unwrap();
        if u == knots[knots.len() - 1] {
            return if i == last { 1.0 } else { 0.0 };
        }
        return if knots[i] <= u && u < knots[i + 1] { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + p] - knots[i];
    if d1 > 0.0 {
        v += (u - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, u);
    }
    let d2 = knots[i + p + 1] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + p + 1] - u) / d2 * cox_de_boor(knots, i + 1, p - 1, u);
    }
    v
}

pub fn eval_oracle(c: &SplineCurve<f64>, u: f64) -> [f64; 2] {
    let mut p = [0.0, 0.0];
    for (i, cp) in c.control.iter().enumerate() {
        let b = cox_de_boor(&c.knots, i, c.degree, u);
        p[0] += b * cp[0];
        p[1] += b * cp[1];
    }
    p
}

fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Endpoint-constrained least squares on the same knots via normal equations.
pub fn oracle_mse(points: &[[f64; 2]], knots: &[f64], degree: usize, n: usize) -> f64 {
    let u = chord_parameters(points);
    let s = points.len();
    let basis = |k: usize, i: usize| cox_de_boor(knots, i, degree, u[k]);
    let (p0, pn) = (points[0], points[s - 1]);
    let m = n - 2;
    let mut ctrl = vec![p0; n];
    ctrl[n - 1] = pn;
    for dim in 0..2 {
        let mut ata = vec![vec![0.0; m]; m];
        let mut atb = vec![0.0; m];
        for k in 1..s - 1 {
            let r = points[k][dim] - basis(k, 0) * p0[dim] - basis(k, n - 1) * pn[dim];
            for a in 0..m {
                atb[a] += basis(k, a + 1) * r;
                for b in 0..m {
                    ata[a][b] += basis(k, a + 1) * basis(k, b + 1);
                }
            }
        }
        for (i, v) in gauss_solve(ata, atb).into_iter().enumerate() {
            ctrl[i + 1][dim] = v;
        }
    }
    let curve = SplineCurve::new(degree, knots.to_vec(), ctrl).unwrap();
    points.iter().zip(&u).map(|(p, &t)| {
        let q = eval_oracle(&curve, t);
        (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)
    }).sum::<f64>() / s as f64
}

pub fn random_track(rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let len = rng.random_range(6..=12);
    let mut p = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    (0..len)
        .map(|_| {
            p = [p[0] + rng.random_range(-0.1..0.1), p[1] + rng.random_range(-0.1..0.1)];
            p
        })
        .collect()
}
