//! Reference implementations used only by the test suites. None of these
//! touch the crate's SVD path.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Exact rank and pivot columns of an integer matrix by fraction-free
/// (Bareiss) elimination. Entries must be small enough that every minor fits
/// in an `i128`.
pub fn exact_rank(rows: &[Vec<i64>]) -> (usize, Vec<usize>) {
    let m = rows.len();
    let n = rows.first().map_or(0, |r| r.len());
    let mut a: Vec<Vec<i128>> = rows.iter().map(|r| r.iter().map(|&x| x as i128).collect()).collect();
    let mut prev: i128 = 1;
    let mut r = 0;
    let mut pivots = Vec::new();
    for c in 0..n {
        if r == m {
            break;
        }
        let Some(p) = (r..m).find(|&i| a[i][c] != 0) else { continue };
        a.swap(r, p);
        for i in r + 1..m {
            for j in c + 1..n {
                let num = a[r][c] * a[i][j] - a[i][c] * a[r][j];
                assert_eq!(num % prev, 0, "Bareiss division must be exact");
                a[i][j] = num / prev;
            }
            a[i][c] = 0;
        }
        prev = a[r][c];
        pivots.push(c);
        r += 1;
    }
    (r, pivots)
}

/// Least squares `min ‖K y − b‖` for `K` of full column rank, by modified
/// Gram-Schmidt run twice and back substitution.
pub fn full_rank_lstsq(k: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    // k is given column-wise
    let r = k.len();
    let mut q: Vec<Vec<f64>> = k.to_vec();
    let mut rr = vec![vec![0.0; r]; r];
    for j in 0..r {
        for _ in 0..2 {
            for i in 0..j {
                let c: f64 = q[i].iter().zip(&q[j]).map(|(x, y)| x * y).sum();
                rr[i][j] += c;
                let qi = q[i].clone();
                q[j].iter_mut().zip(&qi).for_each(|(x, y)| *x -= c * y);
            }
        }
        let nrm = q[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        rr[j][j] = nrm;
        q[j].iter_mut().for_each(|x| *x /= nrm);
    }
    let mut y: Vec<f64> = q.iter().map(|qi| qi.iter().zip(b).map(|(x, z)| x * z).sum()).collect();
    for j in (0..r).rev() {
        for i in j + 1..r {
            y[j] -= rr[j][i] * y[i];
        }
        y[j] /= rr[j][j];
    }
    y
}

/// Minimum-norm `x` minimising `‖xᵀA − bᵀ‖` for an integer `A` (`m×n`).
///
/// The minimiser of least norm lies in the column space of `A`, which the
/// exact pivot columns `B` span, so `x = B y` with `y` the unique
/// least-squares solution of `(AᵀB) y ≈ b`.
pub fn min_norm_oracle(a: &[Vec<i64>], b: &[f64]) -> Vec<f64> {
    let m = a.len();
    let n = b.len();
    let (rank, pivots) = exact_rank(a);
    if rank == 0 {
        return vec![0.0; m];
    }
    let af: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
    // column l of K is Aᵀ B_l, where B_l is column pivots[l] of A
    let k: Vec<Vec<f64>> = pivots
        .iter()
        .map(|&p| (0..n).map(|j| (0..m).map(|i| af[i][j] * af[i][p]).sum()).collect())
        .collect();
    let y = full_rank_lstsq(&k, b);
    (0..m).map(|i| pivots.iter().zip(&y).map(|(&p, yl)| af[i][p] * yl).sum()).collect()
}

/// `‖xᵀA − b‖²` in plain loops.
pub fn residual(a: &[Vec<f64>], x: &[f64], b: &[f64]) -> f64 {
    (0..b.len())
        .map(|j| {
            let v: f64 = a.iter().zip(x).map(|(row, xi)| row[j] * xi).sum();
            (v - b[j]).powi(2)
        })
        .sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Lower-triangular integer matrix. With `deficient` set, rank loss is
/// planted through zero diagonals, repeated rows and emptied columns;
/// otherwise the diagonal is nonzero and the matrix is invertible.
pub fn int_lower_triangular(rng: &mut ChaCha8Rng, t: usize, deficient: bool) -> Vec<Vec<i64>> {
    let mut w = vec![vec![0i64; t]; t];
    for i in 0..t {
        if deficient && i > 0 && rng.random_bool(0.15) {
            let j = rng.random_range(0..i);
            w[i] = w[j].clone();
            continue;
        }
        for j in 0..i {
            if rng.random_bool(0.5) {
                w[i][j] = rng.random_range(-2..=2);
            }
        }
        if !deficient || !rng.random_bool(0.25) {
            w[i][i] = *[-2, -1, 1, 2].get(rng.random_range(0..4)).unwrap();
        }
    }
    for c in 0..t {
        if deficient && rng.random_bool(0.1) {
            w.iter_mut().for_each(|row| row[c] = 0);
        }
    }
    w
}
