//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

/// Power iteration tolerance (relative change of the Rayleigh quotient).
pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 10_000;

/// Thin SVD truncated to the leading `k` singular triplets, sorted by
/// non-increasing singular value and sign-normalized.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// Computes the leading `k` singular triplets of `m` (`k` is clipped to
/// `min(rows, cols)`).
pub fn truncated_svd(m: &DMatrix<f64>, k: usize) -> TruncatedSvd {
    let (rows, cols) = m.shape();
    let k = k.min(rows).min(cols);
    if k == 0 {
        return TruncatedSvd {
            u: DMatrix::zeros(rows, 0),
            singular_values: DVector::zeros(0),
            v: DMatrix::zeros(cols, 0),
        };
    }
    let (u_full, values, v_full) = thin_svd(m);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut u = DMatrix::zeros(rows, k);
    let mut v = DMatrix::zeros(cols, k);
    let mut s = DVector::zeros(k);
    for (j, &idx) in order.iter().take(k).enumerate() {
        u.set_column(j, &u_full.column(idx));
        v.set_column(j, &v_full.column(idx));
        s[j] = values[idx];
    }
    normalize_signs(&mut u, &mut v);
    TruncatedSvd {
        u,
        singular_values: s,
        v,
    }
}

/// Full thin SVD (U, σ, V) with `min(rows, cols)` triplets.
///
/// Backed by faer: the nalgebra 0.35 bidiagonal SVD returns wrong factors on
/// exactly rank-deficient inputs such as noiseless panels.
pub fn thin_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return (DMatrix::zeros(rows, 0), vec![], DMatrix::zeros(cols, 0));
    }
    let fm = faer::MatRef::from_column_major_slice(m.as_slice(), rows, cols);
    let svd = fm.thin_svd().expect("SVD failed to converge");
    let (fu, fs, fv) = (svd.U(), svd.S(), svd.V());
    let u = DMatrix::from_fn(rows, k, |i, j| fu[(i, j)]);
    let v = DMatrix::from_fn(cols, k, |i, j| fv[(i, j)]);
    let s = (0..k).map(|j| fs[j]).collect();
    (u, s, v)
}

/// Least-squares solution of `a x = b` for `a` with full column rank.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (u, s, v) = thin_svd(a);
    let mut coef = u.transpose() * b;
    for (c, sv) in coef.iter_mut().zip(&s) {
        *c = if *sv > 0.0 { *c / sv } else { 0.0 };
    }
    v * coef
}

/// Flips each singular pair so the largest-magnitude entry of every left
/// singular vector is positive. Ties on magnitude resolve to the lowest row.
pub fn normalize_signs(u: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    for j in 0..u.ncols() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..u.nrows() {
            let a = u[(i, j)].abs();
            if a > best_abs * (1.0 + 1e-12) {
                best = i;
                best_abs = a;
            }
        }
        if u.nrows() > 0 && u[(best, j)] < 0.0 {
            u.column_mut(j).neg_mut();
            v.column_mut(j).neg_mut();
        }
    }
}

/// Largest singular value by power iteration on the smaller Gram matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let gram = if rows <= cols {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    let d = gram.nrows();
    // Deterministic start with weight on every coordinate.
    let mut x = DVector::from_fn(d, |i, _| 1.0 + (i as f64 * 0.618_033_988_75).fract());
    x.normalize_mut();
    let mut lambda = 0.0_f64;
    for _ in 0..POWER_MAX_ITER {
        let y = &gram * &x;
        let norm = y.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = x.dot(&y);
        x = y / norm;
        if (next - lambda).abs() <= POWER_TOL * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // One more Rayleigh quotient with the final iterate.
    let rq = x.dot(&(&gram * &x));
    rq.max(lambda).max(0.0).sqrt()
}

/// Solves `a x = b` for symmetric positive-definite `a` via Cholesky and also
/// returns the inverse.
pub fn spd_solve_with_inverse(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let chol = a.clone().cholesky()?;
    let x = chol.solve(b);
    let inv = chol.inverse();
    Some((x, inv))
}

/// Row `i` of `m` as an owned vector.
pub fn row_vec(m: &DMatrix<f64>, i: usize) -> DVector<f64> {
    m.row(i).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_norm_matches_svd() {
        let m = DMatrix::from_fn(7, 4, |i, j| ((i * 3 + j * 5) % 7) as f64 - 2.5 + 0.1 * j as f64);
        let expected = (m.transpose() * &m).symmetric_eigen().eigenvalues.max().sqrt();
        assert!((spectral_norm(&m) - expected).abs() < 1e-8 * expected);
        assert_eq!(spectral_norm(&DMatrix::zeros(3, 3)), 0.0);
    }

    #[test]
    fn truncated_svd_sorted_and_signed() {
        let m = DMatrix::from_fn(6, 5, |i, j| ((i + 1) as f64).powi(j as i32 % 3) - (j as f64));
        let t = truncated_svd(&m, 3);
        assert_eq!(t.u.shape(), (6, 3));
        assert_eq!(t.v.shape(), (5, 3));
        for j in 1..3 {
            assert!(t.singular_values[j] <= t.singular_values[j - 1]);
        }
        for j in 0..3 {
            let col = t.u.column(j);
            let imax = col.iamax();
            assert!(col[imax] > 0.0);
        }
    }

    #[test]
    fn rank_deficient_svd_reconstructs() {
        let ones = DMatrix::from_element(6, 4, 1.0);
        let t = truncated_svd(&ones, 1);
        assert!((t.singular_values[0] - 24f64.sqrt()).abs() < 1e-12);
        for v in t.u.iter() {
            assert!((v - 1.0 / 6f64.sqrt()).abs() < 1e-12);
        }
        let a = DMatrix::from_fn(7, 2, |i, j| (i as f64 + 1.0).powi(j as i32 + 1));
        let b = DMatrix::from_fn(2, 8, |i, j| ((i + 2 * j) % 5) as f64 - 2.0);
        let m = a * b;
        let (u, s, v) = thin_svd(&m);
        let rebuilt = u * DMatrix::from_diagonal(&DVector::from_vec(s)) * v.transpose();
        assert!((rebuilt - &m).amax() < 1e-10 * m.amax());
    }

    #[test]
    fn spd_solve_recovers_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let (x, inv) = spd_solve_with_inverse(&a, &b).unwrap();
        assert!((&a * &x - &b).norm() < 1e-12);
        assert!((&a * inv - DMatrix::identity(2, 2)).norm() < 1e-12);
    }
}
