//! Recovery of the shared common factors from donor observations.
//!
//! `estimate_factors` is the reference truncated-SVD estimator. The epoch
//! loop needs the same estimate after every new donor column, so
//! [`FactorTracker`] maintains the donor Gram matrix incrementally and
//! refreshes the leading eigenvectors by warm-started subspace iteration,
//! falling back to the full SVD whenever the iteration does not converge.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{normalize_signs, spectral_norm, truncated_svd};
use crate::panel::PanelData;

/// PCA-loadings estimate of the common factors over `t` epochs.
///
/// All matrices carry `r` columns; when fewer than `r` singular values are
/// available (`rank_used < r`) the trailing columns are zero.
#[derive(Debug, Clone)]
pub struct LatentEstimate {
    /// t x r, row s is ẑ_s.
    pub z_hat: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    /// n x r left singular vectors.
    pub u_hat: DMatrix<f64>,
    pub rank_used: usize,
}

impl LatentEstimate {
    pub fn empty(n: usize, r: usize) -> Self {
        Self {
            z_hat: DMatrix::zeros(0, r),
            singular_values: DVector::zeros(r),
            u_hat: DMatrix::zeros(n, r),
            rank_used: 0,
        }
    }

    pub fn epochs(&self) -> usize {
        self.z_hat.nrows()
    }

    pub fn rank(&self) -> usize {
        self.z_hat.ncols()
    }

    /// Loadings estimate Λ̂ = √n Û.
    pub fn loadings(&self) -> DMatrix<f64> {
        &self.u_hat * (self.u_hat.nrows() as f64).sqrt()
    }
}

fn from_svd(u: DMatrix<f64>, s: DVector<f64>, v: DMatrix<f64>, n: usize, r: usize) -> LatentEstimate {
    let k = s.len();
    let t = v.nrows();
    let sqrt_n = (n as f64).sqrt();
    let mut z_hat = DMatrix::zeros(t, r);
    let mut u_hat = DMatrix::zeros(n, r);
    let mut singular_values = DVector::zeros(r);
    for j in 0..k {
        z_hat.set_column(j, &(v.column(j) * (s[j] / sqrt_n)));
        u_hat.set_column(j, &u.column(j));
        singular_values[j] = s[j];
    }
    LatentEstimate {
        z_hat,
        singular_values,
        u_hat,
        rank_used: k,
    }
}

/// Rank-`min(r, t, n)` PCA loadings Ẑ = V̂ʳΣ̂ʳ/√n of the n x t donor matrix.
pub fn estimate_factors(donors: &DMatrix<f64>, r: usize) -> LatentEstimate {
    let (n, t) = donors.shape();
    if n == 0 || t == 0 {
        return LatentEstimate::empty(n, r);
    }
    let svd = truncated_svd(donors, r.min(n).min(t));
    from_svd(svd.u, svd.singular_values, svd.v, n, r)
}

/// Orthogonal Procrustes: the orthogonal Φ minimizing ‖A − BΦ‖_F, and the
/// spectral-norm residual ‖A − BΦ‖.
pub fn procrustes_align(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    assert_eq!(a.shape(), b.shape(), "procrustes_align: shapes differ");
    let cross = b.transpose() * a;
    let (u, _, v) = crate::linalg::thin_svd(&cross);
    let phi = u * v.transpose();
    let residual = spectral_norm(&(a - b * &phi));
    (phi, residual)
}

/// Simplified high-probability bound 5σ√(n ∨ t) on the spectral norm of an
/// n x t i.i.d. N(0, σ²) matrix.
pub fn spectral_noise_bound(n: usize, t: usize, sigma: f64) -> f64 {
    5.0 * sigma * (n.max(t) as f64).sqrt()
}

/// Latent-recovery radius α = 20σ√((n ∨ T)/n) of the clean event.
pub fn recovery_radius(sigma: f64, n: usize, horizon: usize) -> f64 {
    20.0 * sigma * (n.max(horizon) as f64 / n as f64).sqrt()
}

const SUBSPACE_TOL: f64 = 1e-12;
const SUBSPACE_MAX_ITER: usize = 300;

/// Incremental factor estimator for a growing donor panel.
#[derive(Debug, Clone)]
pub struct FactorTracker {
    n: usize,
    r: usize,
    gram: DMatrix<f64>,
    columns: Vec<f64>,
    basis: Option<DMatrix<f64>>,
}

impl FactorTracker {
    pub fn new(n: usize, r: usize) -> Self {
        Self {
            n,
            r,
            gram: DMatrix::zeros(n, n),
            columns: Vec::new(),
            basis: None,
        }
    }

    pub fn epochs(&self) -> usize {
        self.columns.len().checked_div(self.n).unwrap_or(0)
    }

    pub fn push_column(&mut self, column: &[f64]) {
        assert_eq!(column.len(), self.n, "donor column length");
        let c = DVector::from_column_slice(column);
        self.gram.ger(1.0, &c, &c, 1.0);
        self.columns.extend_from_slice(column);
    }

    fn donors(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.epochs(), &self.columns)
    }

    /// Estimate over every column pushed so far. Agrees with
    /// `estimate_factors` on the same data up to the iteration tolerance.
    pub fn estimate(&mut self) -> LatentEstimate {
        let m = self.epochs();
        let k = self.r.min(self.n).min(m);
        if m == 0 {
            return LatentEstimate::empty(self.n, self.r);
        }
        let small = self.n.min(m) <= 2 * self.r + 4;
        if small || k < self.r {
            let est = estimate_factors(&self.donors(), self.r);
            self.basis = Some(est.u_hat.columns(0, k).into_owned());
            return est;
        }
        let start = match &self.basis {
            Some(b) if b.ncols() == k => b.clone(),
            _ => {
                let est = estimate_factors(&self.donors(), self.r);
                self.basis = Some(est.u_hat.columns(0, k).into_owned());
                return est;
            }
        };
        match self.subspace_iteration(start) {
            Some(u) => {
                let y = self.donors();
                let mut scores = y.tr_mul(&u);
                let mut u = u;
                let s = DVector::from_iterator(k, scores.column_iter().map(|c| c.norm()));
                for j in 0..k {
                    if s[j] > 0.0 {
                        scores.column_mut(j).unscale_mut(s[j]);
                    }
                }
                normalize_signs(&mut u, &mut scores);
                self.basis = Some(u.clone());
                from_svd(u, s, scores, self.n, self.r)
            }
            None => {
                let est = estimate_factors(&self.donors(), self.r);
                self.basis = Some(est.u_hat.columns(0, k).into_owned());
                est
            }
        }
    }

    fn subspace_iteration(&self, start: DMatrix<f64>) -> Option<DMatrix<f64>> {
        let k = start.ncols();
        let mut q = start.qr().q();
        for _ in 0..SUBSPACE_MAX_ITER {
            let w = &self.gram * &q;
            let h = q.tr_mul(&w);
            let h = (&h + h.transpose()) * 0.5;
            let eig = h.symmetric_eigen();
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| {
                eig.eigenvalues[b]
                    .partial_cmp(&eig.eigenvalues[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let s = DMatrix::from_fn(k, k, |i, j| eig.eigenvectors[(i, order[j])]);
            let theta: Vec<f64> = order.iter().map(|&j| eig.eigenvalues[j]).collect();
            let ritz = &q * &s;
            let gw = &w * &s;
            let top = theta[0].abs().max(f64::MIN_POSITIVE);
            let converged = (0..k).all(|j| {
                let resid = gw.column(j) - ritz.column(j) * theta[j];
                resid.norm() <= SUBSPACE_TOL * top
            });
            if converged {
                return Some(ritz);
            }
            q = w.qr().q();
        }
        None
    }
}

/// Factor estimates for every prefix length `m` in `[first, last]` of a
/// fixed donor panel, with the Gram matrices ẐᵀẐ precomputed.
#[derive(Debug, Clone)]
pub struct FactorPath {
    first: usize,
    snapshots: Vec<LatentEstimate>,
    grams: Vec<DMatrix<f64>>,
    columns: Vec<f64>,
    n: usize,
}

impl FactorPath {
    pub fn build(panel_donors: &DMatrix<f64>, r: usize, first: usize, last: usize) -> Self {
        let n = panel_donors.nrows();
        assert!(first <= last && last <= panel_donors.ncols());
        let mut tracker = FactorTracker::new(n, r);
        let mut snapshots = Vec::with_capacity(last - first + 1);
        let mut grams = Vec::with_capacity(last - first + 1);
        for m in 0..=last {
            if m > 0 {
                let col: Vec<f64> = panel_donors.column(m - 1).iter().copied().collect();
                tracker.push_column(&col);
            }
            if m >= first {
                let est = tracker.estimate();
                grams.push(est.z_hat.tr_mul(&est.z_hat));
                snapshots.push(est);
            }
        }
        Self {
            first,
            snapshots,
            grams,
            columns: panel_donors.columns(0, last).iter().copied().collect(),
            n,
        }
    }

    pub fn from_panel(panel: &PanelData, r: usize) -> Self {
        Self::build(&panel.donor_matrix(panel.epochs()), r, panel.t0(), panel.epochs())
    }

    pub fn first(&self) -> usize {
        self.first
    }

    pub fn last(&self) -> usize {
        self.first + self.snapshots.len() - 1
    }

    /// Estimate over the first `m` epochs.
    pub fn at(&self, m: usize) -> (&LatentEstimate, &DMatrix<f64>) {
        let i = m
            .checked_sub(self.first)
            .filter(|i| *i < self.snapshots.len())
            .unwrap_or_else(|| panic!("factor path has no snapshot for {m} epochs"));
        (&self.snapshots[i], &self.grams[i])
    }

    /// Whether donor column `k` equals `column` (the path was built from the
    /// same panel the caller is observing).
    pub fn matches_column(&self, k: usize, column: &[f64]) -> bool {
        let lo = k * self.n;
        self.columns.get(lo..lo + self.n) == Some(column)
    }
}
