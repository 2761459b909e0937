//! Small dense helpers shared by the solvers.
//!
//! Definiteness is decided by the pivots of an unpivoted LDL^T factorization.
//! The same factorization backs the positive-definite linear solves, so "the
//! solve succeeded" and "the matrix passed the PD check" are one code path.

use nalgebra::{DMatrix, DVector};

/// Pivots at or below this (times the matrix scale) fail the PD test.
pub const PD_PIVOT_TOL: f64 = 1e-12;

/// Pivots below this (times the matrix scale) fail the PSD test.
pub const PSD_PIVOT_FLOOR: f64 = -1e-10;

/// Symmetry is enforced on inputs up to this absolute asymmetry.
pub const SYMMETRY_TOL: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// max |X - X^T| over all entries.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        worst = worst.max((x - y).abs());
    }
    worst
}

/// Unpivoted LDL^T of a symmetric matrix: A = L D L^T with unit lower L.
///
/// Elimination only divides by pivots above `PD_PIVOT_TOL * scale`. A smaller
/// pivot is structurally zero: its column is skipped and the largest live
/// subdiagonal entry under it is recorded in `defect`. A PSD matrix has a zero
/// column wherever its pivot vanishes, so a nonzero defect certifies
/// indefiniteness no matter what the remaining pivots look like.
pub struct Ldlt {
    l: DMatrix<f64>,
    d: DVector<f64>,
    defect: f64,
    scale: f64,
}

impl Ldlt {
    pub fn new(a: &DMatrix<f64>) -> Ldlt {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let scale = max_abs(a).max(1.0);
        let mut work = a.clone_owned();
        let mut l = DMatrix::<f64>::identity(n, n);
        let mut d = DVector::<f64>::zeros(n);
        let mut defect = 0.0f64;
        for j in 0..n {
            let piv = work[(j, j)];
            d[j] = piv;
            if piv <= PD_PIVOT_TOL * scale {
                for i in (j + 1)..n {
                    defect = defect.max(work[(i, j)].abs());
                }
                continue;
            }
            for i in (j + 1)..n {
                l[(i, j)] = work[(i, j)] / piv;
            }
            for i in (j + 1)..n {
                for k in (j + 1)..=i {
                    work[(i, k)] -= l[(i, j)] * piv * l[(k, j)];
                    work[(k, i)] = work[(i, k)];
                }
            }
        }
        Ldlt { l, d, defect, scale }
    }

    pub fn pivots(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn is_positive_definite(&self) -> bool {
        self.d.iter().all(|&p| p > PD_PIVOT_TOL * self.scale)
    }

    pub fn is_positive_semidefinite(&self) -> bool {
        self.d.iter().all(|&p| p >= PSD_PIVOT_FLOOR * self.scale)
            && self.defect <= 1e-8 * self.scale
    }

    /// Solves A X = B. None unless the factorization passed the PD test.
    pub fn solve(&self, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        if !self.is_positive_definite() {
            return None;
        }
        let n = self.d.len();
        let mut x = b.clone_owned();
        for col in 0..x.ncols() {
            // L y = b
            for i in 0..n {
                let mut s = x[(i, col)];
                for k in 0..i {
                    s -= self.l[(i, k)] * x[(k, col)];
                }
                x[(i, col)] = s;
            }
            for i in 0..n {
                x[(i, col)] /= self.d[i];
            }
            // L^T z = y
            for i in (0..n).rev() {
                let mut s = x[(i, col)];
                for k in (i + 1)..n {
                    s -= self.l[(k, i)] * x[(k, col)];
                }
                x[(i, col)] = s;
            }
        }
        Some(x)
    }
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    Ldlt::new(m).is_positive_definite()
}

pub fn is_positive_semidefinite(m: &DMatrix<f64>) -> bool {
    Ldlt::new(m).is_positive_semidefinite()
}

/// Symmetric factor S with S S^T = m, for sampling from N(0, m).
/// Eigenvalues within roundoff below zero are clamped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone_owned().symmetric_eigen();
    let n = m.nrows();
    let mut s = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let lam = eig.eigenvalues[j].max(0.0);
        let col = eig.eigenvectors.column(j) * lam.sqrt();
        s.column_mut(j).copy_from(&col);
    }
    s
}
