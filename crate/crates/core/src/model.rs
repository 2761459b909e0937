//! Problem data for the two-player game and its validation rules.
//!
//! Dynamics: x_{k+1} = A x_k + BL uL_k + BR uR_k + w_k for k = 0..N.
//! The local player sees the state perfectly; the remote player receives it
//! over an i.i.d. Bernoulli(p) erasure channel (the downlink back is perfect).
//! Each player minimizes its own quadratic cost with stage weights
//! (Q, S on uL, M on uR) and a terminal weight P_term.

use nalgebra::{DMatrix, DVector};

use crate::linalg;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    /// Controls act at stages 0..=N; the terminal cost sits at N+1.
    pub N: usize,
    /// Packet arrival probability of the uplink.
    pub p: f64,
    pub mu: DVector<f64>,
    pub A: DMatrix<f64>,
    pub BL: DMatrix<f64>,
    pub BR: DMatrix<f64>,
    pub QL: DMatrix<f64>,
    pub QR: DMatrix<f64>,
    pub SL: DMatrix<f64>,
    pub SR: DMatrix<f64>,
    pub ML: DMatrix<f64>,
    pub MR: DMatrix<f64>,
    pub PL_term: DMatrix<f64>,
    pub PR_term: DMatrix<f64>,
    pub Sigma_x0: DMatrix<f64>,
    pub Sigma_w: DMatrix<f64>,
}

/// Outcome of `GameSpec::validate`. Empty means the spec is usable.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            write!(f, "ok")
        } else {
            write!(f, "{}", self.violations.join("; "))
        }
    }
}

/// Stacked input matrix [BL BR] and the block-diagonal control weights
/// diag(SL, ML) and diag(SR, MR) used by the backward recursion.
#[derive(Debug, Clone)]
pub struct CompositeMatrices {
    pub Bcal: DMatrix<f64>,
    pub LambdaL: DMatrix<f64>,
    pub LambdaR: DMatrix<f64>,
}

impl GameSpec {
    /// Names and expected shapes of every matrix field.
    fn matrix_fields(&self) -> [(&'static str, &DMatrix<f64>, usize, usize); 13] {
        let (n, m1, m2) = (self.n, self.m1, self.m2);
        [
            ("A", &self.A, n, n),
            ("BL", &self.BL, n, m1),
            ("BR", &self.BR, n, m2),
            ("QL", &self.QL, n, n),
            ("QR", &self.QR, n, n),
            ("SL", &self.SL, m1, m1),
            ("SR", &self.SR, m1, m1),
            ("ML", &self.ML, m2, m2),
            ("MR", &self.MR, m2, m2),
            ("PL_term", &self.PL_term, n, n),
            ("PR_term", &self.PR_term, n, n),
            ("Sigma_x0", &self.Sigma_x0, n, n),
            ("Sigma_w", &self.Sigma_w, n, n),
        ]
    }

    const SYMMETRIC: [&'static str; 10] = [
        "QL", "QR", "SL", "SR", "ML", "MR", "PL_term", "PR_term", "Sigma_x0", "Sigma_w",
    ];
    const PSD: [&'static str; 6] = ["QL", "QR", "PL_term", "PR_term", "Sigma_x0", "Sigma_w"];
    const PD: [&'static str; 4] = ["SL", "SR", "ML", "MR"];

    /// Structural and definiteness checks. Collects every violation rather
    /// than stopping at the first.
    pub fn validate(&self) -> ValidationReport {
        let mut v = Vec::new();
        for (dim, name) in [(self.n, "n"), (self.m1, "m1"), (self.m2, "m2")] {
            if dim == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.p) {
            v.push(format!("p out of [0,1]: {}", self.p));
        }
        if self.mu.len() != self.n {
            v.push(format!("mu must have length {}, got {}", self.n, self.mu.len()));
        }
        if self.mu.iter().any(|x| !x.is_finite()) {
            v.push("mu has non-finite entries".into());
        }

        for (name, m, rows, cols) in self.matrix_fields() {
            if m.shape() != (rows, cols) {
                v.push(format!(
                    "{name} must be {rows}x{cols}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                ));
                return ValidationReport { violations: v }; // shape errors poison the rest
            }
            if m.iter().any(|x| !x.is_finite()) {
                v.push(format!("{name} has non-finite entries"));
            }
        }

        for (name, m, _, _) in self.matrix_fields() {
            if Self::SYMMETRIC.contains(&name) && linalg::asymmetry(m) > linalg::SYMMETRY_TOL {
                v.push(format!("{name} not symmetric (asymmetry {:.3e})", linalg::asymmetry(m)));
            }
        }
        for (name, m, _, _) in self.matrix_fields() {
            if Self::PSD.contains(&name) && !linalg::is_positive_semidefinite(&linalg::symmetrize(m)) {
                v.push(format!("{name} not positive semidefinite"));
            }
            if Self::PD.contains(&name) && !linalg::is_positive_definite(&linalg::symmetrize(m)) {
                v.push(format!("{name} not positive definite"));
            }
        }
        ValidationReport { violations: v }
    }

    /// Replaces each symmetric-by-contract matrix by (X + X^T)/2. Call after a
    /// successful `validate`; asymmetry beyond the tolerance is a violation,
    /// not something to be averaged away.
    pub fn symmetrized(mut self) -> GameSpec {
        for m in [
            &mut self.QL,
            &mut self.QR,
            &mut self.SL,
            &mut self.SR,
            &mut self.ML,
            &mut self.MR,
            &mut self.PL_term,
            &mut self.PR_term,
            &mut self.Sigma_x0,
            &mut self.Sigma_w,
        ] {
            *m = linalg::symmetrize(m);
        }
        self
    }

    /// [BL BR], diag(SL, ML), diag(SR, MR).
    pub fn composites(&self) -> Result<CompositeMatrices> {
        let (n, m1, m2) = (self.n, self.m1, self.m2);
        for (name, m, rows, cols) in self.matrix_fields() {
            if m.shape() != (rows, cols) {
                return Err(Error::Dimension(format!(
                    "{name} must be {rows}x{cols}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        let mut Bcal = DMatrix::<f64>::zeros(n, m1 + m2);
        Bcal.view_mut((0, 0), (n, m1)).copy_from(&self.BL);
        Bcal.view_mut((0, m1), (n, m2)).copy_from(&self.BR);

        let block = |top: &DMatrix<f64>, bot: &DMatrix<f64>| {
            let mut out = DMatrix::<f64>::zeros(m1 + m2, m1 + m2);
            out.view_mut((0, 0), (m1, m1)).copy_from(top);
            out.view_mut((m1, m1), (m2, m2)).copy_from(bot);
            out
        };
        Ok(CompositeMatrices {
            Bcal,
            LambdaL: block(&self.SL, &self.ML),
            LambdaR: block(&self.SR, &self.MR),
        })
    }
}

/// Bundled benchmark instance used by the `example-sec5` subcommand: a 2-state
/// system with one unstable mode per coordinate, identity weights, p = 0.5,
/// horizon 50. Unit covariances are used for the initial state and the noise.
pub fn sec5() -> GameSpec {
    let I2 = DMatrix::<f64>::identity(2, 2);
    GameSpec {
        n: 2,
        m1: 2,
        m2: 2,
        N: 50,
        p: 0.5,
        mu: DVector::zeros(2),
        A: DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 1.1]),
        BL: DMatrix::from_row_slice(2, 2, &[0.3, 0.2, 0.4, -0.1]),
        BR: DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.0, 0.1]),
        QL: I2.clone(),
        QR: I2.clone(),
        SL: I2.clone(),
        SR: I2.clone(),
        ML: I2.clone(),
        MR: I2.clone(),
        PL_term: I2.clone(),
        PR_term: I2.clone(),
        Sigma_x0: I2.clone(),
        Sigma_w: I2,
    }
}
