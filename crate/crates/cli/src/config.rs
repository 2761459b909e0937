//! Problem files: a single JSON document with fixed top-level keys, matrices
//! as arrays of rows. Scalars accept decimal or scientific notation (JSON
//! numbers). Unknown keys are rejected so typos surface instead of silently
//! falling back to defaults.

use std::path::Path;

use lrsng_core::model::GameSpec;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    pub N: usize,
    pub p: f64,
    pub mu: Vec<f64>,
    pub A: Vec<Vec<f64>>,
    pub BL: Vec<Vec<f64>>,
    pub BR: Vec<Vec<f64>>,
    pub QL: Vec<Vec<f64>>,
    pub QR: Vec<Vec<f64>>,
    pub SL: Vec<Vec<f64>>,
    pub SR: Vec<Vec<f64>>,
    pub ML: Vec<Vec<f64>>,
    pub MR: Vec<Vec<f64>>,
    pub PL_term: Vec<Vec<f64>>,
    pub PR_term: Vec<Vec<f64>>,
    pub Sigma_x0: Vec<Vec<f64>>,
    pub Sigma_w: Vec<Vec<f64>>,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("{name}: rows have unequal lengths"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl SpecFile {
    pub fn to_spec(&self) -> Result<GameSpec, String> {
        Ok(GameSpec {
            n: self.n,
            m1: self.m1,
            m2: self.m2,
            N: self.N,
            p: self.p,
            mu: DVector::from_vec(self.mu.clone()),
            A: matrix("A", &self.A)?,
            BL: matrix("BL", &self.BL)?,
            BR: matrix("BR", &self.BR)?,
            QL: matrix("QL", &self.QL)?,
            QR: matrix("QR", &self.QR)?,
            SL: matrix("SL", &self.SL)?,
            SR: matrix("SR", &self.SR)?,
            ML: matrix("ML", &self.ML)?,
            MR: matrix("MR", &self.MR)?,
            PL_term: matrix("PL_term", &self.PL_term)?,
            PR_term: matrix("PR_term", &self.PR_term)?,
            Sigma_x0: matrix("Sigma_x0", &self.Sigma_x0)?,
            Sigma_w: matrix("Sigma_w", &self.Sigma_w)?,
        })
    }

    pub fn from_spec(spec: &GameSpec) -> SpecFile {
        SpecFile {
            n: spec.n,
            m1: spec.m1,
            m2: spec.m2,
            N: spec.N,
            p: spec.p,
            mu: spec.mu.iter().copied().collect(),
            A: rows(&spec.A),
            BL: rows(&spec.BL),
            BR: rows(&spec.BR),
            QL: rows(&spec.QL),
            QR: rows(&spec.QR),
            SL: rows(&spec.SL),
            SR: rows(&spec.SR),
            ML: rows(&spec.ML),
            MR: rows(&spec.MR),
            PL_term: rows(&spec.PL_term),
            PR_term: rows(&spec.PR_term),
            Sigma_x0: rows(&spec.Sigma_x0),
            Sigma_w: rows(&spec.Sigma_w),
        }
    }
}

/// Parses, checks, and symmetrizes a problem file. Parse failures keep
/// serde_json's line/column anchor; validation failures carry the full
/// violation report.
pub fn load_spec(path: &Path) -> Result<GameSpec, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let file: SpecFile = serde_json::from_str(&text)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let spec = file.to_spec().map_err(|e| format!("{}: {e}", path.display()))?;
    let report = spec.validate();
    if !report.is_ok() {
        return Err(format!("{}: invalid problem\n{report}", path.display()));
    }
    Ok(spec.symmetrized())
}

pub fn save_spec(path: &Path, spec: &GameSpec) -> Result<(), String> {
    let file = SpecFile::from_spec(spec);
    let text = serde_json::to_string_pretty(&file).expect("plain data serializes");
    std::fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}
