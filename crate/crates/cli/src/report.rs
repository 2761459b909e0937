//! Run reports: one JSON document per invocation with the cost summary, the
//! seed that produced it, and the executed checks. Serialization is
//! deterministic (fixed field order, shortest-round-trip floats), which is
//! what makes byte-identical reruns a meaningful promise.

use std::path::Path;

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, pass: bool, detail: String) -> Check {
        Check { name: name.to_string(), pass, detail }
    }
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub jl: f64,
    pub jr: f64,
    pub jl_se: f64,
    pub jr_se: f64,
    pub trajectories: usize,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Prints one line per check and writes the JSON document.
    pub fn emit(&self, path: &Path) -> Result<bool, String> {
        for c in &self.checks {
            println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        write_json(path, self)?;
        Ok(self.all_pass())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    std::fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}
