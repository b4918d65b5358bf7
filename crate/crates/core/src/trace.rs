use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Column order of the CSV trace. Empty cells mean "not applicable"
/// (unconstrained runs have no penalty or slack).
pub const TRACE_HEADER: [&str; 8] = [
    "beta",
    "beta_prime",
    "free_energy",
    "distortion",
    "penalty",
    "max_slack",
    "structure",
    "inner_iterations",
];

/// One converged `(beta, beta_prime)` point of an annealing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub beta: f64,
    pub beta_prime: f64,
    pub free_energy: f64,
    pub distortion: f64,
    pub penalty: Option<f64>,
    pub max_slack: Option<f64>,
    /// Distinct-facility count (FLP, FLPO) or largest occupancy (LMDP).
    pub structure: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub rows: Vec<TraceRow>,
    /// Set when a location update had to be regularized or a facility lost
    /// all of its mass and kept its previous location.
    pub degenerate_updates: usize,
}

impl SolverTrace {
    pub fn push(&mut self, row: TraceRow) {
        self.rows.push(row);
    }

    /// `beta` never decreases, and `beta_prime` never decreases within a
    /// block of equal `beta`.
    pub fn is_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| {
            w[1].beta > w[0].beta || (w[1].beta == w[0].beta && w[1].beta_prime >= w[0].beta_prime)
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(TRACE_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            wtr.write_record([
                r.beta.to_string(),
                r.beta_prime.to_string(),
                r.free_energy.to_string(),
                r.distortion.to_string(),
                opt(r.penalty),
                opt(r.max_slack),
                r.structure.to_string(),
                r.inner_iterations.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
