//! Closed-form parameter accounting for the four top-layer topologies.
//!
//! Counts cover weights only (biases are off by default and counted apart),
//! so the formulas match allocated weight counts with integer equality.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Wiring of the two layers between the base network and the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// Dense top-1 and top-2 shared by all verticals.
    FcFc,
    /// Shared dense top-1, per-vertical top-2 blocks.
    FcSc,
    /// Per-vertical top-1 and top-2 blocks.
    ScSc,
    /// Shared dense top-1, per-vertical top-2 of width `s2 - x` concatenated
    /// with a shared generic slice of width `x`.
    FcScGeneric,
}

impl Topology {
    pub fn as_str(self) -> &'static str {
        match self {
            Topology::FcFc => "fc-fc",
            Topology::FcSc => "fc-sc",
            Topology::ScSc => "sc-sc",
            Topology::FcScGeneric => "fc-sc-generic",
        }
    }
}

/// Sizes feeding the closed-form count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetInput {
    pub topology: Topology,
    /// Total output classes.
    pub n: u64,
    /// Number of verticals.
    pub m: u64,
    /// Base network output width.
    pub s_b: u64,
    /// Top-1 width (shared or per-vertical depending on topology).
    pub s1: u64,
    /// Top-2 width.
    pub s2: u64,
    /// Generic slice width; nonzero only for `FcScGeneric`.
    pub x: u64,
}

impl BudgetInput {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("N", self.n), ("M", self.m), ("s_b", self.s_b), ("s1", self.s1), ("s2", self.s2)] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.x > self.s2 {
            return Err(Error::Validation(format!(
                "generic size x={} exceeds s2={}",
                self.x, self.s2
            )));
        }
        if self.topology != Topology::FcScGeneric && self.x != 0 {
            return Err(Error::Validation(format!(
                "generic size x={} is only meaningful for the fc-sc-generic topology",
                self.x
            )));
        }
        Ok(())
    }

    /// Paper-style display name, e.g. `FC4096-SC(512,128)`.
    pub fn display_name(&self) -> String {
        match self.topology {
            Topology::FcFc => format!("FC{}-FC{}", self.s1, self.s2),
            Topology::FcSc => format!("FC{}-SC{}", self.s1, self.s2),
            Topology::ScSc => format!("SC{}-SC{}", self.s1, self.s2),
            Topology::FcScGeneric => format!("FC{}-SC({},{})", self.s1, self.s2, self.x),
        }
    }
}

/// Exact top-layer weight count for one topology.
pub fn count_params(input: &BudgetInput) -> Result<u64> {
    input.validate()?;
    let BudgetInput { n, m, s_b, s1, s2, x, .. } = *input;
    Ok(match input.topology {
        Topology::FcFc => s2 * n + s2 * s1 + s1 * s_b,
        Topology::FcSc => s2 * n + m * s2 * s1 + s1 * s_b,
        Topology::ScSc => s2 * n + m * s2 * s1 + m * s1 * s_b,
        Topology::FcScGeneric => s2 * n + m * (s2 - x) * s1 + x * s1 + s1 * s_b,
    })
}

/// One line of a [`BudgetReport`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub name: String,
    pub topology: Topology,
    pub params: u64,
    /// Signed delta against the report's baseline (the first input).
    pub delta_vs_baseline: i64,
    /// Size at 8 bytes per parameter.
    pub bytes: u64,
}

/// Tabulated comparison of several candidate architectures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub baseline: String,
    pub rows: Vec<BudgetRow>,
}

/// Count every input and tabulate deltas against the first one.
pub fn compare_budgets(inputs: &[BudgetInput]) -> Result<BudgetReport> {
    if inputs.is_empty() {
        return Err(Error::Validation("compare_budgets needs at least one input".into()));
    }
    let baseline_count = count_params(&inputs[0])? as i64;
    let mut rows = Vec::with_capacity(inputs.len());
    for input in inputs {
        let params = count_params(input)?;
        rows.push(BudgetRow {
            name: input.display_name(),
            topology: input.topology,
            params,
            delta_vs_baseline: params as i64 - baseline_count,
            bytes: params * 8,
        });
    }
    Ok(BudgetReport { baseline: inputs[0].display_name(), rows })
}

impl BudgetReport {
    /// Fixed-width text table for terminal output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:>14} {:>14} {:>14}\n",
            "architecture", "#param", "delta", "bytes"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<22} {:>14} {:>+14} {:>14}\n",
                row.name, row.params, row.delta_vs_baseline, row.bytes
            ));
        }
        out
    }
}
