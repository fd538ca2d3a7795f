//! Per-vertical average precision and loss-curve export.
//!
//! Scoring a vertical prunes predictions to that vertical's class columns and
//! ranks its test samples per class; pvap is the mean AP over the vertical's
//! classes, and mpvap the unweighted mean over verticals. Classes with no
//! test positives are excluded from the mean and surfaced as a skip count
//! rather than scored zero.

use crate::error::{Error, Result};
use crate::taxonomy::{ClassLayout, LabelId};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One entry in a ranked list: a sample's score for some class and whether
/// the sample is actually of that class.
#[derive(Debug, Clone, Copy)]
pub struct RankedSample {
    pub score: f64,
    pub sample_id: u64,
    pub relevant: bool,
}

/// Average precision of one ranked list: mean over positive ranks of
/// precision@rank, with descending score order and ties broken by ascending
/// sample id.
pub fn average_precision(items: &[RankedSample]) -> Result<f64> {
    if !items.iter().any(|i| i.relevant) {
        return Err(Error::UndefinedAp);
    }
    let mut sorted: Vec<&RankedSample> = items.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.sample_id.cmp(&b.sample_id))
    });
    let mut hits = 0usize;
    let mut total = 0.0;
    let mut positives = 0usize;
    for (rank0, item) in sorted.iter().enumerate() {
        if item.relevant {
            hits += 1;
            positives += 1;
            total += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// One test sample's model outputs across the full class layout.
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub sample_id: u64,
    pub label: LabelId,
    /// One score per class index in layout order.
    pub scores: Vec<f64>,
}

/// pvap of one vertical plus bookkeeping about skipped classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvapOutcome {
    pub value: f64,
    pub classes_scored: usize,
    /// Classes with zero test positives, excluded from the mean.
    pub classes_skipped: usize,
    pub samples: usize,
}

/// Per-vertical AP: prune columns to the vertical's classes, rank the
/// vertical's test samples per class, average class APs.
pub fn pvap(layout: &ClassLayout, vertical_index: usize, samples: &[ScoredSample]) -> Result<PvapOutcome> {
    let range = layout
        .ranges
        .get(vertical_index)
        .ok_or_else(|| Error::Validation(format!("no vertical at index {vertical_index}")))?;
    let pool: Vec<&ScoredSample> = samples
        .iter()
        .filter(|s| {
            layout
                .class_of(s.label)
                .is_some_and(|c| c >= range.start && c < range.end)
        })
        .collect();
    if pool.is_empty() {
        return Err(Error::NoData(format!("vertical {} has no test samples", range.vertical)));
    }
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for class in range.start..range.end {
        let label = layout.class_order[class];
        let ranked: Vec<RankedSample> = pool
            .iter()
            .map(|s| RankedSample {
                score: s.scores[class],
                sample_id: s.sample_id,
                relevant: s.label == label,
            })
            .collect();
        match average_precision(&ranked) {
            Ok(ap) => {
                total += ap;
                scored += 1;
            }
            Err(Error::UndefinedAp) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if scored == 0 {
        return Err(Error::NoData(format!(
            "vertical {} has no class with test positives",
            range.vertical
        )));
    }
    Ok(PvapOutcome {
        value: total / scored as f64,
        classes_scored: scored,
        classes_skipped: skipped,
        samples: pool.len(),
    })
}

/// Unweighted arithmetic mean of per-vertical APs.
pub fn mpvap(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::NoData("mpvap needs at least one vertical".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Evaluation of one model over every vertical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_vertical: Vec<VerticalEval>,
    pub mpvap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerticalEval {
    pub vertical: LabelId,
    pub pvap: f64,
    pub classes_scored: usize,
    pub classes_skipped: usize,
    pub samples: usize,
}

/// pvap for every vertical in the layout plus their mean.
pub fn evaluate(layout: &ClassLayout, samples: &[ScoredSample]) -> Result<EvalResult> {
    let mut per_vertical = Vec::with_capacity(layout.ranges.len());
    for (vi, range) in layout.ranges.iter().enumerate() {
        let outcome = pvap(layout, vi, samples)?;
        per_vertical.push(VerticalEval {
            vertical: range.vertical,
            pvap: outcome.value,
            classes_scored: outcome.classes_scored,
            classes_skipped: outcome.classes_skipped,
            samples: outcome.samples,
        });
    }
    let mean = mpvap(&per_vertical.iter().map(|v| v.pvap).collect::<Vec<_>>())?;
    Ok(EvalResult { per_vertical, mpvap: mean })
}

impl EvalResult {
    /// Per-vertical table mirroring the evaluation report format.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8}\n",
            "vertical", "pvap", "classes", "skipped", "samples"
        ));
        for v in &self.per_vertical {
            out.push_str(&format!(
                "{:<12} {:>8.4} {:>8} {:>8} {:>8}\n",
                v.vertical, v.pvap, v.classes_scored, v.classes_skipped, v.samples
            ));
        }
        out.push_str(&format!("mpvap {:.4}\n", self.mpvap));
        out
    }
}

// ── Loss curves ──────────────────────────────────────────────────────

/// Per-step training losses for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub label: String,
    /// (step, loss) pairs.
    pub entries: Vec<(u64, f64)>,
}

impl LossCurve {
    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().map(|&(_, l)| l)
    }

    /// Mean loss over the trailing `n` steps (steadier than one step).
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        let tail = &self.entries[self.entries.len().saturating_sub(n)..];
        Some(tail.iter().map(|&(_, l)| l).sum::<f64>() / tail.len() as f64)
    }
}

/// Merge runs into a long-format CSV (`step,run,loss`). Runs must share a
/// step grid so the rows line up for plotting.
pub fn export_loss_curves(runs: &[LossCurve]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::NoData("no loss curves to export".into()));
    }
    for run in runs {
        if run.label.contains(',') || run.label.contains('\n') {
            return Err(Error::Validation(format!("run label {:?} breaks CSV", run.label)));
        }
    }
    let grid: Vec<u64> = runs[0].entries.iter().map(|&(s, _)| s).collect();
    for run in &runs[1..] {
        let steps: Vec<u64> = run.entries.iter().map(|&(s, _)| s).collect();
        if steps != grid {
            return Err(Error::Validation(format!(
                "run {:?} is on a different step grid than {:?}",
                run.label, runs[0].label
            )));
        }
    }
    let mut out = String::from("step,run,loss\n");
    for run in runs {
        for &(step, loss) in &run.entries {
            out.push_str(&format!("{step},{},{loss}\n", run.label));
        }
    }
    Ok(out)
}

pub fn save_curve(curve: &LossCurve, path: &Path) -> Result<()> {
    let json = serde_json::to_vec(curve).expect("loss curve serializes");
    crate::data::write_atomic(path, &json)
}

pub fn load_curve(path: &Path) -> Result<LossCurve> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}
