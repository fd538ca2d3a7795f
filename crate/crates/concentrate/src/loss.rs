//! Training losses and scaling-head diagnostics.
//!
//! The sigmoid cross-entropy here reduces with the *sum* over classes and the
//! mean over the batch — no 1/N_c factor — which is what makes multi-label
//! targets over a hierarchy behave: per-class losses stay comparable no
//! matter how many classes a model has.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId, NORM_EPS};

/// Sigmoid cross-entropy of a logit batch against targets in [0,1] (hard
/// labels or soft targets): `-(1/N_b) Σ_i Σ_j [t log σ(x) + (1-t) log(1-σ(x))]`.
/// Stable via `softplus(x) - x·t`; records the exact gradient on the tape.
pub fn sigmoid_ce_loss(tape: &mut Tape, logits: TensorId, targets: &[f64]) -> Result<TensorId> {
    tape.sigmoid_cross_entropy(logits, targets)
}

/// Diagonal-only gradient of the scaled L2 normalization,
/// `γ · upstream_i · (1/‖x‖ − x_i²/‖x‖³)` per coordinate.
///
/// This deliberately drops the −x_i x_j/‖x‖³ cross terms, so it is *not* what
/// training uses — the tape's normalization backward applies the full
/// Jacobian. It exists as a diagnostic: it must agree with the diagonal
/// entries of the exact Jacobian, and its gap against the full gradient shows
/// how much the cross terms matter.
pub fn eq5_diagonal_gradient(x: &[f64], gamma: f64, upstream: &[f64]) -> Result<Vec<f64>> {
    if x.len() != upstream.len() {
        return Err(Error::ShapeMismatch {
            op: "eq5_diagonal_gradient",
            lhs: vec![x.len()],
            rhs: vec![upstream.len()],
        });
    }
    let norm_sq: f64 = x.iter().map(|v| v * v).sum();
    let norm = norm_sq.sqrt();
    if norm <= NORM_EPS {
        return Err(Error::DegenerateSegment { start: 0, end: x.len(), norm, eps: NORM_EPS });
    }
    Ok(x.iter()
        .zip(upstream)
        .map(|(xi, ui)| gamma * ui * (1.0 / norm - xi * xi / (norm_sq * norm)))
        .collect())
}

/// Initialization mean for a vertical's scaling factor: √N_v.
///
/// After per-vertical L2 normalization the gradient reaching each raw logit
/// shrinks by roughly 1/√N_v, so starting γ at √N_v restores the original
/// gradient scale.
pub fn grad_ratio_estimate(n_v: usize) -> f64 {
    assert!(n_v >= 1, "a vertical has at least one class");
    (n_v as f64).sqrt()
}
