//! Adagrad with per-parameter accumulated squared gradients.

use crate::error::{Error, Result};

/// Default epsilon in the `sqrt(accumulator) + eps` denominator.
pub const ADAGRAD_EPS: f64 = 1e-8;

/// Adagrad state over an indexed set of parameter slots.
#[derive(Debug, Clone)]
pub struct Adagrad {
    learning_rate: f64,
    epsilon: f64,
    /// Accumulated squared gradients per slot; nonnegative and
    /// nondecreasing by construction.
    accumulators: Vec<Vec<f64>>,
}

impl Adagrad {
    pub fn new(learning_rate: f64) -> Self {
        Self::with_epsilon(learning_rate, ADAGRAD_EPS)
    }

    pub fn with_epsilon(learning_rate: f64, epsilon: f64) -> Self {
        Adagrad { learning_rate, epsilon, accumulators: Vec::new() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Accumulator snapshot for a slot (empty until the first step).
    pub fn accumulator(&self, slot: usize) -> &[f64] {
        self.accumulators.get(slot).map(Vec::as_slice).unwrap_or(&[])
    }

    /// One update for one parameter slot:
    /// `accum += g²; param -= lr · g / (sqrt(accum) + eps)`.
    pub fn step(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                op: "adagrad_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        if self.accumulators.len() <= slot {
            self.accumulators.resize(slot + 1, Vec::new());
        }
        let accum = &mut self.accumulators[slot];
        if accum.is_empty() {
            accum.resize(params.len(), 0.0);
        } else if accum.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adagrad_step",
                lhs: vec![accum.len()],
                rhs: vec![params.len()],
            });
        }
        let lr = self.learning_rate;
        for ((p, g), a) in params.iter_mut().zip(grads).zip(accum.iter_mut()) {
            *a += g * g;
            *p -= lr * g / (a.sqrt() + self.epsilon);
        }
        Ok(())
    }
}
