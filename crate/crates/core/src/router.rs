//! Score-based two-stage expert selection and activation-frequency memory.
//!
//! Stage 1 keeps the top-`R` experts per sample (`S_n`); stage 2 counts how
//! many samples voted for each expert and keeps the top-`R` of those votes
//! (`S_batch`). Frequencies are recorded from the stage-1 sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{softmax, top_k, IndexSet, Matrix, SeededRng};
use crate::pool::GateVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub weights: Matrix,
}

impl Router {
    /// `W_router ~ N(0, 1/d_cls)`.
    pub fn init(r: usize, d_cls: usize, rng: &mut SeededRng) -> Self {
        Self {
            weights: Matrix::gaussian(r, d_cls, (1.0 / d_cls as f64).sqrt(), rng),
        }
    }

    pub fn r(&self) -> usize {
        self.weights.rows()
    }

    /// `s = W_router · φ`.
    pub fn scores(&self, phi: &[f64]) -> Result<Vec<f64>> {
        self.weights.matvec(phi)
    }
}

/// Per-layer activation counter `C_l`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationMemory {
    pub counts: Vec<u64>,
    pub samples_seen: u64,
}

impl ActivationMemory {
    pub fn new(r: usize) -> Self {
        Self {
            counts: vec![0; r],
            samples_seen: 0,
        }
    }

    pub fn record(&mut self, sample_set: &IndexSet) {
        for i in sample_set {
            self.counts[i] += 1;
        }
        self.samples_seen += 1;
    }

    /// `S_freq = Top(C_l, R)`.
    pub fn critical_set(&self, retain: usize) -> Result<IndexSet> {
        top_k(&self.counts, retain)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `π̄_i = C[i] / samples_seen`, zero before any sample.
    pub fn normalized(&self) -> Vec<f64> {
        let seen = self.samples_seen;
        self.counts
            .iter()
            .map(|&c| if seen == 0 { 0.0 } else { c as f64 / seen as f64 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Binary,
    #[default]
    MaskedSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionConfig {
    pub retain: usize,
    pub gate_mode: GateMode,
}

impl SelectionConfig {
    pub fn validate(&self, r: usize) -> Result<()> {
        if self.retain == 0 || self.retain > r {
            return Err(Error::contract(format!(
                "retain R = {} must lie in [1, {r}]",
                self.retain
            )));
        }
        Ok(())
    }
}

/// `S_n = Top(s_n, R)`.
pub fn select_sample(scores: &[f64], retain: usize) -> Result<IndexSet> {
    top_k(scores, retain)
}

/// Vote vector `v[i] = |{n : i ∈ S_n}|`.
pub fn votes(sample_sets: &[IndexSet], r: usize) -> Result<Vec<u64>> {
    let mut v = vec![0u64; r];
    for set in sample_sets {
        for i in set {
            if i >= r {
                return Err(Error::contract(format!("expert index {i} outside [0, {r})")));
            }
            v[i] += 1;
        }
    }
    Ok(v)
}

/// `S_batch = Top(v, R)`.
pub fn select_batch(sample_sets: &[IndexSet], r: usize, retain: usize) -> Result<IndexSet> {
    top_k(&votes(sample_sets, r)?, retain)
}

/// Gate weights over `batch_set`. An empty set gives the all-zero gate.
pub fn gate(scores: &[f64], batch_set: &IndexSet, mode: GateMode) -> Result<GateVector> {
    let r = scores.len();
    if let Some(i) = batch_set.iter().find(|&i| i >= r) {
        return Err(Error::contract(format!("gate index {i} outside [0, {r})")));
    }
    match mode {
        GateMode::Binary => Ok(GateVector::binary(batch_set, r)),
        GateMode::MaskedSoftmax => {
            let picked: Vec<f64> = batch_set.iter().map(|i| scores[i]).collect();
            let mut weights = vec![0.0; r];
            for (i, w) in batch_set.iter().zip(softmax(&picked)) {
                weights[i] = w;
            }
            Ok(GateVector {
                weights,
                support: batch_set.clone(),
            })
        }
    }
}
