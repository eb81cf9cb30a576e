//! Past-task registry and the activation-guided orthogonality penalty.
//!
//! The penalty is the mean absolute inner product between the `b` columns
//! of past tasks' critical experts and the current pool's critical experts:
//!
//! ```text
//! L = 1/(m n) Σ_i Σ_j |⟨b_past^i, b_t^j⟩|
//! ```
//!
//! Only `b` vectors participate; `a` vectors are left unconstrained.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{axpy, dot, IndexSet};
use crate::pool::ExpertPool;
use crate::router::ActivationMemory;

/// Snapshot of one finished task's critical `b` columns for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PastTaskRecord {
    pub task_id: usize,
    pub expert_indices: Vec<usize>,
    pub critical_b: Vec<Vec<f64>>,
    pub frequencies: Vec<u64>,
}

/// Append-only store of [`PastTaskRecord`]s, one list per layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PastRegistry {
    layers: Vec<Vec<PastTaskRecord>>,
}

impl PastRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn layer(&self, layer_id: usize) -> &[PastTaskRecord] {
        self.layers.get(layer_id).map_or(&[], Vec::as_slice)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(Vec::is_empty)
    }

    /// Records the `b` columns at `critical_set(memory, retain)` as task
    /// `task_id` for this pool's layer. Vectors are copied.
    pub fn register_task(
        &mut self,
        task_id: usize,
        pool: &ExpertPool,
        memory: &ActivationMemory,
        retain: usize,
    ) -> Result<()> {
        let layer_id = pool.layer_id;
        if self.layers.len() <= layer_id {
            self.layers.resize_with(layer_id + 1, Vec::new);
        }
        let records = &mut self.layers[layer_id];
        if let Some(last) = records.last() {
            if task_id <= last.task_id {
                return Err(Error::contract(format!(
                    "task {task_id} registered after task {} on layer {layer_id}",
                    last.task_id
                )));
            }
            if last.critical_b.first().map(Vec::len).unwrap_or(pool.d_out()) != pool.d_out() {
                return Err(Error::contract("registry dimension mismatch"));
            }
        }
        let set = memory.critical_set(retain)?;
        records.push(PastTaskRecord {
            task_id,
            expert_indices: set.as_slice().to_vec(),
            critical_b: set.iter().map(|i| pool.experts[i].b.clone()).collect(),
            frequencies: set.iter().map(|i| memory.counts[i]).collect(),
        });
        Ok(())
    }

    /// Appends an already-built record (used when restoring from checkpoints).
    pub fn push_record(&mut self, layer_id: usize, record: PastTaskRecord) -> Result<()> {
        if self.layers.len() <= layer_id {
            self.layers.resize_with(layer_id + 1, Vec::new);
        }
        let records = &mut self.layers[layer_id];
        if records.last().is_some_and(|l| record.task_id <= l.task_id) {
            return Err(Error::contract("task ids must be strictly increasing"));
        }
        records.push(record);
        Ok(())
    }
}

/// Dense orthogonality penalty over two column sets; zero when either side
/// is empty.
pub fn l_orth_dense(past: &[Vec<f64>], current: &[Vec<f64>]) -> Result<f64> {
    if past.is_empty() || current.is_empty() {
        return Ok(0.0);
    }
    let d = past[0].len();
    if past.iter().chain(current).any(|v| v.len() != d) {
        return Err(Error::contract("orthogonality loss: column dimensions differ"));
    }
    let mut total = 0.0;
    for p in past {
        for c in current {
            total += dot(p, c).abs();
        }
    }
    Ok(total / (past.len() * current.len()) as f64)
}

fn past_columns(records: &[PastTaskRecord]) -> Vec<Vec<f64>> {
    records.iter().flat_map(|r| r.critical_b.iter().cloned()).collect()
}

fn check_current(pool: &ExpertPool, current: &IndexSet) -> Result<()> {
    if let Some(i) = current.iter().find(|&i| i >= pool.r()) {
        return Err(Error::contract(format!("critical index {i} outside pool of {}", pool.r())));
    }
    Ok(())
}

/// Penalty between all past records of a layer and the pool's experts at
/// `current`.
pub fn ago_loss(records: &[PastTaskRecord], pool: &ExpertPool, current: &IndexSet) -> Result<f64> {
    check_current(pool, current)?;
    let past = past_columns(records);
    let cur: Vec<Vec<f64>> = current.iter().map(|j| pool.experts[j].b.clone()).collect();
    l_orth_dense(&past, &cur)
}

/// Subgradient of [`ago_loss`] with respect to every `b_j` of the pool
/// (zero outside `current`), using `sign(0) = 0`.
pub fn ago_grad(records: &[PastTaskRecord], pool: &ExpertPool, current: &IndexSet) -> Result<Vec<Vec<f64>>> {
    check_current(pool, current)?;
    let past = past_columns(records);
    let mut grads = vec![vec![0.0; pool.d_out()]; pool.r()];
    if past.is_empty() || current.is_empty() {
        return Ok(grads);
    }
    if past.iter().any(|p| p.len() != pool.d_out()) {
        return Err(Error::contract("orthogonality grad: column dimensions differ"));
    }
    let scale = 1.0 / (past.len() * current.len()) as f64;
    for j in current {
        let b = &pool.experts[j].b;
        for p in &past {
            let ip = dot(p, b);
            let sign = if ip > 0.0 {
                1.0
            } else if ip < 0.0 {
                -1.0
            } else {
                0.0
            };
            if sign != 0.0 {
                axpy(sign * scale, p, &mut grads[j]);
            }
        }
    }
    Ok(grads)
}
