//! Diagnostics over trained pools and checkpoints: Frobenius importance of
//! each rank-1 expert, rank-zero ablation at merge time, parameter collision
//! and activation heatmaps.

use std::io::Write;

use serde::Serialize;

use crate::ago::{ago_loss, PastRegistry, PastTaskRecord};
use crate::bench::{evaluate, Sample};
use crate::checkpoint::AdapterCheckpoint;
use crate::error::{Error, Result};
use crate::math::{norm, IndexSet};
use crate::model::{ClassPrototypes, FrozenBackbone};
use crate::pool::{ExpertPool, MergeStrategy};
use crate::router::ActivationMemory;

#[derive(Debug, Clone, PartialEq)]
pub struct RankImportance {
    /// `‖b_i‖ ‖a_i‖` per expert, which equals `‖b_i a_iᵀ‖_F`.
    pub scores: Vec<f64>,
    /// Expert indices by ascending score; ties keep index order.
    pub order: Vec<usize>,
}

pub fn frob_rank_importance(pool: &ExpertPool) -> RankImportance {
    let scores: Vec<f64> = pool.experts.iter().map(|e| norm(&e.b) * norm(&e.a)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    RankImportance { scores, order }
}

/// Accuracy with the experts in `zero_set` dropped from the merge, minus
/// accuracy of the full merge. Only the pool's own layer of `base` changes.
pub fn rank_zero_ablation(
    base: &FrozenBackbone,
    pool: &ExpertPool,
    memory: &ActivationMemory,
    prototypes: &ClassPrototypes,
    samples: &[Sample],
    zero_set: &IndexSet,
    strategy: MergeStrategy,
) -> Result<f64> {
    if zero_set.iter().any(|i| i >= pool.r()) {
        return Err(Error::contract("zero_set index outside the pool"));
    }
    let l = pool.layer_id;
    if l >= base.layers.len() {
        return Err(Error::contract(format!("pool layer {l} not in backbone")));
    }
    let gate = pool.merge_gate(memory, strategy)?;
    let accuracy = |gate| -> Result<f64> {
        let mut snap = base.clone();
        snap.layers[l].weight = pool.merge_with_gate(&base.layers[l].weight, gate)?;
        evaluate(&snap, prototypes, samples)
    };
    let full = accuracy(&gate)?;
    if zero_set.is_empty() {
        return Ok(0.0);
    }
    Ok(accuracy(&gate.without(zero_set))? - full)
}

/// Parameter collision of `pool` at `current` against past records; the
/// same quantity as the orthogonality loss.
pub fn collision_rate(records: &[PastTaskRecord], pool: &ExpertPool, current: &IndexSet) -> Result<f64> {
    ago_loss(records, pool, current)
}

/// Collision summed over layers, each against its own critical set.
pub fn checkpoint_collision(registry: &PastRegistry, ckpt: &AdapterCheckpoint) -> Result<f64> {
    let mut total = 0.0;
    for layer in &ckpt.layers {
        let pool = layer.pool()?;
        let current = layer.memory().critical_set(ckpt.critical_retain)?;
        total += collision_rate(registry.layer(layer.layer_id), &pool, &current)?;
    }
    Ok(total)
}

/// Checks that checkpoints are tasks `1..=n` in order with matching layers.
pub fn check_sequence(ckpts: &[AdapterCheckpoint]) -> Result<()> {
    for (t, ck) in ckpts.iter().enumerate() {
        if ck.task_id != t + 1 {
            return Err(Error::config(format!(
                "checkpoint {} has task_id {}, expected {}",
                t + 1,
                ck.task_id,
                t + 1
            )));
        }
        if ck.layers.len() != ckpts[0].layers.len() {
            return Err(Error::config("checkpoints disagree on layer count"));
        }
    }
    Ok(())
}

/// Registry holding every task in `ckpts`.
pub fn registry_from(ckpts: &[AdapterCheckpoint]) -> Result<PastRegistry> {
    let mut reg = PastRegistry::new();
    for ck in ckpts {
        for layer in &ck.layers {
            reg.push_record(layer.layer_id, layer.past_record(ck.task_id, ck.critical_retain)?)?;
        }
    }
    Ok(reg)
}

/// Merges every layer of every checkpoint into `pristine`, in task order.
pub fn replay_merges(pristine: &FrozenBackbone, ckpts: &[AdapterCheckpoint]) -> Result<FrozenBackbone> {
    let mut bb = pristine.clone();
    for ck in ckpts {
        for layer in &ck.layers {
            merge_layer(&mut bb, layer)?;
        }
    }
    Ok(bb)
}

fn merge_layer(bb: &mut FrozenBackbone, layer: &crate::checkpoint::LayerCheckpoint) -> Result<()> {
    let l = layer.layer_id;
    let dense = bb
        .layers
        .get_mut(l)
        .ok_or_else(|| Error::config(format!("checkpoint layer {l} not in backbone")))?;
    let pool = layer.pool()?;
    let gate = pool.merge_gate(&layer.memory(), layer.merge_strategy)?;
    if gate.support != layer.merged_set {
        return Err(Error::config(format!("layer {l}: merged_set disagrees with stored frequencies")));
    }
    dense.weight = pool.merge_with_gate(&dense.weight, &gate)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrobRow {
    pub task_id: usize,
    pub layer_id: usize,
    pub position: usize,
    pub expert_index: usize,
    pub score: f64,
}

pub fn frob_rows(ck: &AdapterCheckpoint) -> Result<Vec<FrobRow>> {
    let mut rows = Vec::new();
    for layer in &ck.layers {
        let imp = frob_rank_importance(&layer.pool()?);
        for (position, &i) in imp.order.iter().enumerate() {
            rows.push(FrobRow {
                task_id: ck.task_id,
                layer_id: layer.layer_id,
                position,
                expert_index: i,
                score: imp.scores[i],
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub task_id: usize,
    pub layer_id: usize,
    /// Position of the first zeroed expert in ascending Frobenius order.
    pub position: usize,
    pub zero_set: IndexSet,
    pub accuracy_delta: f64,
}

/// Single-rank and adjacent-pair ablations of the last checkpoint, in
/// ascending Frobenius order, evaluated on `samples`. Earlier checkpoints
/// are merged into the base first.
pub fn ablation_rows(
    pristine: &FrozenBackbone,
    ckpts: &[AdapterCheckpoint],
    prototypes: &ClassPrototypes,
    samples: &[Sample],
    pair: bool,
) -> Result<Vec<AblationRow>> {
    check_sequence(ckpts)?;
    let (ck, prior) = ckpts.split_last().ok_or_else(|| Error::config("no checkpoint given"))?;
    let before = replay_merges(pristine, prior)?;
    let mut rows = Vec::new();
    for layer in &ck.layers {
        let mut base = before.clone();
        for other in ck.layers.iter().filter(|o| o.layer_id != layer.layer_id) {
            merge_layer(&mut base, other)?;
        }
        let pool = layer.pool()?;
        let memory = layer.memory();
        let order = frob_rank_importance(&pool).order;
        let width = if pair { 2 } else { 1 };
        for position in 0..=order.len().saturating_sub(width) {
            let zero_set = IndexSet::new(order[position..position + width].to_vec(), pool.r())?;
            let accuracy_delta =
                rank_zero_ablation(&base, &pool, &memory, prototypes, samples, &zero_set, layer.merge_strategy)?;
            rows.push(AblationRow {
                task_id: ck.task_id,
                layer_id: layer.layer_id,
                position,
                zero_set,
                accuracy_delta,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRow {
    pub task_id: usize,
    pub layer_id: usize,
    pub expert_index: usize,
    pub count: u64,
    pub normalized_frequency: f64,
    pub merged_flag: bool,
}

/// One row per (task, layer, expert).
pub fn heatmap_export(ckpts: &[AdapterCheckpoint]) -> Vec<HeatmapRow> {
    let mut rows = Vec::new();
    for ck in ckpts {
        for layer in &ck.layers {
            let norm = layer.memory().normalized();
            for (i, (&count, &f)) in layer.frequencies.iter().zip(&norm).enumerate() {
                rows.push(HeatmapRow {
                    task_id: ck.task_id,
                    layer_id: layer.layer_id,
                    expert_index: i,
                    count,
                    normalized_frequency: f,
                    merged_flag: layer.merged_set.contains(i),
                });
            }
        }
    }
    rows
}

fn fixed6(x: f64) -> String {
    format!("{x:.6}")
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("<csv>", io),
        other => Error::Contract(format!("csv: {other:?}")),
    }
}

fn write_rows<W: Write>(w: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header).map_err(csv_err)?;
    for row in rows {
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_frob_csv<W: Write>(w: W, rows: &[FrobRow]) -> Result<()> {
    write_rows(
        w,
        &["task_id", "layer_id", "position", "expert_index", "score"],
        rows.iter().map(|r| {
            vec![
                r.task_id.to_string(),
                r.layer_id.to_string(),
                r.position.to_string(),
                r.expert_index.to_string(),
                fixed6(r.score),
            ]
        }),
    )
}

pub fn write_ablation_csv<W: Write>(w: W, rows: &[AblationRow]) -> Result<()> {
    write_rows(
        w,
        &["task_id", "layer_id", "position", "zero_set", "accuracy_delta"],
        rows.iter().map(|r| {
            let set: Vec<String> = r.zero_set.iter().map(|i| i.to_string()).collect();
            vec![
                r.task_id.to_string(),
                r.layer_id.to_string(),
                r.position.to_string(),
                set.join(";"),
                fixed6(r.accuracy_delta),
            ]
        }),
    )
}

pub fn write_heatmap_csv<W: Write>(w: W, rows: &[HeatmapRow]) -> Result<()> {
    write_rows(
        w,
        &["task_id", "layer_id", "expert_index", "count", "normalized_frequency", "merged_flag"],
        rows.iter().map(|r| {
            vec![
                r.task_id.to_string(),
                r.layer_id.to_string(),
                r.expert_index.to_string(),
                r.count.to_string(),
                fixed6(r.normalized_frequency),
                r.merged_flag.to_string(),
            ]
        }),
    )
}

/// `(task_id, step, value)` rows, as logged during training.
pub fn write_collision_csv<W: Write>(w: W, rows: &[(usize, usize, f64)]) -> Result<()> {
    write_rows(
        w,
        &["task_id", "step", "value"],
        rows.iter()
            .map(|&(t, s, v)| vec![t.to_string(), s.to_string(), fixed6(v)]),
    )
}
