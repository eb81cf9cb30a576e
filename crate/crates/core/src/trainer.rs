//! AdamW, the per-task training loop, end-of-task merge and registration, and
//! the full task sequence that fills the accuracy matrix.

use serde::{Deserialize, Serialize};

use crate::ago::PastRegistry;
use crate::bench::{evaluate, AccuracyMatrix, Sample, TaskDataset};
use crate::checkpoint::{AdapterCheckpoint, LayerCheckpoint};
use crate::error::{Error, Result};
use crate::math::{IndexSet, SeededRng};
use crate::model::{ce_loss, AdaptedModel, AgoTerm, ClassPrototypes, ForwardOptions, FrozenBackbone, ModelConfig};
use crate::pool::MergeStrategy;
use crate::router::{GateMode, SelectionConfig};

const BACKBONE_STREAM: u64 = 0xB0B0_0000;
const POOL_STREAM: u64 = 0x9001_0000;
const BATCH_STREAM: u64 = 0xBA7C_0000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    UniformTopk,
    FrequencyWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps_per_task: usize,
    pub lambda: f64,
    pub r: usize,
    /// Experts kept per forward pass (`R`).
    pub retain: usize,
    /// Size of each task's critical set for the orthogonality loss.
    /// Defaults to `retain` when absent.
    pub ago_retain: Option<usize>,
    pub merge_k: usize,
    pub gate_mode: GateMode,
    pub merge_strategy: MergeKind,
    /// Merge scaling for `frequency_weighted`; defaults to `1/r`.
    pub merge_alpha: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub collision_every: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch_size: 32,
            steps_per_task: 500,
            lambda: 0.1,
            r: 12,
            retain: 8,
            ago_retain: None,
            merge_k: 4,
            gate_mode: GateMode::MaskedSoftmax,
            merge_strategy: MergeKind::FrequencyWeighted,
            merge_alpha: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            collision_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Dense sequential LoRA: every expert active, no orthogonality, full merge.
    pub fn dense_baseline(&self) -> Self {
        Self {
            retain: self.r,
            ago_retain: Some(self.r),
            merge_k: self.r,
            lambda: 0.0,
            gate_mode: GateMode::Binary,
            merge_strategy: MergeKind::UniformTopk,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.retain == 0 || self.retain > self.r {
            return Err(Error::config("train.retain must lie in [1, train.r]"));
        }
        if self.merge_k > self.retain {
            return Err(Error::config("train.merge_k must not exceed train.retain"));
        }
        if let Some(k) = self.ago_retain {
            if k > self.r {
                return Err(Error::config("train.ago_retain must not exceed train.r"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::config(format!("train.{name} must be positive")));
        }
        if !(self.beta1 < 1.0 && self.beta2 < 1.0) {
            return Err(Error::config("train.beta1 and train.beta2 must be < 1"));
        }
        if !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.lambda and train.weight_decay must be >= 0"));
        }
        if self.merge_alpha.is_some_and(|a| !(a > 0.0)) {
            return Err(Error::config("train.merge_alpha must be positive"));
        }
        if self.collision_every == 0 {
            return Err(Error::config("train.collision_every must be >= 1"));
        }
        Ok(())
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            retain: self.retain,
            gate_mode: self.gate_mode,
        }
    }

    pub fn critical_retain(&self) -> usize {
        self.ago_retain.unwrap_or(self.retain)
    }

    pub fn strategy(&self) -> MergeStrategy {
        match self.merge_strategy {
            MergeKind::UniformTopk => MergeStrategy::UniformTopk { k: self.merge_k },
            MergeKind::FrequencyWeighted => MergeStrategy::FrequencyWeighted {
                k: self.merge_k,
                alpha: self.merge_alpha.unwrap_or(1.0 / self.r as f64),
            },
        }
    }
}

/// First and second moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamWState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(|t| t.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// One decoupled-weight-decay Adam update:
/// `θ ← θ − lr (m̂ / (√v̂ + ε) + wd θ)`.
pub fn adamw_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamWState, hp: &AdamWParams) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract("adamw: parameter, gradient and state counts differ"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::contract(format!("adamw: tensor {i} shape mismatch")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("adamw: gradient of tensor {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for k in 0..p.len() {
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g[k];
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * p[k]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionPoint {
    pub step: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub task_id: usize,
    /// Mean total loss over the final 10% of steps.
    pub final_loss: f64,
    /// Merged experts per layer.
    pub merged_sets: Vec<IndexSet>,
    pub collision: Vec<CollisionPoint>,
    pub checkpoint_path: Option<String>,
}

/// Unscaled orthogonality loss summed over layers, against each layer's
/// current critical set.
pub fn collision_total(model: &AdaptedModel, registry: &PastRegistry, retain: usize) -> Result<f64> {
    let critical = model.critical_sets(retain)?;
    model.ago_penalty(&AgoTerm {
        lambda: 1.0,
        registry,
        critical: &critical,
    })
}

pub struct TaskRun {
    pub final_loss: f64,
    pub collision: Vec<CollisionPoint>,
}

/// Trains the model's current pools and routers on one task. The frozen
/// backbone is never written here.
pub fn train_task(
    model: &mut AdaptedModel,
    train: &[Sample],
    registry: &PastRegistry,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<TaskRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("train_task: empty training split"));
    }
    let hp = AdamWParams::from(cfg);
    let shapes: Vec<usize> = model.flatten_shapes();
    let mut state = AdamWState::new(&shapes);
    let tail_start = cfg.steps_per_task - cfg.steps_per_task.div_ceil(10);
    let mut tail = Vec::new();
    let mut collision = Vec::new();
    let critical_retain = cfg.critical_retain();

    for step in 0..cfg.steps_per_task {
        let (xs, ys): (Vec<Vec<f64>>, Vec<usize>) = (0..cfg.batch_size)
            .map(|_| {
                let s = &train[rng.next_index(train.len())];
                (s.x.clone(), s.label)
            })
            .unzip();
        let trace = model.forward_train(&xs, ForwardOptions::train(cfg.selection()))?;
        let critical = model.critical_sets(critical_retain)?;
        let ago = AgoTerm {
            lambda: cfg.lambda,
            registry,
            critical: &critical,
        };
        let loss = ce_loss(&trace.logits, &ys)? + model.ago_penalty(&ago)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step} is {loss}")));
        }
        if step >= tail_start {
            tail.push(loss);
        }
        let grads = model.backward(&trace, &ys, Some(&ago))?;
        let mut params = model.trainable_mut();
        adamw_step(&mut params, &grads.slices(), &mut state, &hp)?;
        if !state.is_finite() {
            return Err(Error::NonFinite(format!("optimizer moments at step {step}")));
        }
        if (step + 1) % cfg.collision_every == 0 || step + 1 == cfg.steps_per_task {
            collision.push(CollisionPoint {
                step: step + 1,
                value: collision_total(model, registry, critical_retain)?,
            });
        }
    }
    let final_loss = if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    Ok(TaskRun { final_loss, collision })
}

/// Merges each layer's selected experts into the backbone, registers the
/// task's critical columns, and returns the checkpoint of the finished task.
pub fn end_of_task(
    model: &mut AdaptedModel,
    registry: &mut PastRegistry,
    cfg: &TrainConfig,
    task_id: usize,
) -> Result<AdapterCheckpoint> {
    let strategy = cfg.strategy();
    let mut layers = Vec::with_capacity(model.adapters.len());
    for (l, ad) in model.adapters.iter().enumerate() {
        let gate = ad.pool.merge_gate(&ad.memory, strategy)?;
        let frozen = &mut model.backbone.layers[l];
        frozen.weight = ad.pool.merge_with_gate(&frozen.weight, &gate)?;
        registry.register_task(task_id, &ad.pool, &ad.memory, cfg.critical_retain())?;
        layers.push(LayerCheckpoint::capture(ad, gate.support.clone(), strategy));
    }
    Ok(AdapterCheckpoint::new(task_id, cfg.critical_retain(), layers))
}

/// Deterministic pristine tower for a run.
pub fn build_backbone(seed: u64, d_in: usize, model_cfg: &ModelConfig) -> FrozenBackbone {
    FrozenBackbone::random(d_in, model_cfg, &mut SeededRng::derive(seed, BACKBONE_STREAM))
}

pub struct SequenceOutput {
    pub matrix: AccuracyMatrix,
    pub checkpoints: Vec<AdapterCheckpoint>,
    pub results: Vec<TaskResult>,
    pub backbone: FrozenBackbone,
    pub registry: PastRegistry,
}

/// Trains tasks in order; after each, evaluates the merged snapshot on every
/// task's test split to fill one row of the accuracy matrix.
pub fn run_sequence(tasks: &[TaskDataset], cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<SequenceOutput> {
    run_sequence_with(tasks, cfg, model_cfg, |_, _| Ok(()))
}

/// As [`run_sequence`], calling `on_task` with each checkpoint as it is made.
pub fn run_sequence_with<F>(
    tasks: &[TaskDataset],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    mut on_task: F,
) -> Result<SequenceOutput>
where
    F: FnMut(&AdapterCheckpoint, &TaskResult) -> Result<()>,
{
    cfg.validate()?;
    model_cfg.validate()?;
    let first = tasks.first().ok_or_else(|| Error::contract("run_sequence needs at least one task"))?;
    let d_in = first.centers[0].len();
    let pristine = build_backbone(cfg.seed, d_in, model_cfg);
    let prototypes: Vec<ClassPrototypes> = tasks
        .iter()
        .map(|t| t.prototypes(&pristine))
        .collect::<Result<_>>()?;

    let mut backbone = pristine.clone();
    let mut registry = PastRegistry::new();
    let mut rows = Vec::with_capacity(tasks.len());
    let mut checkpoints = Vec::with_capacity(tasks.len());
    let mut results = Vec::with_capacity(tasks.len());

    for (t, task) in tasks.iter().enumerate() {
        let task_id = t + 1;
        let mut init_rng = SeededRng::derive(cfg.seed, POOL_STREAM + task_id as u64);
        let mut model = AdaptedModel::new(backbone, prototypes[t].clone(), cfg.r, &mut init_rng)?;
        let before = model.backbone.checksum();
        let mut batch_rng = SeededRng::derive(cfg.seed, BATCH_STREAM + task_id as u64);
        let run = train_task(&mut model, &task.train, &registry, cfg, &mut batch_rng)?;
        debug_assert_eq!(before, model.backbone.checksum());
        let ckpt = end_of_task(&mut model, &mut registry, cfg, task_id)?;
        backbone = model.backbone;

        let row = tasks
            .iter()
            .zip(&prototypes)
            .map(|(task_j, protos)| evaluate(&backbone, protos, &task_j.test))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);

        let result = TaskResult {
            task_id,
            final_loss: run.final_loss,
            merged_sets: ckpt.layers.iter().map(|l| l.merged_set.clone()).collect(),
            collision: run.collision,
            checkpoint_path: None,
        };
        on_task(&ckpt, &result)?;
        checkpoints.push(ckpt);
        results.push(result);
    }
    Ok(SequenceOutput {
        matrix: AccuracyMatrix::new(rows)?,
        checkpoints,
        results,
        backbone,
        registry,
    })
}
