#![allow(dead_code)]

use r1pool::ago::{PastRegistry, PastTaskRecord};
use r1pool::bench::{gen_tasks, SyntheticTaskSpec};
use r1pool::trainer::{train_task, TrainConfig};
use r1pool::math::{finite_diff_grad, norm, IndexSet, SeededRng};
use r1pool::model::{
    ce_loss, AdaptedModel, AgoTerm, ClassPrototypes, ForwardOptions, FrozenBackbone, ModelConfig,
};
use r1pool::pool::GateVector;
use r1pool::router::{GateMode, SelectionConfig};

pub struct Tiny {
    pub model: AdaptedModel,
    pub batch: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub sets: Vec<IndexSet>,
    pub critical: Vec<IndexSet>,
    pub registry: PastRegistry,
    pub selection: SelectionConfig,
    pub lambda: f64,
}

/// 2 layers, d = 4, r = 3, R = 2, batch 2, random non-zero adapters and a
/// one-task registry.
pub fn tiny_instance(seed: u64, mode: GateMode) -> Tiny {
    let mut rng = SeededRng::new(seed);
    let (d, r, retain, classes) = (4, 3, 2, 3);
    let cfg = ModelConfig {
        hidden_dim: d,
        layers: 2,
        temperature: 0.5,
        ..Default::default()
    };
    let backbone = FrozenBackbone::random(d, &cfg, &mut rng);
    let protos = ClassPrototypes::new((0..classes).map(|_| rng.gaussian_vec(d, 1.0)).collect()).unwrap();
    let mut model = AdaptedModel::new(backbone, protos, r, &mut rng).unwrap();
    let n = model.flatten_params().len();
    model.set_params(&rng.gaussian_vec(n, 0.6)).unwrap();

    let batch: Vec<Vec<f64>> = (0..2).map(|_| rng.gaussian_vec(d, 1.0)).collect();
    let labels: Vec<usize> = (0..2).map(|_| rng.next_index(classes)).collect();
    let selection = SelectionConfig {
        retain,
        gate_mode: mode,
    };
    let sets = model
        .forward_train(&batch, ForwardOptions::train(selection))
        .unwrap()
        .batch_sets();
    let critical: Vec<IndexSet> = (0..2).map(|_| random_subset(&mut rng, r, retain)).collect();
    let mut registry = PastRegistry::new();
    for l in 0..2 {
        registry
            .push_record(
                l,
                PastTaskRecord {
                    task_id: 1,
                    expert_indices: vec![0, 1],
                    critical_b: vec![rng.gaussian_vec(d, 1.0), rng.gaussian_vec(d, 1.0)],
                    frequencies: vec![2, 1],
                },
            )
            .unwrap();
    }
    Tiny {
        model,
        batch,
        labels,
        sets,
        critical,
        registry,
        selection,
        lambda: 0.1 + rng.next_f64(),
    }
}

pub fn random_subset(rng: &mut SeededRng, r: usize, k: usize) -> IndexSet {
    let mut idx: Vec<usize> = (0..r).collect();
    for i in (1..r).rev() {
        idx.swap(i, rng.next_index(i + 1));
    }
    idx.truncate(k);
    IndexSet::new(idx, r).unwrap()
}

impl Tiny {
    fn ago(&self) -> AgoTerm<'_> {
        AgoTerm {
            lambda: self.lambda,
            registry: &self.registry,
            critical: &self.critical,
        }
    }

    /// Total loss at `params` with selections held fixed.
    pub fn loss_at(&self, params: &[f64]) -> f64 {
        let mut m = self.model.clone();
        m.set_params(params).unwrap();
        let trace = m
            .forward_train(&self.batch, ForwardOptions::fixed(self.selection, &self.sets))
            .unwrap();
        ce_loss(&trace.logits, &self.labels).unwrap() + m.ago_penalty(&self.ago()).unwrap()
    }

    pub fn analytic(&mut self) -> Vec<f64> {
        let sets = self.sets.clone();
        let trace = self
            .model
            .forward_train(&self.batch, ForwardOptions::fixed(self.selection, &sets))
            .unwrap();
        self.model
            .backward(&trace, &self.labels, Some(&self.ago()))
            .unwrap()
            .flatten()
    }

    pub fn numeric(&self, h: f64) -> Vec<f64> {
        let p = self.model.flatten_params();
        finite_diff_grad(|x| self.loss_at(x), &p, h).unwrap()
    }

    /// Largest per-tensor relative error `‖g − f‖ / max(‖g‖, ‖f‖)`. Tensors
    /// whose both gradients vanish count as exact.
    pub fn worst_rel_error(&mut self, h: f64) -> f64 {
        let g = self.analytic();
        let f = self.numeric(h);
        let mut worst = 0.0f64;
        let mut offset = 0;
        for len in self.model.flatten_shapes() {
            let (gs, fs) = (&g[offset..offset + len], &f[offset..offset + len]);
            offset += len;
            let diff: Vec<f64> = gs.iter().zip(fs).map(|(a, b)| a - b).collect();
            let scale = norm(gs).max(norm(fs));
            let err = if scale < 1e-12 { norm(&diff) } else { norm(&diff) / scale };
            worst = worst.max(err);
        }
        worst
    }
}

/// Scalar-loop forward over explicit per-layer gates, independent of the
/// library's matrix helpers.
pub fn scalar_forward(model: &AdaptedModel, x: &[f64], gates: &[GateVector]) -> Vec<f64> {
    let bb = &model.backbone;
    let (d, d_in) = bb.input_proj.shape();
    let mut h = vec![0.0; d];
    for (i, hi) in h.iter_mut().enumerate() {
        for k in 0..d_in {
            *hi += bb.input_proj[(i, k)] * x[k];
        }
    }
    for (l, layer) in bb.layers.iter().enumerate() {
        let pool = &model.adapters[l].pool;
        let mut next = vec![0.0; layer.weight.rows()];
        for (j, out) in next.iter_mut().enumerate() {
            let mut pre = layer.bias[j];
            for k in 0..h.len() {
                pre += layer.weight[(j, k)] * h[k];
            }
            for (e, expert) in pool.experts.iter().enumerate() {
                let g = gates[l].weights[e];
                if g == 0.0 {
                    continue;
                }
                let mut ax = 0.0;
                for k in 0..h.len() {
                    ax += expert.a[k] * h[k];
                }
                pre += pool.forward_scale * g * expert.b[j] * ax;
            }
            *out = pre.tanh();
        }
        h = next;
    }
    let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    let z: Vec<f64> = h.iter().map(|v| v / n).collect();
    model
        .prototypes
        .vectors()
        .iter()
        .map(|p| p.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / bb.temperature)
        .collect()
}

/// A small pool trained for 20 steps, plus test inputs.
pub fn trained_tiny(seed: u64, mode: GateMode) -> (AdaptedModel, Vec<Vec<f64>>) {
    let spec = SyntheticTaskSpec {
        tasks: 1,
        classes: 3,
        input_dim: 6,
        train_per_class: 4,
        test_per_class: 3,
        seed,
        ..Default::default()
    };
    let task = gen_tasks(&spec).unwrap().remove(0);
    let mcfg = ModelConfig {
        hidden_dim: 6,
        ..Default::default()
    };
    let mut rng = SeededRng::new(seed);
    let bb = FrozenBackbone::random(6, &mcfg, &mut rng);
    let protos = task.prototypes(&bb).unwrap();
    let mut model = AdaptedModel::new(bb, protos, 5, &mut rng).unwrap();
    let cfg = TrainConfig {
        r: 5,
        retain: 3,
        merge_k: 2,
        steps_per_task: 20,
        batch_size: 4,
        lr: 0.05,
        gate_mode: mode,
        seed,
        ..Default::default()
    };
    train_task(&mut model, &task.train, &PastRegistry::new(), &cfg, &mut rng).unwrap();
    let xs = task.test.iter().map(|s| s.x.clone()).collect();
    (model, xs)
}
