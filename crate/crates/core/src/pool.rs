//! The rank-1 expert pool: one layer's LoRA update `ΔW = BA` held as `r`
//! independent rank-1 terms `b_i a_iᵀ` that can be gated and merged one by one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{axpy, dot, top_k, IndexSet, Matrix, SeededRng};
use crate::router::ActivationMemory;

/// One rank-1 term `b aᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rank1Expert {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPool {
    pub layer_id: usize,
    d_out: usize,
    d_in: usize,
    pub experts: Vec<Rank1Expert>,
    pub forward_scale: f64,
}

/// Per-expert gate weights; zero outside `support`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub weights: Vec<f64>,
    pub support: IndexSet,
}

impl GateVector {
    /// Weight 1 on every index of `set`.
    pub fn binary(set: &IndexSet, r: usize) -> Self {
        let mut weights = vec![0.0; r];
        for i in set {
            weights[i] = 1.0;
        }
        Self {
            weights,
            support: set.clone(),
        }
    }

    pub fn full(r: usize) -> Self {
        Self::binary(&IndexSet::full(r), r)
    }

    pub fn empty(r: usize) -> Self {
        Self {
            weights: vec![0.0; r],
            support: IndexSet::empty(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Forces the listed experts off, keeping the weights of the rest.
    pub fn without(&self, zero: &IndexSet) -> Self {
        let mut weights = self.weights.clone();
        for i in zero {
            if i < weights.len() {
                weights[i] = 0.0;
            }
        }
        let kept: Vec<usize> = self.support.iter().filter(|&i| !zero.contains(i)).collect();
        Self {
            weights,
            support: IndexSet::new(kept, self.weights.len()).expect("subset of a valid set"),
        }
    }
}

/// How selected experts are folded back into the frozen weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MergeStrategy {
    /// `W0 + Σ_{i ∈ top_k(C)} b_i a_iᵀ`.
    UniformTopk { k: usize },
    /// `W0 + α Σ_{i ∈ top_k(C)} π̄_i b_i a_iᵀ` with `π̄_i = C[i] / samples_seen`.
    FrequencyWeighted { k: usize, alpha: f64 },
}

impl MergeStrategy {
    pub fn k(&self) -> usize {
        match *self {
            MergeStrategy::UniformTopk { k } | MergeStrategy::FrequencyWeighted { k, .. } => k,
        }
    }

    pub fn with_k(self, k: usize) -> Self {
        match self {
            MergeStrategy::UniformTopk { .. } => MergeStrategy::UniformTopk { k },
            MergeStrategy::FrequencyWeighted { alpha, .. } => {
                MergeStrategy::FrequencyWeighted { k, alpha }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MergeStrategy::UniformTopk { .. } => "uniform_topk",
            MergeStrategy::FrequencyWeighted { .. } => "frequency_weighted",
        }
    }
}

impl ExpertPool {
    /// Fresh pool: `a_i ~ N(0, 1/d_in)`, `b_i = 0`, so `ΔW = 0`.
    pub fn init(layer_id: usize, d_out: usize, d_in: usize, r: usize, rng: &mut SeededRng) -> Result<Self> {
        if r == 0 {
            return Err(Error::contract("expert pool needs r >= 1"));
        }
        let std = (1.0 / d_in as f64).sqrt();
        let experts = (0..r)
            .map(|_| Rank1Expert {
                b: vec![0.0; d_out],
                a: rng.gaussian_vec(d_in, std),
            })
            .collect();
        Ok(Self {
            layer_id,
            d_out,
            d_in,
            experts,
            forward_scale: 1.0,
        })
    }

    /// Splits `B` (d_out×r) and `A` (r×d_in) into column/row pairs.
    pub fn from_dense(layer_id: usize, b: &Matrix, a: &Matrix) -> Result<Self> {
        if b.cols() != a.rows() || b.cols() == 0 {
            return Err(Error::contract(format!(
                "from_dense: B is {:?}, A is {:?}",
                b.shape(),
                a.shape()
            )));
        }
        let experts = (0..b.cols())
            .map(|i| Rank1Expert {
                b: b.column(i),
                a: a.row(i).to_vec(),
            })
            .collect();
        Ok(Self {
            layer_id,
            d_out: b.rows(),
            d_in: a.cols(),
            experts,
            forward_scale: 1.0,
        })
    }

    /// Rebuilds a pool from stored experts, checking dimensions.
    pub fn from_experts(layer_id: usize, d_out: usize, d_in: usize, experts: Vec<Rank1Expert>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::contract("expert pool needs r >= 1"));
        }
        for (i, e) in experts.iter().enumerate() {
            if e.b.len() != d_out || e.a.len() != d_in {
                return Err(Error::contract(format!(
                    "expert {i} has dims ({}, {}), expected ({d_out}, {d_in})",
                    e.b.len(),
                    e.a.len()
                )));
            }
            if e.b.iter().chain(&e.a).any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("expert {i} has non-finite entries")));
            }
        }
        Ok(Self {
            layer_id,
            d_out,
            d_in,
            experts,
            forward_scale: 1.0,
        })
    }

    pub fn r(&self) -> usize {
        self.experts.len()
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn b_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.d_out, self.r());
        for (j, e) in self.experts.iter().enumerate() {
            for (i, &v) in e.b.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn a_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.r(), self.d_in);
        for (i, e) in self.experts.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&e.a);
        }
        m
    }

    fn check_gate(&self, gate: &GateVector) -> Result<()> {
        if gate.len() != self.r() {
            return Err(Error::contract(format!(
                "gate has {} weights for a pool of {} experts",
                gate.len(),
                self.r()
            )));
        }
        Ok(())
    }

    /// `forward_scale · Σ_i w_i b_i a_iᵀ`.
    pub fn to_dense_update(&self, gate: &GateVector) -> Result<Matrix> {
        self.check_gate(gate)?;
        let mut out = Matrix::zeros(self.d_out, self.d_in);
        for (e, &w) in self.experts.iter().zip(&gate.weights) {
            if w == 0.0 {
                continue;
            }
            let coef = self.forward_scale * w;
            for (i, &bi) in e.b.iter().enumerate() {
                axpy(coef * bi, &e.a, out.row_mut(i));
            }
        }
        Ok(out)
    }

    /// `Σ_i w_i b_i (a_i · x)` without materialising ΔW.
    pub fn delta(&self, gate: &GateVector, x: &[f64]) -> Result<Vec<f64>> {
        self.check_gate(gate)?;
        if x.len() != self.d_in {
            return Err(Error::contract(format!(
                "input of length {} for a pool with d_in {}",
                x.len(),
                self.d_in
            )));
        }
        let mut out = vec![0.0; self.d_out];
        for (e, &w) in self.experts.iter().zip(&gate.weights) {
            if w == 0.0 {
                continue;
            }
            let u = dot(&e.a, x);
            axpy(self.forward_scale * w * u, &e.b, &mut out);
        }
        Ok(out)
    }

    /// Pre-activation of an adapted linear layer: `W0 x + bias + ΔW_gated x`.
    pub fn apply(&self, gate: &GateVector, w0: &Matrix, bias: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if w0.shape() != (self.d_out, self.d_in) || bias.len() != self.d_out {
            return Err(Error::contract(format!(
                "apply: W0 {:?} / bias {} against pool ({}, {})",
                w0.shape(),
                bias.len(),
                self.d_out,
                self.d_in
            )));
        }
        let mut y = w0.matvec(x)?;
        axpy(1.0, bias, &mut y);
        let d = self.delta(gate, x)?;
        axpy(1.0, &d, &mut y);
        Ok(y)
    }

    /// Effective per-expert weights a merge under `strategy` would use.
    pub fn merge_gate(&self, memory: &ActivationMemory, strategy: MergeStrategy) -> Result<GateVector> {
        if memory.counts.len() != self.r() {
            return Err(Error::contract("activation memory does not match pool size"));
        }
        let k = strategy.k();
        if k > self.r() {
            return Err(Error::contract(format!("merge k = {k} exceeds r = {}", self.r())));
        }
        let set = top_k(&memory.counts, k)?;
        let mut gate = GateVector::binary(&set, self.r());
        if let MergeStrategy::FrequencyWeighted { alpha, .. } = strategy {
            let seen = memory.samples_seen.max(1) as f64;
            for i in &set {
                gate.weights[i] = alpha * memory.counts[i] as f64 / seen;
            }
        }
        Ok(gate)
    }

    /// `W0 + forward_scale · Σ_i w_i b_i a_iᵀ`, returning a new matrix.
    pub fn merge_with_gate(&self, w0: &Matrix, gate: &GateVector) -> Result<Matrix> {
        if w0.shape() != (self.d_out, self.d_in) {
            return Err(Error::contract("merge: W0 shape does not match pool"));
        }
        w0.add(&self.to_dense_update(gate)?)
    }

    pub fn merge_into(&self, w0: &Matrix, memory: &ActivationMemory, strategy: MergeStrategy) -> Result<Matrix> {
        let gate = self.merge_gate(memory, strategy)?;
        self.merge_with_gate(w0, &gate)
    }

    pub fn is_finite(&self) -> bool {
        self.experts
            .iter()
            .all(|e| e.a.iter().chain(&e.b).all(|v| v.is_finite()))
    }
}
