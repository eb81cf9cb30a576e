//! Desk-scale dual-encoder classifier: a frozen tanh MLP feature tower with a
//! rank-1 expert pool and router on every layer, scored by cosine similarity
//! against frozen class prototypes.
//!
//! Gradients are derived by hand. Selection index sets are treated as
//! constants; in masked-softmax mode the gate weights carry gradient back to
//! the router, and through the router's input into earlier layers.

use serde::{Deserialize, Serialize};

use crate::ago::{ago_grad, ago_loss, PastRegistry};
use crate::error::{Error, Result};
use crate::math::{axpy, dot, log_sum_exp, norm, softmax, IndexSet, Matrix, SeededRng};
use crate::pool::{ExpertPool, GateVector};
use crate::router::{self, ActivationMemory, GateMode, Router, SelectionConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Frozen feature tower. Only [`crate::trainer::end_of_task`] writes to it,
/// by merging experts into `layers[..].weight`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenBackbone {
    pub input_proj: Matrix,
    pub layers: Vec<DenseLayer>,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub temperature: f64,
    pub weight_gain: f64,
    pub bias_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            layers: 2,
            temperature: 0.1,
            weight_gain: 1.0,
            bias_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.layers == 0 {
            return Err(Error::config("model.hidden_dim and model.layers must be >= 1"));
        }
        if !(self.temperature > 0.0) || !(self.weight_gain > 0.0) || !(self.bias_std >= 0.0) {
            return Err(Error::config("model.temperature and model.weight_gain must be positive"));
        }
        Ok(())
    }
}

impl FrozenBackbone {
    pub fn random(d_in: usize, cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.hidden_dim;
        let input_proj = Matrix::gaussian(d, d_in, (1.0 / d_in as f64).sqrt(), rng);
        let layers = (0..cfg.layers)
            .map(|_| DenseLayer {
                weight: Matrix::gaussian(d, d, cfg.weight_gain / (d as f64).sqrt(), rng),
                bias: rng.gaussian_vec(d, cfg.bias_std),
            })
            .collect();
        Self {
            input_proj,
            layers,
            temperature: cfg.temperature,
        }
    }

    pub fn d_in(&self) -> usize {
        self.input_proj.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.input_proj.rows()
    }

    /// Unnormalised output of the last layer.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.input_proj.matvec(x)?;
        for layer in &self.layers {
            let mut pre = layer.weight.matvec(&h)?;
            axpy(1.0, &layer.bias, &mut pre);
            h = pre.into_iter().map(f64::tanh).collect();
        }
        Ok(h)
    }

    /// Unit-norm embedding `z`.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(unit(&self.features(x)?).0)
    }

    /// Plain dense forward with whatever weights are merged in:
    /// `logits[c] = ⟨z, p_c⟩ / τ`.
    pub fn forward_eval(&self, x: &[f64], prototypes: &ClassPrototypes) -> Result<Vec<f64>> {
        let z = self.embed(x)?;
        Ok(prototypes.logits(&z, self.temperature))
    }

    /// FNV-1a over the bit patterns of every frozen parameter.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_f64s(self.input_proj.as_slice());
        for l in &self.layers {
            h.write_f64s(l.weight.as_slice());
            h.write_f64s(&l.bias);
        }
        h.write_f64s(&[self.temperature]);
        h.finish()
    }
}

pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub(crate) fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn write_f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.write(&x.to_bits().to_le_bytes());
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

fn unit(h: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(h);
    if n == 0.0 {
        return (h.to_vec(), 0.0);
    }
    (h.iter().map(|v| v / n).collect(), n)
}

/// Unit-norm class embeddings ("text" side), frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypes {
    vectors: Vec<Vec<f64>>,
}

impl ClassPrototypes {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let d = vectors.first().map_or(0, Vec::len);
        if vectors.is_empty() || vectors.iter().any(|v| v.len() != d) {
            return Err(Error::contract("prototypes must be non-empty and equal length"));
        }
        let vectors = vectors
            .iter()
            .map(|v| {
                let (u, n) = unit(v);
                if n == 0.0 {
                    Err(Error::contract("zero-length prototype"))
                } else {
                    Ok(u)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { vectors })
    }

    /// Embeds each class centre with the given (pristine) tower.
    pub fn from_centers(tower: &FrozenBackbone, centers: &[Vec<f64>]) -> Result<Self> {
        let feats = centers
            .iter()
            .map(|c| tower.features(c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(feats)
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn logits(&self, z: &[f64], temperature: f64) -> Vec<f64> {
        self.vectors.iter().map(|p| dot(z, p) / temperature).collect()
    }
}

/// Trainable state attached to one backbone layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapter {
    pub pool: ExpertPool,
    pub router: Router,
    pub memory: ActivationMemory,
}

#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub backbone: FrozenBackbone,
    pub adapters: Vec<LayerAdapter>,
    pub prototypes: ClassPrototypes,
    generation: u64,
}

/// How each layer picks its active experts during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    /// Two-stage top-R selection from router scores.
    Route,
    /// Use these batch-level sets (one per layer) as given.
    Fixed(&'a [IndexSet]),
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub selection: SelectionConfig,
    pub routing: Routing<'a>,
    pub record: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn train(selection: SelectionConfig) -> Self {
        Self {
            selection,
            routing: Routing::Route,
            record: true,
        }
    }

    /// Replays fixed sets without touching activation memory.
    pub fn fixed(selection: SelectionConfig, sets: &'a [IndexSet]) -> Self {
        Self {
            selection,
            routing: Routing::Fixed(sets),
            record: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Layer input per sample; doubles as the router's CLS surrogate `φ`.
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
    pub sample_sets: Vec<IndexSet>,
    pub batch_set: IndexSet,
    pub gates: Vec<GateVector>,
}

/// Everything `backward` needs from one `forward_train` call.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub features: Vec<Vec<f64>>,
    pub feature_norms: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub gate_mode: GateMode,
    generation: u64,
}

impl ForwardTrace {
    pub fn batch_sets(&self) -> Vec<IndexSet> {
        self.layers.iter().map(|l| l.batch_set.clone()).collect()
    }

    pub fn batch_size(&self) -> usize {
        self.logits.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub router: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(model: &AdaptedModel) -> Self {
        let layers = model
            .adapters
            .iter()
            .map(|ad| LayerGrads {
                a: vec![vec![0.0; ad.pool.d_in()]; ad.pool.r()],
                b: vec![vec![0.0; ad.pool.d_out()]; ad.pool.r()],
                router: Matrix::zeros(ad.router.weights.rows(), ad.router.weights.cols()),
            })
            .collect();
        Self { layers }
    }

    /// Flat views in the same order as [`AdaptedModel::trainable_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            for (a, b) in l.a.iter().zip(&l.b) {
                out.push(a.as_slice());
                out.push(b.as_slice());
            }
            out.push(l.router.as_slice());
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Orthogonality term added to the supervised loss: `λ Σ_l L_AGO(l)` with the
/// current critical set of each layer.
#[derive(Debug, Clone, Copy)]
pub struct AgoTerm<'a> {
    pub lambda: f64,
    pub registry: &'a PastRegistry,
    pub critical: &'a [IndexSet],
}

impl AdaptedModel {
    /// Fresh pool, router and memory on every layer of `backbone`.
    pub fn new(backbone: FrozenBackbone, prototypes: ClassPrototypes, r: usize, rng: &mut SeededRng) -> Result<Self> {
        let d = backbone.hidden_dim();
        if prototypes.dim() != d {
            return Err(Error::contract("prototype dim does not match backbone"));
        }
        let adapters = (0..backbone.layers.len())
            .map(|l| {
                Ok(LayerAdapter {
                    pool: ExpertPool::init(l, d, d, r, rng)?,
                    router: Router::init(r, d, rng),
                    memory: ActivationMemory::new(r),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            backbone,
            adapters,
            prototypes,
            generation: 0,
        })
    }

    pub fn from_parts(backbone: FrozenBackbone, adapters: Vec<LayerAdapter>, prototypes: ClassPrototypes) -> Result<Self> {
        if adapters.len() != backbone.layers.len() {
            return Err(Error::contract("one adapter per backbone layer required"));
        }
        for (l, ad) in adapters.iter().enumerate() {
            let (d_out, d_in) = backbone.layers[l].weight.shape();
            if ad.pool.d_out() != d_out || ad.pool.d_in() != d_in {
                return Err(Error::contract(format!("adapter {l} dims do not match its layer")));
            }
            if ad.router.r() != ad.pool.r() || ad.router.weights.cols() != d_in {
                return Err(Error::contract(format!("router {l} dims do not match its pool")));
            }
            if ad.memory.counts.len() != ad.pool.r() {
                return Err(Error::contract(format!("memory {l} does not match its pool")));
            }
        }
        Ok(Self {
            backbone,
            adapters,
            prototypes,
            generation: 0,
        })
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Mutable views of every trainable tensor: per layer, `(a_i, b_i)` for
    /// each expert, then the router matrix. Bumps the generation so older
    /// traces are rejected by `backward`.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        let mut out: Vec<&mut [f64]> = Vec::new();
        for ad in &mut self.adapters {
            for e in &mut ad.pool.experts {
                out.push(e.a.as_mut_slice());
                out.push(e.b.as_mut_slice());
            }
            out.push(ad.router.weights.as_mut_slice());
        }
        out
    }

    /// Lengths of the tensors returned by `trainable_mut`, in order.
    pub fn flatten_shapes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for ad in &self.adapters {
            for e in &ad.pool.experts {
                out.push(e.a.len());
                out.push(e.b.len());
            }
            out.push(ad.router.weights.as_slice().len());
        }
        out
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for ad in &self.adapters {
            for e in &ad.pool.experts {
                out.extend_from_slice(&e.a);
                out.extend_from_slice(&e.b);
            }
            out.extend_from_slice(ad.router.weights.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        for slot in self.trainable_mut() {
            let n = slot.len();
            if offset + n > flat.len() {
                return Err(Error::contract("set_params: too few values"));
            }
            slot.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        if offset != flat.len() {
            return Err(Error::contract("set_params: too many values"));
        }
        Ok(())
    }

    pub fn reset_memories(&mut self) {
        for ad in &mut self.adapters {
            ad.memory = ActivationMemory::new(ad.pool.r());
        }
    }

    /// Current critical set of every layer.
    pub fn critical_sets(&self, retain: usize) -> Result<Vec<IndexSet>> {
        self.adapters.iter().map(|ad| ad.memory.critical_set(retain)).collect()
    }

    /// Adapted forward pass over a batch; records activations when asked.
    pub fn forward_train(&mut self, batch: &[Vec<f64>], opts: ForwardOptions<'_>) -> Result<ForwardTrace> {
        if batch.is_empty() {
            return Err(Error::contract("forward_train needs a non-empty batch"));
        }
        if let Routing::Fixed(sets) = opts.routing {
            if sets.len() != self.adapters.len() {
                return Err(Error::contract("fixed routing needs one set per layer"));
            }
        }
        let retain = opts.selection.retain;
        let mode = opts.selection.gate_mode;
        let mut hs: Vec<Vec<f64>> = batch
            .iter()
            .map(|x| self.backbone.input_proj.matvec(x))
            .collect::<Result<_>>()?;

        let mut layers = Vec::with_capacity(self.adapters.len());
        for (l, ad) in self.adapters.iter_mut().enumerate() {
            let frozen = &self.backbone.layers[l];
            let r = ad.pool.r();
            let scores: Vec<Vec<f64>> = hs
                .iter()
                .map(|h| ad.router.scores(h))
                .collect::<Result<_>>()?;
            let (sample_sets, batch_set) = match opts.routing {
                Routing::Route => {
                    opts.selection.validate(r)?;
                    let sets: Vec<IndexSet> = scores
                        .iter()
                        .map(|s| router::select_sample(s, retain))
                        .collect::<Result<_>>()?;
                    let chosen = router::select_batch(&sets, r, retain)?;
                    (sets, chosen)
                }
                Routing::Fixed(sets) => (Vec::new(), sets[l].clone()),
            };
            if opts.record {
                for s in &sample_sets {
                    ad.memory.record(s);
                }
            }
            let gates: Vec<GateVector> = scores
                .iter()
                .map(|s| router::gate(s, &batch_set, mode))
                .collect::<Result<_>>()?;
            let outputs: Vec<Vec<f64>> = hs
                .iter()
                .zip(&gates)
                .map(|(h, g)| {
                    let pre = ad.pool.apply(g, &frozen.weight, &frozen.bias, h)?;
                    Ok(pre.into_iter().map(f64::tanh).collect())
                })
                .collect::<Result<_>>()?;
            let inputs = std::mem::replace(&mut hs, outputs.clone());
            layers.push(LayerTrace {
                inputs,
                outputs,
                scores,
                sample_sets,
                batch_set,
                gates,
            });
        }

        let mut embeddings = Vec::with_capacity(hs.len());
        let mut feature_norms = Vec::with_capacity(hs.len());
        let mut logits = Vec::with_capacity(hs.len());
        for h in &hs {
            let (z, n) = unit(h);
            logits.push(self.prototypes.logits(&z, self.backbone.temperature));
            embeddings.push(z);
            feature_norms.push(n);
        }
        Ok(ForwardTrace {
            layers,
            features: hs,
            feature_norms,
            embeddings,
            logits,
            gate_mode: mode,
            generation: self.generation,
        })
    }

    /// `λ Σ_l L_AGO(l)`.
    pub fn ago_penalty(&self, ago: &AgoTerm<'_>) -> Result<f64> {
        if ago.critical.len() != self.adapters.len() {
            return Err(Error::contract("one critical set per layer required"));
        }
        let mut total = 0.0;
        for (ad, k) in self.adapters.iter().zip(ago.critical) {
            total += ago_loss(ago.registry.layer(ad.pool.layer_id), &ad.pool, k)?;
        }
        Ok(ago.lambda * total)
    }

    /// Reverse-mode gradients of `ce_loss + λ L_AGO` for the batch in `trace`.
    pub fn backward(&self, trace: &ForwardTrace, labels: &[usize], ago: Option<&AgoTerm<'_>>) -> Result<Gradients> {
        if trace.generation != self.generation {
            return Err(Error::contract("stale trace: parameters changed since forward"));
        }
        let n = trace.batch_size();
        if labels.len() != n {
            return Err(Error::contract("label count does not match batch"));
        }
        let classes = self.prototypes.num_classes();
        let tau = self.backbone.temperature;
        let mut grads = Gradients::zeros_like(self);

        // d loss / d last-layer output, per sample
        let mut dh: Vec<Vec<f64>> = Vec::with_capacity(n);
        for s in 0..n {
            let y = labels[s];
            if y >= classes {
                return Err(Error::contract(format!("label {y} outside [0, {classes})")));
            }
            let mut dlogits = softmax(&trace.logits[s]);
            dlogits[y] -= 1.0;
            let mut dz = vec![0.0; self.prototypes.dim()];
            for (c, p) in self.prototypes.vectors().iter().enumerate() {
                axpy(dlogits[c] / (tau * n as f64), p, &mut dz);
            }
            let z = &trace.embeddings[s];
            let hn = trace.feature_norms[s];
            let zdz = dot(z, &dz);
            dh.push(if hn == 0.0 {
                vec![0.0; z.len()]
            } else {
                dz.iter().zip(z).map(|(g, zi)| (g - zi * zdz) / hn).collect()
            });
        }

        for (l, lt) in trace.layers.iter().enumerate().rev() {
            let ad = &self.adapters[l];
            let frozen = &self.backbone.layers[l];
            let kappa = ad.pool.forward_scale;
            let lg = &mut grads.layers[l];
            let mut dh_in = Vec::with_capacity(n);
            for s in 0..n {
                let h = &lt.inputs[s];
                let out = &lt.outputs[s];
                let gate = &lt.gates[s];
                let dpre: Vec<f64> = dh[s].iter().zip(out).map(|(g, o)| g * (1.0 - o * o)).collect();
                let mut dx = frozen.weight.matvec_t(&dpre)?;
                let mut dgate = vec![0.0; ad.pool.r()];
                for i in &gate.support {
                    let e = &ad.pool.experts[i];
                    let w = gate.weights[i];
                    let u = dot(&e.a, h);
                    let bd = dot(&e.b, &dpre);
                    axpy(kappa * w * u, &dpre, &mut lg.b[i]);
                    axpy(kappa * w * bd, h, &mut lg.a[i]);
                    axpy(kappa * w * bd, &e.a, &mut dx);
                    dgate[i] = kappa * u * bd;
                }
                if trace.gate_mode == GateMode::MaskedSoftmax && !gate.support.is_empty() {
                    let mean: f64 = gate.support.iter().map(|k| gate.weights[k] * dgate[k]).sum();
                    let mut dscores = vec![0.0; ad.pool.r()];
                    for j in &gate.support {
                        dscores[j] = gate.weights[j] * (dgate[j] - mean);
                    }
                    for (j, &ds) in dscores.iter().enumerate() {
                        if ds != 0.0 {
                            axpy(ds, h, lg.router.row_mut(j));
                        }
                    }
                    axpy(1.0, &ad.router.weights.matvec_t(&dscores)?, &mut dx);
                }
                dh_in.push(dx);
            }
            dh = dh_in;
        }

        if let Some(ago) = ago {
            if ago.critical.len() != self.adapters.len() {
                return Err(Error::contract("one critical set per layer required"));
            }
            if ago.lambda != 0.0 {
                for (l, ad) in self.adapters.iter().enumerate() {
                    let g = ago_grad(ago.registry.layer(ad.pool.layer_id), &ad.pool, &ago.critical[l])?;
                    for (gb, ga) in grads.layers[l].b.iter_mut().zip(&g) {
                        axpy(ago.lambda, ga, gb);
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Mean cross-entropy `−log softmax(logits_n)[y_n]`.
pub fn ce_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::contract("ce_loss: logits and labels must be non-empty and aligned"));
    }
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::contract(format!("label {y} outside [0, {})", row.len())));
        }
        total += log_sum_exp(row) - row[y];
    }
    Ok(total / logits.len() as f64)
}

/// Index of the largest logit; ties go to the lower class.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
