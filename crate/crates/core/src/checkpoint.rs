//! Per-task adapter checkpoints: the experts, router, activation counts and
//! merge choice of every layer, stored as JSON.
//!
//! Floats are written with 17 significant digits so that a save → load →
//! save cycle reproduces the file byte for byte.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ago::PastTaskRecord;
use crate::error::{Error, Result};
use crate::math::{IndexSet, Matrix};
use crate::model::{Fnv1a, LayerAdapter};
use crate::pool::{ExpertPool, MergeStrategy, Rank1Expert};
use crate::router::{ActivationMemory, Router};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertRecord {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCheckpoint {
    pub layer_id: usize,
    pub d_out: usize,
    pub d_in: usize,
    pub r: usize,
    pub experts: Vec<ExpertRecord>,
    pub frequencies: Vec<u64>,
    pub samples_seen: u64,
    pub router: Vec<Vec<f64>>,
    pub merged_set: IndexSet,
    pub merge_strategy: MergeStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterCheckpoint {
    pub format_version: u32,
    pub task_id: usize,
    /// Size of the critical set registered for the orthogonality loss.
    pub critical_retain: usize,
    pub layers: Vec<LayerCheckpoint>,
    /// FNV-1a 64 of the canonical run config, as 16 hex digits.
    pub config_digest: String,
}

impl LayerCheckpoint {
    pub fn capture(adapter: &LayerAdapter, merged_set: IndexSet, strategy: MergeStrategy) -> Self {
        let pool = &adapter.pool;
        Self {
            layer_id: pool.layer_id,
            d_out: pool.d_out(),
            d_in: pool.d_in(),
            r: pool.r(),
            experts: pool
                .experts
                .iter()
                .map(|e| ExpertRecord {
                    b: e.b.clone(),
                    a: e.a.clone(),
                })
                .collect(),
            frequencies: adapter.memory.counts.clone(),
            samples_seen: adapter.memory.samples_seen,
            router: adapter.router.weights.to_rows(),
            merged_set,
            merge_strategy: strategy,
        }
    }

    pub fn pool(&self) -> Result<ExpertPool> {
        let experts = self
            .experts
            .iter()
            .map(|e| Rank1Expert {
                b: e.b.clone(),
                a: e.a.clone(),
            })
            .collect();
        ExpertPool::from_experts(self.layer_id, self.d_out, self.d_in, experts)
    }

    pub fn memory(&self) -> ActivationMemory {
        ActivationMemory {
            counts: self.frequencies.clone(),
            samples_seen: self.samples_seen,
        }
    }

    pub fn router(&self) -> Result<Router> {
        Ok(Router {
            weights: Matrix::from_rows(&self.router)?,
        })
    }

    pub fn adapter(&self) -> Result<LayerAdapter> {
        Ok(LayerAdapter {
            pool: self.pool()?,
            router: self.router()?,
            memory: self.memory(),
        })
    }

    /// The registry entry this layer contributed for `task_id`.
    pub fn past_record(&self, task_id: usize, retain: usize) -> Result<PastTaskRecord> {
        let set = self.memory().critical_set(retain)?;
        Ok(PastTaskRecord {
            task_id,
            expert_indices: set.as_slice().to_vec(),
            critical_b: set.iter().map(|i| self.experts[i].b.clone()).collect(),
            frequencies: set.iter().map(|i| self.frequencies[i]).collect(),
        })
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("checkpoint layer {}: {msg}", self.layer_id)));
        if self.experts.len() != self.r || self.frequencies.len() != self.r || self.router.len() != self.r {
            return bad(format!("expected {} experts, frequencies and router rows", self.r));
        }
        if self.experts.iter().any(|e| e.b.len() != self.d_out || e.a.len() != self.d_in) {
            return bad("expert dimensions disagree with d_out/d_in".into());
        }
        if self.router.iter().any(|row| row.len() != self.d_in) {
            return bad("router rows must have d_in entries".into());
        }
        if self.merged_set.iter().any(|i| i >= self.r) {
            return bad("merged_set index out of range".into());
        }
        IndexSet::new(self.merged_set.as_slice().to_vec(), self.r)
            .map_err(|e| Error::config(format!("checkpoint layer {}: {e}", self.layer_id)))?;
        Ok(())
    }
}

impl AdapterCheckpoint {
    pub fn new(task_id: usize, critical_retain: usize, layers: Vec<LayerCheckpoint>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            task_id,
            critical_retain,
            layers,
            config_digest: format!("{:016x}", 0),
        }
    }

    pub fn with_digest(mut self, digest: u64) -> Self {
        self.config_digest = format!("{digest:016x}");
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint format_version {}",
                self.format_version
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::config("checkpoint has no layers"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.layer_id != l {
                return Err(Error::config("checkpoint layers must be ordered by layer_id"));
            }
            layer.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        to_json_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s)?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Compact JSON whose floats always carry 17 significant digits.
#[derive(Default)]
pub struct Exact17;

impl serde_json::ser::Formatter for Exact17 {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Exact17);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}

/// FNV-1a 64 over the canonical (sorted-key, compact) JSON of `value`.
pub fn config_digest<T: Serialize>(value: &T) -> Result<u64> {
    let canonical = serde_json::to_value(value)?;
    let text = serde_json::to_string(&canonical)?;
    let mut h = Fnv1a::new();
    h.write(text.as_bytes());
    Ok(h.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::SeededRng;
    use proptest::prelude::*;

    fn sample(seed: u64) -> AdapterCheckpoint {
        let mut rng = SeededRng::new(seed);
        let mut pool = ExpertPool::init(0, 3, 4, 5, &mut rng).unwrap();
        for e in &mut pool.experts {
            e.b = rng.gaussian_vec(3, 1e-3);
        }
        let adapter = LayerAdapter {
            pool,
            router: Router::init(5, 4, &mut rng),
            memory: ActivationMemory {
                counts: vec![3, 0, 1, 2, 0],
                samples_seen: 3,
            },
        };
        let layer = LayerCheckpoint::capture(
            &adapter,
            IndexSet::new(vec![0, 3], 5).unwrap(),
            MergeStrategy::FrequencyWeighted { k: 2, alpha: 0.2 },
        );
        AdapterCheckpoint::new(1, 2, vec![layer]).with_digest(0xdead_beef)
    }

    #[test]
    fn fnv_reference() {
        // FNV-1a 64 of "a"
        let mut h = Fnv1a::new();
        h.write(b"a");
        assert_eq!(h.finish(), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn digest_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":{"b":2,"a":3}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":{"a":3,"b":2},"x":1}"#).unwrap();
        assert_eq!(config_digest(&a).unwrap(), config_digest(&b).unwrap());
    }

    #[test]
    fn rejects_bad_files() {
        let mut ck = sample(1);
        ck.format_version = 2;
        assert!(AdapterCheckpoint::from_json(&ck.to_json()).is_err());
        let mut ck = sample(1);
        ck.layers[0].frequencies.pop();
        assert!(AdapterCheckpoint::from_json(&ck.to_json()).is_err());
        assert!(AdapterCheckpoint::from_json("{\"format_version\":1}").is_err());
    }

    #[test]
    fn past_record_uses_critical_counts() {
        let ck = sample(2);
        let rec = ck.layers[0].past_record(1, 2).unwrap();
        assert_eq!(rec.expert_indices, vec![0, 3]);
        assert_eq!(rec.frequencies, vec![3, 2]);
    }

    proptest! {
        #[test]
        fn save_load_save_is_byte_identical(seed in any::<u64>()) {
            let ck = sample(seed);
            let first = ck.to_json();
            let back = AdapterCheckpoint::from_json(&first).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.to_json(), first);
        }
    }
}
