//! Continual learning with a pool of rank-1 LoRA experts, a two-stage router
//! with activation memory, an activation-guided orthogonality penalty and
//! sparse merge-back into the backbone.

pub mod ago;
pub mod analysis;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod math;
pub mod model;
pub mod pool;
pub mod router;
pub mod trainer;

pub use error::{Error, Result};
