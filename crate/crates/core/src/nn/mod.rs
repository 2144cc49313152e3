//! Minimal tensor engine with reverse-mode differentiation and Adam.

mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, write_manifest_json, Manifest};
pub use graph::{BatchStats, CellActivation, Graph, Var};
pub use params::{adam_update, AdamState, ParamEntry, ParamStore};
pub use tensor::Tensor;

/// Epsilon inside the batch-normalization square root.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the momentum update.
pub const BN_MOMENTUM: f64 = 0.99;
