//! Dense f64 tensors, a reverse-mode tape, Adam, and JSON checkpoints.

mod adam;
mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{config_hash, Checkpoint, CheckpointHeader, StoredTensor, FORMAT_VERSION};
pub use params::{glorot, Bound, ParamSet};
pub use tape::{GradientMap, NodeGrads, ParamId, Primitive, Tape, Var};
pub use tensor::Tensor;
