//! Differentiation core and the per-point conditional denoiser.

mod checkpoint;
mod condition;
mod model;
mod optim;
pub mod tape;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use condition::{encode_condition, ConditionEncoding, COND_DIM, COND_NEIGHBORS};
pub use model::{
    array_to_points, points_to_array, time_embedding, Architecture, Bound, DenoiserModel, Linear,
    Role, Tensor,
};
pub use optim::{sgd_step, Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};
