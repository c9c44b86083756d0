//! Reverse-mode differentiation substrate: a value-eager tape, the layer set
//! used by the audio and visual networks, Adam, finite-difference gradient
//! checks and a bit-exact checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod par;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, save_checkpoint_with, Checkpoint, CheckpointMeta};
pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, projection_loss, GradCheckOptions, GradCheckReport};
pub use graph::{Ctx, Mode};
pub use layers::{LayerSpec, Network};
pub use optim::{AdamConfig, AdamState};
pub use params::{ParamId, ParamKind, ParamStore};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
