//! Dense tensors, a reverse-mode tape, Adam, gradient checking and
//! checkpoint I/O.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod value;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, IndexEntry, INDEX_FILE, WEIGHTS_FILE};
pub use gradcheck::{grad_check, GradCheckReport, REL_FLOOR};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use value::Tensor;
