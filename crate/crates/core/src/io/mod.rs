//! File formats: the tensor container, checkpoints, JSON inputs, PNG and OBJ.

mod checkpoint;
mod container;
mod formats;

pub use checkpoint::{gom_container, gom_from_container, load_checkpoint, load_gom, save_checkpoint, save_gom, Checkpoint};
pub use container::{Container, Dtype, Tensor, TensorData, ALIGN, MAGIC, VERSION};
pub use formats::*;
