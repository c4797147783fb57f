//! Reverse-mode differentiation, small networks, Adam and gradient checks.

pub mod dual;
pub mod gradcheck;
pub mod mlp;
pub mod params;
pub mod tape;

pub use gradcheck::{gradcheck, gradcheck_fn, GradcheckReport};
pub use mlp::{mlp_backward, mlp_forward, mlp_tape, MlpCache, MlpSpec};
pub use params::{adam_step, AdamConfig, ParamEntry, ParamStore};
pub use tape::{Grads, Tape, Var};
