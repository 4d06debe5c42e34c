//! Dense networks with hand-written reverse passes, AdamW, the cosine
//! learning-rate schedule and a central-difference gradient checker.

pub mod adamw;
pub mod gradcheck;
pub mod mlp;
pub mod schedule;

pub use adamw::{adamw_step, AdamWState, OptimHyper};
pub use gradcheck::{grad_check, GradCheckReport};
pub use mlp::{init_mlp, DenseLayer, Grads, Mlp, MlpTape, Parameters};
pub use schedule::cosine_lr;
