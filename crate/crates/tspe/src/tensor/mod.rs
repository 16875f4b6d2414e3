//! Dense f64 matrices, a reverse-mode autodiff tape, AdamW, and the
//! attention kernel shared by both pipeline stages.

pub mod attention;
pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod tape;

pub use attention::{
    attention_graph, attention_weights_graph, scaled_dot_attention, AttentionOutput,
};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use matrix::{argmax, cosine, Matrix};
pub use optim::{AdamW, ParamSet, Parameter};
pub use tape::{softmax_rows, Tape, VarId};
