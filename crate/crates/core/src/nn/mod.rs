//! Small CPU tensor engine: NCHW tensors, a reverse-mode tape and the
//! optimizer pieces used to train the denoiser.

mod graph;
mod param;
mod tensor;

pub use graph::{Graph, Var};
pub use param::{clip_grad_norm, ema_update, global_norm, AdamState, AdamWParams, ParamStore};
pub use tensor::{Element, Tensor};
