//! Minimal differentiable core: tensors, a reverse-mode tape over a fixed
//! op set, parameter storage with AdamW, and the checkpoint container.

mod checkpoint;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::{Checkpoint, CKPT_SCHEMA};
pub use graph::{focal_term, gaussian_log_density, logistic, softmax_in_place, Graph, Var};
pub use optim::{AdamW, LrSchedule, ParameterStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("unknown parameter `{0}`")]
    MissingParameter(String),
    #[error("training divergence: {0}")]
    Divergence(String),
    #[error("checkpoint parse error at byte {offset}: {detail}")]
    Checkpoint { offset: usize, detail: String },
    #[error("checkpoint schema `{found}` is not supported (expected `{expected}`)")]
    Schema { found: String, expected: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
