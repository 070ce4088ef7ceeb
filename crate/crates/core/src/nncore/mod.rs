//! Small reverse-mode differentiable tensor engine: the layers the detector
//! needs, Adam, checkpoints and a finite-difference gradient checker.

mod autograd;
pub mod checkpoint;
pub mod gradcheck;
mod layers;
mod optim;
mod params;
mod tensor;

pub use autograd::{conv_out_len, focal, huber, BatchStats, Gradients, GruVars, Padding2d, Tape, Var, PROB_FLOOR};
pub use checkpoint::{content_id, Checkpoint};
pub use layers::{BatchNorm2d, BiGru, Conv2d, GruDirection, Mode, BN_EPS, BN_MOMENTUM};
pub use optim::{Adam, OptimizerConfig};
pub use params::{uniform_init, Buffer, BufferId, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
