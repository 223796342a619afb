//! A small reverse-mode neural network toolkit with hand-written backward
//! passes for the fixed topologies used by the splice classifier.
//!
//! Everything is generic over [`Float`] so that the same code runs in
//! single precision for training and double precision for gradient checks.

mod checkpoint;
mod gemm;
mod gradcheck;
mod init;
mod layers;
mod lstm;
mod module;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CheckpointEntry};
pub use gradcheck::{grad_check, grad_check_module, relative_error, GradCheckReport};
pub use init::{kaiming_uniform, orthogonal};
pub use layers::{
    log_softmax, relu, relu_backward, softmax, softmax_backward, softmax_cross_entropy, Conv2d, Conv2dCache,
    Linear, MaxPool2d, PoolCache,
};
pub use lstm::{Lstm, LstmCache, GATE_CANDIDATE, GATE_FORGET, GATE_INPUT, GATE_OUTPUT};
pub use module::Module;
pub use tensor::{Param, Tensor};

/// Scalar type of tensors.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("float conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("float conversion")
    }
}

impl Float for f32 {}
impl Float for f64 {}
