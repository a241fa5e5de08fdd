//! Minimal tensor library: dense `f32` tensors, a reverse-mode tape,
//! optimizers, learning-rate schedules and a finite-difference checker.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod rng;
mod tensor;

pub use graph::{BatchStats, CustomBackward, Graph, Var};
pub use gradcheck::{grad_check, grad_check_params, GradCheckConfig, GradCheckReport};
pub use optim::{cosine_lr, CosineSchedule, Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{Param, ParamId, ParamStore};
pub use rng::{mix_seed, SeededRng};
pub use tensor::Tensor;
