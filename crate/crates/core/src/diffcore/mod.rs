//! Dense `f64` tensors, reverse-mode differentiation, seeded random streams,
//! and a finite-difference gradient oracle.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use graph::{ElementwiseFn, Graph, Mode, RunningStats, Var};
pub use params::{Param, ParamStore};
pub use rng::{Rng, RngState, RngStreams, Stream};
pub use tensor::Tensor;
