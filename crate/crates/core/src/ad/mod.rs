//! Dense-array math and reverse-mode differentiation for the pipeline.

mod adam;
mod gradcheck;
mod direct;
mod graph;
pub mod kernels;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use kernels::{ConvSpec, Padding, SparseMap};
pub use params::{fan_in_uniform, kaiming_uniform, Bound, ParamSet};

pub(crate) use graph::bce_sum;
