//! Small reverse-mode autodiff engine over dense `f64` tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are bound
//! by identity so a weight used in several places receives one accumulated
//! gradient, and whole modules can be frozen so no weight gradient is
//! computed for them while gradients still flow through to their inputs.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod param;
pub mod tensor;

pub use conv::Padding;
pub use gradcheck::{check_inputs, check_module, GradCheckOptions, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use optim::RmsProp;
pub use param::{leaky_relu_gain, scoped, Module, Param};
pub use tensor::Tensor;
