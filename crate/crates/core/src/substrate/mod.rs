//! Dense tensors, the primitive layer operations with their adjoints, a
//! recording graph for reverse-mode differentiation, and Adam.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod param;
pub mod seed;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, DEFAULT_FD_EPSILON};
pub use graph::{Gradients, Graph, Merge, NodeId};
pub use ops::{ConvSpec, Padding};
pub use param::{ParamSet, Parameter};
pub use seed::{fork, SeededRng, Stream};
pub use tensor::Tensor;
