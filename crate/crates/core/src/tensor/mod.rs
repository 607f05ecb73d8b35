//! Dense N-D tensors and the reverse-mode differentiation engine.

pub mod array;
pub mod conv;
pub mod element;
pub mod gradcheck;
pub mod graph;

pub use array::{strides_of, Array, ArrayF};
pub use element::Element;
pub use graph::{Graph, Op, TensorId};
