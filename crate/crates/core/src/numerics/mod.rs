//! Differentiable computation core.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use ops::{
    cosine_similarity, dense_forward, euclidean_distance, relu, softmax, softmax_cross_entropy,
};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor2;
