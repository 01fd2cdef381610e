//! Numeric kernels: dense matrices, SVDF and projection layers, softmax, SGD.

mod layers;
mod matrix;

pub use layers::{
    projection_backward, projection_forward, sgd_step, softmax, softmax_backward_rows,
    softmax_rows, svdf_backward, svdf_forward, svdf_forward_cached, Activation, ProjectionCache,
    ProjectionGrads, ProjectionParams, SvdfCache, SvdfGrads, SvdfParams, SvdfState,
};
pub use matrix::Matrix;
