//! Minimal dense-tensor compute with reverse-mode gradients.
//!
//! Everything downstream of the point clouds runs on [`Tensor4`] values in
//! NCHW layout, double precision throughout so analytic gradients can be
//! validated against central finite differences at tight tolerance. The layer
//! set is exactly what the fusion pipeline and the feature denoiser need:
//! 3x3 and 1x1 convolutions, ReLU/SiLU, a per-channel affine normalization,
//! nearest-neighbour down/up-sampling by two, channel concatenation, residual
//! addition, a sinusoidal timestep embedding, and a fully-connected layer.
//!
//! A [`Graph`] is an explicit DAG of those layers. `forward` caches every node
//! output in a [`Trace`]; `backward` walks the trace in reverse, accumulating
//! parameter gradients and returning gradients for the graph inputs so graphs
//! can be chained (the denoiser is unrolled across timesteps this way).

mod adam;
mod check;
mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::{check_graph_gradients, GradCheckReport};
pub use checkpoint::{decode_params, encode_params};
pub use graph::{Gradients, Graph, NodeId, NodeOp, Trace};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor4;

use alloc::string::String;

/// Errors from tensor plumbing: mismatched shapes, bad parameter wiring,
/// non-finite gradients, malformed checkpoint bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NnError {
    /// A tensor had the wrong shape for the operation; the message names the
    /// offending graph node where one is involved.
    Shape(String),
    /// Parameter name not present in the store.
    UnknownParam(String),
    /// Parameter name registered twice.
    DuplicateParam(String),
    /// A gradient went NaN or infinite; the message names the parameter.
    NonFiniteGradient(String),
    /// Checkpoint bytes failed validation.
    Checkpoint(String),
}

impl core::fmt::Display for NnError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            NnError::Shape(m) => write!(f, "shape mismatch: {m}"),
            NnError::UnknownParam(n) => write!(f, "unknown parameter '{n}'"),
            NnError::DuplicateParam(n) => write!(f, "parameter '{n}' registered twice"),
            NnError::NonFiniteGradient(n) => write!(f, "non-finite gradient for '{n}'"),
            NnError::Checkpoint(m) => write!(f, "bad checkpoint: {m}"),
        }
    }
}

impl core::error::Error for NnError {}
