//! Small dense numeric core: 2-D tensors, a reverse-mode tape and Adam.

mod adam;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, GroupRates};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tape::{Axis, Gradients, Tape, Var, NORM_EPS};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("vector norm below the numeric guard")]
    NearZeroNorm,
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("contract violated: {0}")]
    Contract(String),
}

/// Cosine similarity of two plain vectors, guarded like [`Tape::cosine`].
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<f64, NumError> {
    if a.len() != b.len() {
        return Err(NumError::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = kernels::sum_sq(a).sqrt();
    let nb = kernels::sum_sq(b).sqrt();
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(NumError::NearZeroNorm);
    }
    Ok((kernels::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
