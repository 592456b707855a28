//! Dense linear algebra and probability primitives shared by every other
//! module: the batch least-squares solver, Moore-Penrose pseudo-inverse,
//! cosine-similarity distributions, KL/TV divergences, and rank-one inverse
//! updates.

mod matrix;
mod prob;
mod solve;

pub use matrix::DenseMatrix;
pub use prob::{
    cosine, dot, kl_divergence, norm2, normalize_similarities, pairwise_cosine, tv_distance,
    ProbVector, SimilaritySet,
};
pub use solve::{pseudo_inverse, solve_update, sym_eigen, woodbury_update};

use core::fmt;

/// Contract and numerical failures raised by this module.
#[derive(Clone, Debug, PartialEq)]
pub enum NumericsError {
    /// Shapes do not agree for the requested operation.
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    /// A matrix entry was NaN or infinite at construction.
    NonFinite { index: usize },
    /// The entry count does not match rows * cols.
    BadLength { expected: usize, actual: usize },
    /// A non-square matrix was passed where a square one is required.
    NonSquare { rows: usize, cols: usize },
    /// A column that must be nonzero has zero norm.
    ZeroColumn { col: usize },
    /// A similarity set contained its own anchor or an out-of-range cosine.
    BadSimilarity { index: usize },
    /// An empty set where at least one element is required.
    EmptyInput { context: &'static str },
    /// A scalar parameter violated its precondition.
    BadParameter { context: &'static str },
    /// Factorization failed and no ridge was supplied; retry with ridge > 0.
    FactorizationFailed,
    /// Rank-one update denominator fell below tolerance.
    SingularUpdate { denominator: f64 },
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::DimensionMismatch {
                context,
                expected,
                actual,
            } => write!(
                f,
                "dimension mismatch in {context}: expected {expected}, got {actual}"
            ),
            NumericsError::NonFinite { index } => {
                write!(f, "non-finite entry at flat index {index}")
            }
            NumericsError::BadLength { expected, actual } => {
                write!(f, "entry count {actual} does not match rows*cols {expected}")
            }
            NumericsError::NonSquare { rows, cols } => {
                write!(f, "matrix must be square, got {rows}x{cols}")
            }
            NumericsError::ZeroColumn { col } => {
                write!(f, "column {col} has zero norm")
            }
            NumericsError::BadSimilarity { index } => {
                write!(f, "invalid similarity entry at position {index}")
            }
            NumericsError::EmptyInput { context } => write!(f, "empty input: {context}"),
            NumericsError::BadParameter { context } => {
                write!(f, "parameter out of range: {context}")
            }
            NumericsError::FactorizationFailed => write!(
                f,
                "normal-equation factorization failed with ridge = 0; retry with a larger ridge"
            ),
            NumericsError::SingularUpdate { denominator } => {
                write!(f, "rank-one update denominator {denominator} below tolerance")
            }
        }
    }
}
