use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("tensors of rank > 2 are not supported (shape {0:?})")]
    Rank(Vec<usize>),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: input outside the domain ({value})")]
    Domain { op: &'static str, value: f64 },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("top-k: k = {k} exceeds length {len}")]
    TopK { k: usize, len: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
