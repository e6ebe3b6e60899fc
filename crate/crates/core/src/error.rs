use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("incompatible grids: scale {0} vs scale {1}")]
    IncompatibleGrids(u32, u32),

    #[error("point {0:?} is not a lattice point of the base grid after rescaling by {1}")]
    OffLattice(Vec<f64>, f64),

    #[error("empty window")]
    EmptyWindow,

    #[error("window of {sites} sites and {nonzeros} nonzeros exceeds the memory budget of {budget} nonzeros")]
    WindowTooLarge {
        sites: usize,
        nonzeros: usize,
        budget: usize,
    },

    #[error("window too small: {what} = {value:.3e} exceeds tolerance {tol:.3e}; enlarge the window")]
    WindowTooSmall { what: String, value: f64, tol: f64 },

    #[error("linear solve did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("oracle invalid for variable c")]
    OracleInvalid,

    #[error("query point {0:?} lies outside the cells covered by the grid function")]
    OutsideGrid(Vec<f64>),

    #[error("monte carlo censoring rate {rate:.4} exceeds {limit}; horizon too short")]
    Censoring { rate: f64, limit: f64 },

    #[error("quadrature failure: {0}")]
    Quadrature(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
