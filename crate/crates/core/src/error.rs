use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("graph has {requested} vertices, exceeding the configured cap of {cap}")]
    VertexCap { requested: usize, cap: usize },

    #[error("degenerate lattice generators (|det| = {det:e})")]
    DegenerateLattice { det: f64 },

    #[error("current violates Kirchhoff's node law at {count} vertices (first: vertex {first})")]
    Kirchhoff { count: usize, first: usize },

    #[error("{what} is undefined for a current with empty support")]
    EmptySupport { what: &'static str },

    #[error(
        "combinatorial budget exceeded: {what} (visited more than {budget} candidates, estimated total {estimate:e})"
    )]
    Budget { what: String, budget: u64, estimate: f64 },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("field has nonzero mean {mean:e} (relative to scale {scale:e}); zero mode required")]
    NonzeroMean { mean: f64, scale: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("box-fit violation: edge {edge} (plus form-function radius) is closer than {margin} to the box boundary")]
    BoxFit { edge: usize, margin: f64 },

    #[error("integrability defect {defect:e} exceeds tolerance {tol:e}")]
    Integrability { defect: f64, tol: f64 },

    #[error("Ursell function requested for n = {0} polymers; the exhaustive cap is 6")]
    UrsellCap(usize),

    #[error("covariance is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("quadrature did not converge: estimated error {error:e} > tolerance {tol:e}")]
    Quadrature { error: f64, tol: f64 },

    #[error("sample point at |x| = {norm} lies inside the excluded radius {radius}")]
    SampleInside { norm: f64, radius: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
