use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("fractures {first} and {second} are collinear and overlap")]
    OverlappingFractures { first: usize, second: usize },

    #[error("point ({x}, {y}) lies at a Dirichlet/Neumann junction of the boundary")]
    AmbiguousBoundaryPoint { x: f64, y: f64 },

    #[error("invalid fracture: {0}")]
    InvalidFracture(String),

    #[error("invalid domain boundary: {0}")]
    InvalidBoundary(String),

    #[error("mesh is not fitted to fracture {fracture}: gap near ({x}, {y})")]
    NotFitted { fracture: usize, x: f64, y: f64 },

    #[error("cut produces a degenerate triangle of area {area:e} in cell {cell}")]
    DegenerateCut { cell: usize, area: f64 },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("permeability tensor of cell {cell} is not symmetric positive definite")]
    SingularTensor { cell: usize },

    #[error("no Dirichlet boundary: the flow problem is not well posed")]
    NoDirichlet,

    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotSpd { row: usize, pivot: f64 },

    #[error("iterative solver did not converge in {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("matrix is singular (no acceptable pivot in column {column})")]
    Singular { column: usize },

    #[error("singular transport system: {0}")]
    SingularTransportSystem(String),

    #[error("invalid transport problem: {0}")]
    InvalidTransport(String),

    #[error("invalid flow problem: {0}")]
    InvalidProblem(String),

    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),

    #[error("benchmark geometry file {0} is missing")]
    MissingGeometryFile(PathBuf),

    #[error("point ({x}, {y}) is outside the domain")]
    PointOutsideDomain { x: f64, y: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
