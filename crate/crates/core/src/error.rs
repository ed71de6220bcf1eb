use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for model loading, bound propagation, and certification.
#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer}: {detail}")]
    DimensionMismatch { layer: usize, detail: String },

    #[error("layer {layer}: unknown activation {name:?} (expected relu|tanh|sigmoid|arctan|identity)")]
    UnknownActivation { layer: usize, name: String },

    #[error("parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("argmax at x0 is not strict: classes {a} and {b} share the maximum logit {logit}")]
    TiedArgmax { a: usize, b: usize, logit: f64 },

    #[error("invalid pre-activation interval: lower {lower} .. upper {upper}")]
    InvalidInterval { lower: f64, upper: f64 },

    #[error("bound propagation produced a non-finite value at layer {layer}, neuron {neuron}")]
    NonFiniteBound { layer: usize, neuron: usize },

    #[error("covariance is not symmetric positive semidefinite (minimum eigenvalue {min_eigenvalue})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("covariance violates the 3-sigma rule at coordinate {coordinate}: sqrt(Sigma_ii) = {sigma} exceeds epsilon/3 = {limit}; shrink the variance so 99.7% of the mass stays inside the ball")]
    ThreeSigmaViolation {
        coordinate: usize,
        sigma: f64,
        limit: f64,
    },

    #[error("convolution grid too coarse: weight at coordinate {coordinate} spans {cells:.3} cells (need >= 2); increase grid points or use the hoeffding method")]
    ResolutionTooCoarse { coordinate: usize, cells: f64 },

    #[error("sandwich thresholds differ: lower certificate at a = {a_lower}, upper at a = {a_upper}")]
    ThresholdMismatch { a_lower: f64, a_upper: f64 },

    #[error("invalid sandwich: gamma_L = {gamma_lower} exceeds gamma_U = {gamma_upper}")]
    SandwichViolation { gamma_lower: f64, gamma_upper: f64 },

    #[error("input dimension {dim} exceeds the exhaustive-grid limit of {max}")]
    DimensionTooLarge { dim: usize, max: usize },

    #[error("no attack targets: the target set is empty")]
    EmptyTargets,

    #[error("norm conversion only supports l1 and l2 targets, got {requested}")]
    UnsupportedNorm { requested: String },

    #[error("certificate method {method} is incompatible with {noise} noise")]
    NoiseMismatch { method: String, noise: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
