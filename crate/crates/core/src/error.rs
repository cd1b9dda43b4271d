//! Error vocabulary shared by all solver modules.

use thiserror::Error;

/// Machine-readable error codes; these are what the CLI surfaces as JSON.
#[derive(Debug, Error)]
pub enum Error {
    /// The grid parameters do not define a valid lattice (`λΔt ≥ 1`, `K < 1`, ...).
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// Exhaustive enumeration was requested above the configured size limit.
    #[error("oracle enumeration too large: num_steps={num_steps} exceeds limit {limit}")]
    OracleTooLarge { num_steps: usize, limit: usize },

    /// The implicit one-step solve has no contraction: `K_f·Δt ≥ 1`.
    #[error("no contraction: lipschitz {lipschitz} * dt {dt} >= 1")]
    NoContraction { lipschitz: f64, dt: f64 },

    /// Picard iteration failed to meet tolerance within the iteration cap.
    #[error("one-step fixed point did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },

    /// A conditional expectation `E^f_{σ,τ}` was requested with `σ ≤ τ` failing on some path.
    #[error("bad ordering of stopping rules: {0}")]
    BadOrdering(String),

    /// Mertens decomposition was requested for a process that is not a strong
    /// `E^f`-supermartingale at the stated tolerance.
    #[error("input is not a strong supermartingale: violation {violation:.3e} exceeds {tolerance:.1e}")]
    NotSupermartingale { violation: f64, tolerance: f64 },

    /// A regularity precondition (r.u.s.c. flag or the discrete l.u.s.c.
    /// surrogate) failed.
    #[error("precondition failed: {0}")]
    PreconditionFailed(String),

    /// The optimality identity `E^f_{S,τ}(ξ_τ) = Y_S` failed for a rule the
    /// theory guarantees optimal; indicates a solver defect.
    #[error("optimal rule verification failed: gap {gap:.3e} exceeds {tolerance:.1e}")]
    NotOptimal { gap: f64, tolerance: f64 },

    /// An asset lattice branch factor went non-positive.
    #[error("asset positivity violated for asset {asset} on branch {branch}: factor {factor}")]
    PositivityViolated { asset: usize, branch: usize, factor: f64 },

    /// A market driver failed the jump-monotonicity check.
    #[error("driver monotonicity failed: min slope {min_slope} at sample (t={t}, y={y}, z={z}, k1={kappa1}, k2={kappa2})")]
    MonotonicityFailed { min_slope: f64, t: f64, y: f64, z: f64, kappa1: f64, kappa2: f64 },

    /// The `(β, η)` pair violates the a-priori estimate constraints.
    #[error("bad constants: {0}")]
    BadConstants(String),

    /// A named verification suite does not exist.
    #[error("unknown check: {0}")]
    UnknownCheck(String),

    /// Malformed expression, node table, or other input payload.
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    /// Stable machine-readable code for reports and the CLI error channel.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "GRID_INVALID",
            Error::OracleTooLarge { .. } => "ORACLE_TOO_LARGE",
            Error::NoContraction { .. } => "NO_CONTRACTION",
            Error::NonConvergence { .. } => "NON_CONVERGENCE",
            Error::BadOrdering(_) => "BAD_ORDERING",
            Error::NotSupermartingale { .. } => "NOT_SUPERMARTINGALE",
            Error::PreconditionFailed(_) => "PRECONDITION_FAILED",
            Error::NotOptimal { .. } => "NOT_OPTIMAL",
            Error::PositivityViolated { .. } => "POSITIVITY_VIOLATED",
            Error::MonotonicityFailed { .. } => "MONOTONICITY_FAILED",
            Error::BadConstants(_) => "BAD_CONSTANTS",
            Error::UnknownCheck(_) => "UNKNOWN_CHECK",
            Error::InvalidInput(_) => "INVALID_INPUT",
        }
    }

    /// Whether the error is an input-validation failure (CLI exit code 2)
    /// rather than a numerical failure (exit code 1).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidGrid(_)
                | Error::OracleTooLarge { .. }
                | Error::NoContraction { .. }
                | Error::BadOrdering(_)
                | Error::BadConstants(_)
                | Error::UnknownCheck(_)
                | Error::InvalidInput(_)
                | Error::PreconditionFailed(_)
        )
    }
}
