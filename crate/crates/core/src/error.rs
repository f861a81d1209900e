//! Error type shared across the core simulation modules.

use thiserror::Error;

/// Everything that can go wrong while building baths, Hamiltonians, or
/// coherence curves. The CLI maps these onto exit codes; library users can
/// match on the variants.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A crystal definition document failed validation.
    #[error("crystal definition error: {0}")]
    CrystalDefinition(String),

    /// A crystal definition document could not be parsed at all.
    #[error("crystal definition parse error: {0}")]
    CrystalParse(String),

    /// Geometry preconditions violated (coincident sites, zero separation, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Hamiltonian construction preconditions violated (oversize cluster, ...).
    #[error("hamiltonian error: {0}")]
    Hamiltonian(String),

    /// Pulse-sequence descriptor is inconsistent (e.g. FID with pulses).
    #[error("pulse sequence error: {0}")]
    Sequence(String),

    /// An operator input failed a density-matrix or Hermiticity check.
    #[error("operator input error: {0}")]
    OperatorInput(String),

    /// A bath is too large for exact brute-force evaluation.
    #[error("bath of {n} spins exceeds the exact-evaluation limit of {max}")]
    BathTooLarge { n: usize, max: usize },

    /// Grids of two curves do not match where they must.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// An analysis routine received input it cannot process.
    #[error("analysis input error: {0}")]
    AnalysisInput(String),
}

/// Convenient alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
