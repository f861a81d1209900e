//! Simulation core for central-electron-spin decoherence in a nuclear spin bath.
//!
//! A single electron spin (an anisotropic-g Kramers doublet, e.g. Ce³⁺
//! substituting yttrium in Y₂SiO₅) dephases through dipolar coupling to the
//! surrounding lattice of nuclear spins (¹⁰⁰%-abundant ⁸⁹Y, dilute ²⁹Si). This
//! crate builds that problem end to end:
//!
//! - [`lattice`] — crystal definition, finite supercell generation, stochastic
//!   isotope placement, geometric queries.
//! - [`hamiltonian`] — electron Zeeman, nuclear Zeeman, hyperfine vectors,
//!   intra-bath dipolar tensors, and the conditional cluster Hamiltonians H±.
//! - [`cce`] — cluster enumeration and the cluster-correlation expansion of the
//!   echo coherence, with exact small-bath references.
//! - [`dynamics`] — pulse sequences (FID, Hahn echo, CPMG-N), coherence
//!   evaluation, and a Lindblad dephasing/relaxation channel on a chosen
//!   nucleus.
//! - [`analysis`] — FFT spectra, peak/dip finding, and least-squares decay
//!   fits.
//!
//! Unit conventions (enforced across public APIs): frequencies in kHz, times
//! in µs, distances in Å, magnetic fields in Tesla. All matrix elements are
//! ordinary frequencies; the single 2π conversion to angular phase lives in
//! [`constants::PHASE_PER_KHZ_US`].

pub mod analysis;
pub mod cce;
pub mod constants;
pub mod dynamics;
pub mod error;
pub mod hamiltonian;
pub mod lattice;
pub mod linalg;

pub use error::{CoreError, Result};
