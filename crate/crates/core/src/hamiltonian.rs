//! Hamiltonian ingredients for a central electron spin in a nuclear bath.
//!
//! The electron ground doublet is described by an anisotropic effective
//! g-tensor; an applied magnetic field splits it into |±⟩ branches. Because the
//! electron's Zeeman splitting (GHz) dwarfs every nuclear energy scale (kHz),
//! the electron never flips during free evolution: the bath evolves under one of
//! two *conditional* Hamiltonians H± in which each nucleus sees the nuclear
//! Zeeman interaction, the intra-bath dipolar couplings, and ± half its
//! hyperfine field from the electron.
//!
//! Unit discipline: public frequencies are in kHz, distances in Å, fields in
//! Tesla, g dimensionless. (Two documented exceptions, both inherited from the
//! natural scales of the quantities: [`electron_zeeman`] returns kHz but its
//! magnitude is GHz-scale, and [`BathCoupling`] exposes its tensor in Hz
//! because intra-bath couplings are Hz-scale.) Matrix elements are ordinary
//! frequencies (ν, not ω): the single 2π → angular conversion happens in the
//! propagator phase factor, nowhere else.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;

use crate::constants::{ELECTRON_NUCLEAR_KHZ, MU_B_OVER_H_GHZ_PER_T, NUCLEAR_PAIR_KHZ};
use crate::error::{CoreError, Result};
use crate::lattice::{BathSpin, SpinSpecies};
use crate::linalg::{embed, pauli_matrices, CMat};

/// Largest cluster size accepted by [`conditional_hamiltonians`] unless the
/// caller raises the cap explicitly.
pub const DEFAULT_MAX_CLUSTER: usize = 4;

/// Distance below which point-dipole formulas are refused (contact regime).
pub const MIN_DIPOLE_DISTANCE_ANGSTROM: f64 = 0.5;

/// The 3×3 effective g-tensor of the electron doublet (dimensionless).
#[derive(Debug, Clone, PartialEq)]
pub struct GTensor {
    pub matrix: Matrix3<f64>,
}

impl GTensor {
    /// Validated constructor: entries must be finite.
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        if !matrix.iter().all(|x| x.is_finite()) {
            return Err(CoreError::Hamiltonian(
                "g-tensor entries must be finite".into(),
            ));
        }
        Ok(Self { matrix })
    }

    /// Isotropic tensor g·𝟙.
    pub fn isotropic(g: f64) -> Self {
        Self {
            matrix: Matrix3::from_diagonal_element(g),
        }
    }

    /// The effective g-tensor of the Ce³⁺ ground doublet at the 7-coordinated
    /// yttrium substitution site of Y₂SiO₅ (symmetric, in the lab frame used
    /// throughout this crate).
    pub fn cerium_ground_doublet() -> Self {
        Self {
            matrix: Matrix3::new(
                0.6514, 0.2629, 0.3004, //
                0.2629, 0.6799, -0.0858, //
                0.3004, -0.0858, 0.9098,
            ),
        }
    }
}

/// Static magnetic field: magnitude in Tesla plus a unit direction vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MagneticField {
    pub magnitude_t: f64,
    pub direction: Vector3<f64>,
}

impl MagneticField {
    /// Validated constructor: `|direction| = 1` within 1e-12, magnitude ≥ 0.
    pub fn new(magnitude_t: f64, direction: Vector3<f64>) -> Result<Self> {
        if !(magnitude_t.is_finite() && magnitude_t >= 0.0) {
            return Err(CoreError::Hamiltonian(format!(
                "field magnitude must be finite and ≥ 0, got {magnitude_t}"
            )));
        }
        if (direction.norm() - 1.0).abs() > 1e-12 {
            return Err(CoreError::Hamiltonian(format!(
                "field direction must be a unit vector, |n| = {}",
                direction.norm()
            )));
        }
        Ok(Self {
            magnitude_t,
            direction,
        })
    }

    /// Field of the given magnitude along +z.
    pub fn along_z(magnitude_t: f64) -> Self {
        Self {
            magnitude_t,
            direction: Vector3::new(0.0, 0.0, 1.0),
        }
    }
}

/// The hyperfine coupling of one nucleus: the 3-vector A⃗ᵢ (kHz) multiplying Iᵢ
/// in the conditional Hamiltonians H± = H_bath ± ½ Σᵢ A⃗ᵢ·Iᵢ.
///
/// Values are ordinary frequencies (cycles, not radians); the 2π enters only in
/// the propagator.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperfineVector {
    pub spin_index: usize,
    pub vector_khz: Vector3<f64>,
}

impl HyperfineVector {
    pub fn magnitude_khz(&self) -> f64 {
        self.vector_khz.norm()
    }
}

/// The dipolar coupling tensor between two bath nuclei, in Hz (these couplings
/// are Hz-scale; all other public frequencies in this crate are kHz).
#[derive(Debug, Clone, PartialEq)]
pub struct BathCoupling {
    pub pair: (usize, usize),
    pub tensor_hz: Matrix3<f64>,
}

/// The traceless dipolar geometry factor 3n̂n̂ᵀ − 𝟙 for a unit separation
/// direction n̂.
fn dipolar_geometry(n: &Vector3<f64>) -> Matrix3<f64> {
    3.0 * n * n.transpose() - Matrix3::identity()
}

/// Electron Zeeman operator H = (μ_B/h) B·g·S as a 2×2 Hermitian matrix in kHz
/// (S = σ/2). Its splitting is GHz-scale; it sets the electron quantization
/// axis and is otherwise diagnostic — bath dynamics never evolve under it.
pub fn electron_zeeman(g: &GTensor, b: &MagneticField) -> CMat {
    // w = gᵀ(B n̂) is the effective field seen by the spin, in kHz.
    let w = g.matrix.transpose() * (b.direction * b.magnitude_t)
        * (MU_B_OVER_H_GHZ_PER_T * 1e6);
    let [sx, sy, sz] = pauli_matrices();
    (sx * Complex64::new(w.x, 0.0) + sy * Complex64::new(w.y, 0.0) + sz * Complex64::new(w.z, 0.0))
        * Complex64::new(0.5, 0.0)
}

/// Effective g-factor along a unit direction: g_eff(n̂) = √(n̂ᵀ g gᵀ n̂) = |gᵀn̂|.
/// The electron splitting is μ_B·B·g_eff/h.
pub fn effective_g_along(g: &GTensor, n: &Vector3<f64>) -> Result<f64> {
    if (n.norm() - 1.0).abs() > 1e-12 {
        return Err(CoreError::Hamiltonian(format!(
            "direction must be a unit vector, |n| = {}",
            n.norm()
        )));
    }
    Ok((g.matrix.transpose() * n).norm())
}

/// Nuclear Larmor frequency γᵢ·B in kHz, sign preserved (γ is signed).
pub fn nuclear_larmor(species: &SpinSpecies, b: &MagneticField) -> f64 {
    species.gamma_mhz_per_t * b.magnitude_t * 1e3
}

/// The electron-spin expectation direction in the |±⟩ branches: the unit vector
/// along gᵀn̂_B. For isotropic g this is the field direction itself; the
/// anisotropy tilts it.
fn electron_expectation_direction(g: &GTensor, b: &MagneticField) -> Result<Vector3<f64>> {
    let m = g.matrix.transpose() * b.direction;
    let norm = m.norm();
    if norm < 1e-14 {
        return Err(CoreError::Hamiltonian(
            "g-tensor annihilates the field direction; electron quantization axis undefined"
                .into(),
        ));
    }
    Ok(m / norm)
}

/// Hyperfine coupling vector of one nucleus (kHz):
///
///   A⃗ᵢ = (μ_B μ₀ γᵢ / 4π rᵢ³ h) (3n̂ᵢn̂ᵢᵀ − 𝟙) gᵀ m̂,
///
/// where m̂ is the electron-spin expectation direction (unit vector along
/// gᵀn̂_B) and n̂ᵢ, rᵢ are the defect→nucleus geometry. The electron's full
/// g-anisotropy enters the moment; the nucleus keeps its full 3-vector coupling
/// (no secular truncation), which is what produces echo-envelope modulation.
///
/// Scales exactly as rᵢ⁻³; positions inside the contact regime (≤ 0.5 Å) are
/// refused.
pub fn hyperfine_vector(
    spin_index: usize,
    spin: &BathSpin,
    g: &GTensor,
    b: &MagneticField,
) -> Result<HyperfineVector> {
    let r = spin.position.norm();
    if r.is_nan() || r <= MIN_DIPOLE_DISTANCE_ANGSTROM {
        return Err(CoreError::Hamiltonian(format!(
            "nucleus at r = {r:.3} Å is inside the contact regime (≤ {MIN_DIPOLE_DISTANCE_ANGSTROM} Å)"
        )));
    }
    let n = spin.position / r;
    let m_hat = electron_expectation_direction(g, b)?;
    let prefactor = ELECTRON_NUCLEAR_KHZ * spin.species.gamma_mhz_per_t / r.powi(3);
    let vector_khz = dipolar_geometry(&n) * (g.matrix.transpose() * m_hat) * prefactor;
    Ok(HyperfineVector {
        spin_index,
        vector_khz,
    })
}

/// Dipolar coupling tensor between two bath nuclei (Hz):
///
///   Tᵢⱼ = (μ₀ γᵢ γⱼ ħ / 4π rᵢⱼ³) · ... → here as the full 3×3 matrix
///   multiplying Iᵢ·T·Iⱼ, symmetric and traceless, = bᵢⱼ (3n̂ᵢⱼn̂ᵢⱼᵀ − 𝟙).
pub fn bath_coupling(
    index_i: usize,
    spin_i: &BathSpin,
    index_j: usize,
    spin_j: &BathSpin,
) -> Result<BathCoupling> {
    if index_i == index_j {
        return Err(CoreError::Hamiltonian(format!(
            "bath coupling requires two distinct nuclei, got index {index_i} twice"
        )));
    }
    let d = spin_i.position - spin_j.position;
    let r = d.norm();
    if r.is_nan() || r <= MIN_DIPOLE_DISTANCE_ANGSTROM {
        return Err(CoreError::Hamiltonian(format!(
            "nuclei {index_i} and {index_j} are {r:.3} Å apart (contact regime)"
        )));
    }
    let n = d / r;
    let b_khz = NUCLEAR_PAIR_KHZ * spin_i.species.gamma_mhz_per_t * spin_j.species.gamma_mhz_per_t
        / r.powi(3);
    Ok(BathCoupling {
        pair: (index_i, index_j),
        tensor_hz: dipolar_geometry(&n) * (b_khz * 1e3),
    })
}

/// Embedded spin-1/2 vector operators (Iₓ, I_y, I_z) = σ/2 for spin `idx` of a
/// `k`-spin register.
fn spin_operators(k: usize, idx: usize) -> [CMat; 3] {
    let paulis = pauli_matrices();
    [
        embed(&(&paulis[0] * Complex64::new(0.5, 0.0)), k, idx),
        embed(&(&paulis[1] * Complex64::new(0.5, 0.0)), k, idx),
        embed(&(&paulis[2] * Complex64::new(0.5, 0.0)), k, idx),
    ]
}

/// Add `coeff · v⃗·I⃗` for spin `idx` to `h`.
fn add_vector_term(h: &mut CMat, ops: &[CMat; 3], v: &Vector3<f64>) {
    for (a, op) in ops.iter().enumerate() {
        let c = Complex64::new(v[a], 0.0);
        if v[a] != 0.0 {
            *h += op * c;
        }
    }
}

/// The two conditional bath Hamiltonians (H₊, H₋) of a cluster, in kHz:
///
///   H± = Σᵢ νᵢ n̂_B·I⃗ᵢ + Σᵢ<ⱼ I⃗ᵢ·Tᵢⱼ·I⃗ⱼ ± ½ Σᵢ A⃗ᵢ·I⃗ᵢ
///
/// with νᵢ the signed nuclear Larmor frequency, Tᵢⱼ the intra-cluster dipolar
/// tensors, and A⃗ᵢ the hyperfine vectors. Both are 2ᵏ×2ᵏ Hermitian; their
/// difference is exactly the full hyperfine contribution Σᵢ A⃗ᵢ·I⃗ᵢ.
///
/// The nuclear Zeeman term uses the bare applied field (the electron's
/// g-anisotropy does not dress the nuclear Larmor frequencies).
pub fn conditional_hamiltonians(
    cluster: &[BathSpin],
    g: &GTensor,
    b: &MagneticField,
    max_cluster: usize,
) -> Result<(CMat, CMat)> {
    conditional_hamiltonians_with(cluster, g, b, max_cluster, true)
}

/// [`conditional_hamiltonians`] with the intra-bath dipolar terms optionally
/// omitted. Disabling them models a strictly non-interacting bath, for which
/// the joint coherence factorizes exactly over single spins.
pub(crate) fn conditional_hamiltonians_with(
    cluster: &[BathSpin],
    g: &GTensor,
    b: &MagneticField,
    max_cluster: usize,
    include_pair_couplings: bool,
) -> Result<(CMat, CMat)> {
    let k = cluster.len();
    if k == 0 || k > max_cluster {
        return Err(CoreError::BathTooLarge {
            n: k,
            max: max_cluster,
        });
    }
    let dim = 1usize << k;
    let mut h_plus = CMat::zeros(dim, dim);
    let mut h_minus = CMat::zeros(dim, dim);

    let ops: Vec<[CMat; 3]> = (0..k).map(|i| spin_operators(k, i)).collect();

    for (i, spin) in cluster.iter().enumerate() {
        let larmor = nuclear_larmor(&spin.species, b) * b.direction;
        let a = hyperfine_vector(i, spin, g, b)?.vector_khz;
        add_vector_term(&mut h_plus, &ops[i], &(larmor + a / 2.0));
        add_vector_term(&mut h_minus, &ops[i], &(larmor - a / 2.0));
    }

    if include_pair_couplings {
        for i in 0..k {
            for j in (i + 1)..k {
                let t_khz = bath_coupling(i, &cluster[i], j, &cluster[j])?.tensor_hz * 1e-3;
                for a in 0..3 {
                    for c in 0..3 {
                        if t_khz[(a, c)] != 0.0 {
                            let term =
                                (&ops[i][a] * &ops[j][c]) * Complex64::new(t_khz[(a, c)], 0.0);
                            h_plus += &term;
                            h_minus += term;
                        }
                    }
                }
            }
        }
    }

    Ok((h_plus, h_minus))
}
