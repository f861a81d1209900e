//! Pulse sequences, open-system propagation, and readout.
//!
//! Free evolution of the bath is conditioned on the electron branch: a π pulse
//! on the electron is instantaneous and simply swaps which conditional
//! Hamiltonian (H₊ or H₋) the nuclei see. A CPMG-N sequence with pulse interval
//! τ therefore becomes the segment string (τ, 2τ, …, 2τ, τ) with alternating
//! branch signs, and a free-induction decay is the single segment (τ).
//!
//! A phenomenological Lindblad channel models relaxation (γ₁) and dephasing
//! (γ₂) of one designated nucleus — e.g. a proximal ²⁹Si whose environment is
//! noisier than the coherent model accounts for:
//!
//!   ρ̇ = −i·2π·10⁻³ [H, ρ] + γ₂(σ_z ρ σ_z − ρ) + ½γ₁(σ_x ρ σ_x − ρ)
//!                                              + ½γ₁(σ_y ρ σ_y − ρ)
//!
//! with H in kHz, t in µs, and rates in kHz converted by the factor 10⁻³ (a
//! rate, not a frequency: no 2π). The channel acts only during free evolution;
//! pulses are ideal.

use num_complex::Complex64;

use crate::cce::{ClusterCoherence, CoherenceCurve};
use crate::constants::{PHASE_PER_KHZ_US, RATE_KHZ_TO_PER_US};
use crate::error::{CoreError, Result};
use crate::hamiltonian::{conditional_hamiltonians, GTensor, MagneticField};
use crate::lattice::BathSpin;
use crate::linalg::{embed, expm, eye, kron, pauli_matrices, CMat};

/// Sequence families supported by the coherence evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceKind {
    /// Free induction decay: no refocusing pulse, total time τ.
    Fid,
    /// Hahn echo: one π pulse, identical to CPMG-1.
    Hahn,
    /// CPMG-N: N π pulses at intervals τ, 2τ, …, 2τ, τ; total time 2Nτ.
    Cpmg,
}

/// Phase of the final readout π/2 pulse; the balanced readout measures both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReadoutPhase {
    #[default]
    HalfPi,
    ThreeHalfPi,
}

/// A validated pulse-sequence descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseSequence {
    pub kind: SequenceKind,
    /// Number of π pulses (0 for FID, 1 for Hahn, N for CPMG-N).
    pub n_pulses: usize,
    /// Pulse interval τ in µs.
    pub tau_us: f64,
    pub readout_phase: ReadoutPhase,
}

/// Build a validated sequence descriptor. FID requires N = 0, Hahn N = 1,
/// CPMG N ≥ 1.
pub fn make_sequence(kind: SequenceKind, n_pulses: usize, tau_us: f64) -> Result<PulseSequence> {
    if !(tau_us.is_finite() && tau_us >= 0.0) {
        return Err(CoreError::Sequence(format!(
            "pulse interval must be finite and ≥ 0, got {tau_us}"
        )));
    }
    let valid = match kind {
        SequenceKind::Fid => n_pulses == 0,
        SequenceKind::Hahn => n_pulses == 1,
        SequenceKind::Cpmg => n_pulses >= 1,
    };
    if !valid {
        return Err(CoreError::Sequence(format!(
            "{kind:?} is inconsistent with N = {n_pulses} pulses"
        )));
    }
    Ok(PulseSequence {
        kind,
        n_pulses,
        tau_us,
        readout_phase: ReadoutPhase::default(),
    })
}

impl PulseSequence {
    /// Free-evolution segment durations in µs: (τ) for FID, (τ, 2τ, …, 2τ, τ)
    /// for N ≥ 1. The conditional branch sign alternates from segment to
    /// segment (each π pulse swaps H₊ ↔ H₋).
    pub fn free_segments(&self) -> Vec<f64> {
        self.free_segments_for(self.tau_us)
    }

    /// Segment durations for an arbitrary pulse interval (used when scanning τ
    /// with one descriptor).
    pub fn free_segments_for(&self, tau_us: f64) -> Vec<f64> {
        match self.n_pulses {
            0 => vec![tau_us],
            n => {
                let mut segs = Vec::with_capacity(n + 1);
                segs.push(tau_us);
                segs.extend(std::iter::repeat(2.0 * tau_us).take(n - 1));
                segs.push(tau_us);
                segs
            }
        }
    }

    /// Total evolution time in µs: τ for FID, 2Nτ otherwise.
    pub fn total_time(&self) -> f64 {
        self.total_time_for(self.tau_us)
    }

    /// Total evolution time for an arbitrary pulse interval.
    pub fn total_time_for(&self, tau_us: f64) -> f64 {
        if self.n_pulses == 0 {
            tau_us
        } else {
            2.0 * self.n_pulses as f64 * tau_us
        }
    }
}

/// Center frequency of the sequence's noise filter, in kHz: f = 1/(2τ).
/// A CPMG train is most sensitive to single-nucleus precession when this
/// matches the nuclear Larmor frequency.
pub fn filter_center_frequency(seq: &PulseSequence) -> Result<f64> {
    if seq.n_pulses == 0 {
        return Err(CoreError::Sequence(
            "a free-induction sequence has no pulse-train filter frequency".into(),
        ));
    }
    if seq.tau_us <= 0.0 {
        return Err(CoreError::Sequence(
            "filter frequency requires a positive pulse interval".into(),
        ));
    }
    Ok(1e3 / (2.0 * seq.tau_us))
}

// ---------------------------------------------------------------------------
// Lindblad channel
// ---------------------------------------------------------------------------

/// Relaxation/dephasing rates (kHz) applied to one designated nucleus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LindbladParams {
    /// Relaxation rate γ₁ in kHz.
    pub gamma1_khz: f64,
    /// Dephasing rate γ₂ in kHz.
    pub gamma2_khz: f64,
    /// Which spin the channel acts on. For [`lindblad_propagate`] this indexes
    /// the qubit register of ρ; for [`noisy_cluster_coherence`] it is the bath
    /// spin index that must be a member of the cluster.
    pub target_spin_index: usize,
}

impl LindbladParams {
    pub fn new(gamma1_khz: f64, gamma2_khz: f64, target_spin_index: usize) -> Result<Self> {
        if !(gamma1_khz.is_finite() && gamma1_khz >= 0.0)
            || !(gamma2_khz.is_finite() && gamma2_khz >= 0.0)
        {
            return Err(CoreError::OperatorInput(format!(
                "Lindblad rates must be finite and ≥ 0, got γ₁ = {gamma1_khz}, γ₂ = {gamma2_khz}"
            )));
        }
        Ok(Self {
            gamma1_khz,
            gamma2_khz,
            target_spin_index,
        })
    }
}

/// Integration backend for the Lindblad master equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LindbladIntegrator {
    /// Matrix exponential of the vectorized generator for registers of ≤ 2
    /// spins, fixed-step RK4 above.
    #[default]
    Auto,
    MatrixExponential,
    FixedStepRk4,
}

/// Vectorized generator M such that d vec(X)/dt = M vec(X) for
/// Ẋ = −i·2π·10⁻³ (H_L X − X H_R) + channel(X). Column-stacking convention
/// (matching nalgebra's column-major storage): vec(A X B) = (Bᵀ ⊗ A) vec(X).
fn lindblad_generator(
    h_left: &CMat,
    h_right: &CMat,
    params: &LindbladParams,
    register_size: usize,
    target: usize,
) -> CMat {
    let d = 1usize << register_size;
    debug_assert_eq!(h_left.nrows(), d);
    let id = eye(d);
    let phase = Complex64::new(0.0, -PHASE_PER_KHZ_US);
    let mut m = kron(&id, h_left) * phase - kron(&h_right.transpose(), &id) * phase;

    let paulis = pauli_matrices();
    let channels = [
        (params.gamma2_khz, &paulis[2]),
        (params.gamma1_khz / 2.0, &paulis[0]),
        (params.gamma1_khz / 2.0, &paulis[1]),
    ];
    let id2 = eye(d * d);
    for (rate_khz, s) in channels {
        if rate_khz == 0.0 {
            continue;
        }
        let rate = Complex64::new(rate_khz * RATE_KHZ_TO_PER_US, 0.0);
        let s_full = embed(s, register_size, target);
        m += (kron(&s_full.transpose(), &s_full) - &id2) * rate;
    }
    m
}

/// Largest dynamical rate (µs⁻¹) of the generator inputs, used to choose the
/// RK4 step: coherent precession at 2π·10⁻³·‖H‖ plus the channel rates.
fn dynamical_rate_scale(h_left: &CMat, h_right: &CMat, params: &LindbladParams) -> f64 {
    let coherent = PHASE_PER_KHZ_US * h_left.norm().max(h_right.norm());
    let dissipative =
        RATE_KHZ_TO_PER_US * params.gamma1_khz.max(params.gamma2_khz);
    coherent.max(dissipative)
}

fn rk4_evolve(m: &CMat, x0: &CMat, t_us: f64, rate_scale: f64) -> CMat {
    let n_steps = ((t_us * rate_scale * 50.0).ceil() as usize).max(1);
    let h = Complex64::new(t_us / n_steps as f64, 0.0);
    let d = x0.nrows();
    let mut v = crate::linalg::CVec::from_column_slice(x0.as_slice());
    let two = Complex64::new(2.0, 0.0);
    let six = Complex64::new(6.0, 0.0);
    for _ in 0..n_steps {
        let k1 = m * &v;
        let k2 = m * (&v + &k1 * (h / two));
        let k3 = m * (&v + &k2 * (h / two));
        let k4 = m * (&v + &k3 * h);
        v += (k1 + k2 * two + k3 * two + k4) * (h / six);
    }
    CMat::from_column_slice(d, d, v.as_slice())
}

fn evolve_block(
    m: &CMat,
    x0: &CMat,
    t_us: f64,
    rate_scale: f64,
    integrator: LindbladIntegrator,
    register_size: usize,
) -> CMat {
    let use_expm = match integrator {
        LindbladIntegrator::Auto => register_size <= 2,
        LindbladIntegrator::MatrixExponential => true,
        LindbladIntegrator::FixedStepRk4 => false,
    };
    if use_expm {
        let d = x0.nrows();
        let propagator = expm(&(m * Complex64::new(t_us, 0.0)));
        let v = propagator * crate::linalg::CVec::from_column_slice(x0.as_slice());
        CMat::from_column_slice(d, d, v.as_slice())
    } else {
        rk4_evolve(m, x0, t_us, rate_scale)
    }
}

fn validate_density(rho: &CMat) -> Result<usize> {
    let d = rho.nrows();
    if d == 0 || rho.ncols() != d || (d & (d - 1)) != 0 {
        return Err(CoreError::OperatorInput(format!(
            "density operator must be square with power-of-two dimension, got {d}×{}",
            rho.ncols()
        )));
    }
    let scale = rho.norm().max(1.0);
    if crate::linalg::hermiticity_defect(rho) > 1e-9 * scale {
        return Err(CoreError::OperatorInput(
            "density operator is not Hermitian within 1e-9".into(),
        ));
    }
    let trace = rho.trace();
    if (trace - Complex64::new(1.0, 0.0)).norm() > 1e-9 {
        return Err(CoreError::OperatorInput(format!(
            "density operator trace {trace} differs from 1 by more than 1e-9"
        )));
    }
    let eig = crate::linalg::eigh(rho);
    if eig.values[0] < -1e-9 {
        return Err(CoreError::OperatorInput(format!(
            "density operator has negative eigenvalue {:.3e}",
            eig.values[0]
        )));
    }
    Ok(d.trailing_zeros() as usize)
}

/// Evolve a density operator for `t_us` µs under a constant Hamiltonian (kHz)
/// plus the Lindblad channel on the target spin of the register.
///
/// Preserves trace and Hermiticity within 1e-9 and positivity within −1e-8;
/// with both rates zero it reduces to unitary conjugation.
pub fn lindblad_propagate(
    rho: &CMat,
    h: &CMat,
    params: &LindbladParams,
    t_us: f64,
) -> Result<CMat> {
    lindblad_propagate_with(rho, h, params, t_us, LindbladIntegrator::Auto)
}

/// [`lindblad_propagate`] with an explicit integrator choice (the two backends
/// agree within 1e-6; exposed for convergence checks and benchmarks).
pub fn lindblad_propagate_with(
    rho: &CMat,
    h: &CMat,
    params: &LindbladParams,
    t_us: f64,
    integrator: LindbladIntegrator,
) -> Result<CMat> {
    if !(t_us.is_finite() && t_us >= 0.0) {
        return Err(CoreError::OperatorInput(format!(
            "evolution time must be finite and ≥ 0, got {t_us}"
        )));
    }
    let k = validate_density(rho)?;
    if h.nrows() != rho.nrows() || h.ncols() != rho.ncols() {
        return Err(CoreError::OperatorInput(format!(
            "Hamiltonian shape {}×{} does not match density operator {}×{}",
            h.nrows(),
            h.ncols(),
            rho.nrows(),
            rho.ncols()
        )));
    }
    if params.target_spin_index >= k {
        return Err(CoreError::OperatorInput(format!(
            "target spin {} outside register of {} spins",
            params.target_spin_index, k
        )));
    }
    let m = lindblad_generator(h, h, params, k, params.target_spin_index);
    let scale = dynamical_rate_scale(h, h, params);
    Ok(evolve_block(&m, rho, t_us, scale, integrator, k))
}

/// Per-cluster coherence with the Lindblad channel applied to the target spin
/// during free evolution.
///
/// The electron-conditioned coherence block X (initially the maximally mixed
/// 𝟙/2ᵏ) evolves segment-by-segment under Ẋ = −i·2π·10⁻³(H₊X − XH₋) + channel,
/// with H₊ ↔ H₋ swapping at every π pulse; the returned value is Tr X at the
/// end of the sequence. With rates → 0 this equals the coherent evaluation
/// within 1e-8.
pub fn noisy_cluster_coherence(
    spins: &[BathSpin],
    cluster: &[usize],
    seq: &PulseSequence,
    tau_grid_us: &[f64],
    params: &LindbladParams,
    g: &GTensor,
    b: &MagneticField,
) -> Result<ClusterCoherence> {
    let Some(target_in_cluster) = cluster.iter().position(|&i| i == params.target_spin_index)
    else {
        return Err(CoreError::OperatorInput(format!(
            "Lindblad target spin {} is not a member of cluster {:?}",
            params.target_spin_index, cluster
        )));
    };
    crate::cce::validate_tau_grid(tau_grid_us)?;
    let members: Vec<BathSpin> = cluster
        .iter()
        .map(|&i| {
            spins.get(i).cloned().ok_or_else(|| {
                CoreError::OperatorInput(format!("cluster spin index {i} out of range"))
            })
        })
        .collect::<Result<_>>()?;
    let k = members.len();
    let (h_plus, h_minus) = conditional_hamiltonians(&members, g, b, k.max(1))?;

    let d = 1usize << k;
    let m_plus = lindblad_generator(&h_plus, &h_minus, params, k, target_in_cluster);
    let m_minus = lindblad_generator(&h_minus, &h_plus, params, k, target_in_cluster);
    let scale = dynamical_rate_scale(&h_plus, &h_minus, params);
    let x0 = eye(d) / Complex64::new(d as f64, 0.0);

    let mut values = Vec::with_capacity(tau_grid_us.len());
    for &tau in tau_grid_us {
        let mut x = x0.clone();
        if tau > 0.0 {
            let mut plus_branch = true;
            for seg in seq.free_segments_for(tau) {
                let m = if plus_branch { &m_plus } else { &m_minus };
                x = evolve_block(m, &x, seg, scale, LindbladIntegrator::Auto, k);
                plus_branch = !plus_branch;
            }
        }
        values.push(x.trace());
    }
    Ok(ClusterCoherence {
        cluster: cluster.to_vec(),
        values,
    })
}

// ---------------------------------------------------------------------------
// Balanced readout
// ---------------------------------------------------------------------------

/// The two fluorescence traces of the balanced readout: the final π/2 pulse is
/// applied with phase π/2 or 3π/2, projecting the echo alternately onto the
/// two electron branches. Their difference isolates the transverse coherence;
/// common-mode background cancels.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutPair {
    pub signal_3pi2: Vec<f64>,
    pub signal_pi2: Vec<f64>,
}

impl ReadoutPair {
    /// signal(3π/2) − signal(π/2) = fidelity · Re L.
    pub fn difference(&self) -> Vec<f64> {
        self.signal_3pi2
            .iter()
            .zip(&self.signal_pi2)
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// Map a coherence curve to the balanced pair of readout traces for a given
/// initialization/readout contrast (probability) and background level.
pub fn balanced_readout(
    curve: &CoherenceCurve,
    initialization_fidelity: f64,
    background: f64,
) -> ReadoutPair {
    assert!(
        (0.0..=1.0).contains(&initialization_fidelity),
        "fidelity must lie in [0, 1]"
    );
    let f = initialization_fidelity;
    let signal_3pi2 = curve
        .values
        .iter()
        .map(|l| background + f * (1.0 + l.re) / 2.0)
        .collect();
    let signal_pi2 = curve
        .values
        .iter()
        .map(|l| background + f * (1.0 - l.re) / 2.0)
        .collect();
    ReadoutPair {
        signal_3pi2,
        signal_pi2,
    }
}
