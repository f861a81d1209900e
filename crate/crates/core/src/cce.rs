//! Cluster-correlation expansion (CCE) of central-spin coherence.
//!
//! The electron coherence under a dynamical-decoupling sequence factorizes
//! over nuclear clusters: L(t) = Π_C L̃_C(t), where each cluster contribution
//! is evaluated exactly on its small Hilbert space and the tilde terms are
//! defined recursively, L̃_C = L_C / Π_{C'⊊C} L̃_{C'}. Truncating at cluster
//! order 1 reproduces a strictly non-interacting bath; order 2 captures the
//! dipolar flip-flop dynamics of nuclear pairs and is the default.
//!
//! A single cluster's coherence is the interferometric overlap of the two
//! electron-branch evolutions,
//!
//!   L_C = Tr[ U₊(t) ρ_C U₋(t)† ] / Tr ρ_C ,   ρ_C = 𝟙 / 2ᵏ,
//!
//! where U± are time-ordered products of segment propagators under the
//! conditional Hamiltonians H±, with the roles of H₊ and H₋ swapping at every
//! π pulse of the sequence. All Hamiltonians are in kHz and times in µs; the
//! phase accumulated by an eigenstate of frequency w over t is 2π·10⁻³·w·t.
//!
//! Cluster evaluations run in parallel, but the final reduction multiplies
//! fixed-size chunks in a deterministic order, so results are bit-identical
//! regardless of worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::constants::PHASE_PER_KHZ_US;
use crate::dynamics::{PulseSequence, SequenceKind};
use crate::error::{CoreError, Result};
use crate::hamiltonian::{
    bath_coupling, conditional_hamiltonians_with, GTensor, MagneticField, DEFAULT_MAX_CLUSTER,
};
use crate::lattice::BathSpin;
use crate::linalg::{eigh, eye, trace_product_adjoint, CMat, HermitianEigen, C_ONE, C_ZERO};

/// Default pair-admission distance for cluster enumeration, Å.
pub const DEFAULT_PAIR_CUTOFF_ANGSTROM: f64 = 8.0;
/// Default truncation radius of the bath around the defect, nm.
pub const DEFAULT_BATH_RADIUS_NM: f64 = 6.5;
/// Default expansion order (pairs).
pub const DEFAULT_EXPANSION_ORDER: usize = 2;
/// Largest bath the exact (no-factorization) evaluator accepts.
pub const EXACT_MAX_SPINS: usize = 12;
/// |L̃| below this is treated as numerically non-convergent: the point is
/// flagged and the factor skipped instead of dividing by ~0.
pub const NONCONVERGENCE_THRESHOLD: f64 = 1e-12;

/// Clusters whose contributions multiply in deterministic chunks of this size.
const REDUCTION_CHUNK: usize = 64;

/// Pair-admission rule for cluster enumeration: either a maximum distance or
/// a minimum dipolar coupling strength b = ‖T‖_F/√6.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairCutoff {
    DistanceAngstrom(f64),
    CouplingHz(f64),
}

impl Default for PairCutoff {
    fn default() -> Self {
        PairCutoff::DistanceAngstrom(DEFAULT_PAIR_CUTOFF_ANGSTROM)
    }
}

impl PairCutoff {
    fn validate(&self) -> Result<()> {
        let v = match self {
            PairCutoff::DistanceAngstrom(v) | PairCutoff::CouplingHz(v) => *v,
        };
        if !(v.is_finite() && v > 0.0) {
            return Err(CoreError::OperatorInput(format!(
                "pair cutoff must be finite and positive, got {v}"
            )));
        }
        Ok(())
    }
}

/// Whether the intra-bath nuclear dipole-dipole terms enter the conditional
/// Hamiltonians. `Disabled` models a strictly non-interacting bath, for which
/// the order-1 expansion is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntraBathCoupling {
    #[default]
    Dipolar,
    Disabled,
}

impl IntraBathCoupling {
    fn include_pairs(self) -> bool {
        matches!(self, IntraBathCoupling::Dipolar)
    }
}

/// The clusters of one expansion run: index tuples into the bath spin list,
/// sorted ascending within each tuple and globally by (order, lexicographic).
/// Tuples of order ≥ 2 are cliques of the pair-admission graph, so the set is
/// closed under taking subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub clusters: Vec<Vec<usize>>,
    pub max_order: usize,
    pub pair_cutoff: PairCutoff,
}

impl ClusterSet {
    /// Number of clusters of the given order.
    pub fn order_count(&self, order: usize) -> usize {
        self.clusters.iter().filter(|c| c.len() == order).count()
    }

    /// True when every proper non-empty subset of every cluster is itself a
    /// member (required for the tilde recursion to be well defined).
    pub fn is_subset_closed(&self) -> bool {
        let index: BTreeSet<&[usize]> = self.clusters.iter().map(|c| c.as_slice()).collect();
        self.clusters
            .iter()
            .flat_map(|c| proper_subsets(c))
            .all(|s| index.contains(s.as_slice()))
    }
}

/// One cluster's coherence on the pulse-interval grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCoherence {
    /// Sorted bath-spin indices of the cluster.
    pub cluster: Vec<usize>,
    /// L_C at each τ of the evaluation grid; |L_C| ≤ 1 and L_C(0) = 1.
    pub values: Vec<Complex64>,
}

/// Provenance carried by a combined curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveMetadata {
    /// Human-readable sequence descriptor, e.g. "hahn" or "cpmg-5".
    pub sequence: String,
    /// Number of π pulses (0 for FID); recovers τ from total time.
    pub n_pulses: usize,
    /// Isotope-configuration seed, when one applies.
    pub seed: Option<u64>,
    /// Hash of the run configuration, when one applies.
    pub config_hash: Option<String>,
}

impl CurveMetadata {
    pub fn for_sequence(seq: &PulseSequence) -> Self {
        CurveMetadata {
            sequence: sequence_descriptor(seq.kind, seq.n_pulses),
            n_pulses: seq.n_pulses,
            seed: None,
            config_hash: None,
        }
    }
}

/// Canonical name of a sequence: "fid", "hahn", "cpmg-N".
pub fn sequence_descriptor(kind: SequenceKind, n_pulses: usize) -> String {
    match kind {
        SequenceKind::Fid => "fid".to_string(),
        SequenceKind::Hahn => "hahn".to_string(),
        SequenceKind::Cpmg => format!("cpmg-{n_pulses}"),
    }
}

/// A combined coherence curve on the total-evolution-time axis (2Nτ for a
/// pulsed sequence, τ for an FID).
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceCurve {
    /// Total evolution time in µs, strictly increasing.
    pub times: Vec<f64>,
    /// Complex coherence at each time.
    pub values: Vec<Complex64>,
    /// Grid indices where the tilde recursion hit a |L̃| < 1e-12 divisor and
    /// the expansion is not trustworthy. Empty on converged runs.
    pub non_converged: Vec<usize>,
    pub metadata: CurveMetadata,
}

impl CoherenceCurve {
    /// Recover the pulse-interval grid from the total-time axis.
    pub fn tau_grid(&self) -> Vec<f64> {
        if self.metadata.n_pulses == 0 {
            self.times.clone()
        } else {
            let scale = 2.0 * self.metadata.n_pulses as f64;
            self.times.iter().map(|t| t / scale).collect()
        }
    }
}

/// Progress observer: called with (clusters done, clusters total). May be
/// invoked concurrently from worker threads.
pub type ProgressFn<'a> = &'a (dyn Fn(usize, usize) + Sync);

// ---------------------------------------------------------------------------
// Grid and cluster validation
// ---------------------------------------------------------------------------

pub(crate) fn validate_tau_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(CoreError::OperatorInput("empty pulse-interval grid".into()));
    }
    if !grid.iter().all(|t| t.is_finite()) || grid[0] < 0.0 {
        return Err(CoreError::OperatorInput(
            "pulse-interval grid must be finite and non-negative".into(),
        ));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CoreError::OperatorInput(
            "pulse-interval grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}

fn validate_cluster(cluster: &[usize], n_spins: usize) -> Result<()> {
    if cluster.is_empty() {
        return Err(CoreError::OperatorInput("empty cluster".into()));
    }
    if cluster.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CoreError::OperatorInput(format!(
            "cluster {cluster:?} must be sorted ascending without repeats"
        )));
    }
    if *cluster.last().unwrap() >= n_spins {
        return Err(CoreError::OperatorInput(format!(
            "cluster {cluster:?} indexes outside a bath of {n_spins} spins"
        )));
    }
    Ok(())
}

fn gather<'a>(spins: &'a [BathSpin], cluster: &[usize]) -> Vec<BathSpin> {
    cluster.iter().map(|&i| spins[i].clone()).collect()
}

// ---------------------------------------------------------------------------
// Cluster enumeration
// ---------------------------------------------------------------------------

fn pair_passes(spins: &[BathSpin], i: usize, j: usize, cutoff: &PairCutoff) -> Result<bool> {
    match cutoff {
        PairCutoff::DistanceAngstrom(d) => {
            Ok((spins[i].position - spins[j].position).norm() < *d)
        }
        PairCutoff::CouplingHz(c) => {
            let t = bath_coupling(i, &spins[i], j, &spins[j])?.tensor_hz;
            Ok(t.norm() / 6f64.sqrt() > *c)
        }
    }
}

fn intersect_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let (mut p, mut q) = (0, 0);
    while p < a.len() && q < b.len() {
        match a[p].cmp(&b[q]) {
            std::cmp::Ordering::Less => p += 1,
            std::cmp::Ordering::Greater => q += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[p]);
                p += 1;
                q += 1;
            }
        }
    }
    out
}

/// Enumerate all clusters up to `max_order`: order 1 is every bath spin;
/// higher orders are the cliques of the pair-admission graph, so every pair
/// inside an admitted tuple itself satisfies the cutoff. Output order is
/// deterministic: ascending cluster order, then lexicographic.
pub fn enumerate_clusters(
    spins: &[BathSpin],
    max_order: usize,
    pair_cutoff: PairCutoff,
) -> Result<ClusterSet> {
    if !(1..=DEFAULT_MAX_CLUSTER).contains(&max_order) {
        return Err(CoreError::OperatorInput(format!(
            "expansion order must lie in 1..={DEFAULT_MAX_CLUSTER}, got {max_order}"
        )));
    }
    pair_cutoff.validate()?;
    let n = spins.len();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();

    if max_order >= 2 {
        // Forward adjacency: adj[i] holds the admitted partners j > i, sorted.
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            for j in (i + 1)..n {
                if pair_passes(spins, i, j, &pair_cutoff)? {
                    adj[i].push(j);
                }
            }
        }
        for (i, partners) in adj.iter().enumerate() {
            for &j in partners {
                clusters.push(vec![i, j]);
            }
        }
        let mut triples: Vec<Vec<usize>> = Vec::new();
        if max_order >= 3 {
            for i in 0..n {
                for &j in &adj[i] {
                    for &k in &intersect_sorted(&adj[i], &adj[j]) {
                        triples.push(vec![i, j, k]);
                    }
                }
            }
        }
        if max_order >= 4 {
            let mut quads: Vec<Vec<usize>> = Vec::new();
            for t in &triples {
                let (i, j, k) = (t[0], t[1], t[2]);
                let common = intersect_sorted(&intersect_sorted(&adj[i], &adj[j]), &adj[k]);
                for &l in &common {
                    quads.push(vec![i, j, k, l]);
                }
            }
            clusters.extend(triples);
            clusters.extend(quads);
        } else {
            clusters.extend(triples);
        }
    }

    Ok(ClusterSet {
        clusters,
        max_order,
        pair_cutoff,
    })
}

// ---------------------------------------------------------------------------
// Single-cluster evaluation
// ---------------------------------------------------------------------------

/// The two branch propagators (U₊-first, U₋-first) for one conditional pair
/// at pulse interval τ. Segment propagators come from the eigendecompositions
/// (durations are only τ and 2τ), and later segments multiply from the left.
fn branch_products(
    ep: &HermitianEigen,
    em: &HermitianEigen,
    seq: &PulseSequence,
    tau: f64,
) -> (CMat, CMat) {
    let segs = seq.free_segments_for(tau);
    let n_seg = segs.len();
    let d = ep.values.len();
    let p1 = ep.propagator(PHASE_PER_KHZ_US, tau);
    let m1 = em.propagator(PHASE_PER_KHZ_US, tau);
    let (p2, m2) = if n_seg > 2 {
        (
            Some(ep.propagator(PHASE_PER_KHZ_US, 2.0 * tau)),
            Some(em.propagator(PHASE_PER_KHZ_US, 2.0 * tau)),
        )
    } else {
        (None, None)
    };
    let mut u_plus_first = eye(d);
    let mut u_minus_first = eye(d);
    let mut plus = true;
    for si in 0..n_seg {
        let edge = si == 0 || si + 1 == n_seg;
        let (ea, eb): (&CMat, &CMat) = match (plus, edge) {
            (true, true) => (&p1, &m1),
            (false, true) => (&m1, &p1),
            (true, false) => (p2.as_ref().unwrap(), m2.as_ref().unwrap()),
            (false, false) => (m2.as_ref().unwrap(), p2.as_ref().unwrap()),
        };
        u_plus_first = ea * &u_plus_first;
        u_minus_first = eb * &u_minus_first;
        plus = !plus;
    }
    (u_plus_first, u_minus_first)
}

/// L(τ) = Tr[U₊(τ) U₋(τ)†] / 2ᵏ on the given grid.
fn interference_values(
    h_plus: &CMat,
    h_minus: &CMat,
    seq: &PulseSequence,
    tau_grid_us: &[f64],
) -> Vec<Complex64> {
    let ep = eigh(h_plus);
    let em = eigh(h_minus);
    let d = h_plus.nrows();
    let inv_d = Complex64::new(1.0 / d as f64, 0.0);
    tau_grid_us
        .iter()
        .map(|&tau| {
            if tau == 0.0 {
                C_ONE
            } else {
                let (ua, ub) = branch_products(&ep, &em, seq, tau);
                trace_product_adjoint(&ua, &ub) * inv_d
            }
        })
        .collect()
}

fn raw_cluster_values(
    spins: &[BathSpin],
    cluster: &[usize],
    seq: &PulseSequence,
    tau_grid_us: &[f64],
    g: &GTensor,
    b: &MagneticField,
    coupling: IntraBathCoupling,
) -> Result<Vec<Complex64>> {
    let members = gather(spins, cluster);
    let (hp, hm) =
        conditional_hamiltonians_with(&members, g, b, members.len(), coupling.include_pairs())?;
    Ok(interference_values(&hp, &hm, seq, tau_grid_us))
}

/// Exact coherence of a single cluster on the pulse-interval grid.
pub fn cluster_coherence(
    spins: &[BathSpin],
    cluster: &[usize],
    seq: &PulseSequence,
    tau_grid_us: &[f64],
    g: &GTensor,
    b: &MagneticField,
    max_cluster: usize,
) -> Result<ClusterCoherence> {
    cluster_coherence_with(
        spins,
        cluster,
        seq,
        tau_grid_us,
        g,
        b,
        max_cluster,
        IntraBathCoupling::Dipolar,
    )
}

/// [`cluster_coherence`] with the intra-bath couplings optionally disabled.
#[allow(clippy::too_many_arguments)]
pub fn cluster_coherence_with(
    spins: &[BathSpin],
    cluster: &[usize],
    seq: &PulseSequence,
    tau_grid_us: &[f64],
    g: &GTensor,
    b: &MagneticField,
    max_cluster: usize,
    coupling: IntraBathCoupling,
) -> Result<ClusterCoherence> {
    validate_tau_grid(tau_grid_us)?;
    validate_cluster(cluster, spins.len())?;
    if cluster.len() > max_cluster {
        return Err(CoreError::BathTooLarge {
            n: cluster.len(),
            max: max_cluster,
        });
    }
    let values = raw_cluster_values(spins, cluster, seq, tau_grid_us, g, b, coupling)?;
    Ok(ClusterCoherence {
        cluster: cluster.to_vec(),
        values,
    })
}

// ---------------------------------------------------------------------------
// Tilde recursion and combination
// ---------------------------------------------------------------------------

/// All proper non-empty subsets of a sorted cluster, ordered by (size, lex):
/// the deterministic division order of the tilde recursion.
fn proper_subsets(cluster: &[usize]) -> Vec<Vec<usize>> {
    let k = cluster.len();
    if k <= 1 {
        return Vec::new();
    }
    let mut subs: Vec<Vec<usize>> = (1usize..(1 << k) - 1)
        .map(|mask| {
            (0..k)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| cluster[i])
                .collect()
        })
        .collect();
    subs.sort_by(|a: &Vec<usize>, b: &Vec<usize>| a.len().cmp(&b.len()).then(a.cmp(b)));
    subs
}

/// Divide a raw L_C by the tilde factors of all its proper subsets, in the
/// deterministic (size, lex) order. Divisors with |L̃| below the convergence
/// threshold are skipped and the grid point flagged instead.
fn divide_by_lower(
    values: &mut [Complex64],
    cluster: &[usize],
    lower: &BTreeMap<Vec<usize>, Vec<Complex64>>,
    flags: &mut BTreeSet<usize>,
) {
    for sub in proper_subsets(cluster) {
        if let Some(lt) = lower.get(&sub) {
            for (p, v) in values.iter_mut().enumerate() {
                let denom = lt[p];
                if denom.norm() < NONCONVERGENCE_THRESHOLD {
                    flags.insert(p);
                } else {
                    *v /= denom;
                }
            }
        }
    }
}

fn assemble_curve(
    values: Vec<Complex64>,
    flags: BTreeSet<usize>,
    seq: &PulseSequence,
    tau_grid_us: &[f64],
) -> CoherenceCurve {
    CoherenceCurve {
        times: tau_grid_us.iter().map(|&t| seq.total_time_for(t)).collect(),
        values,
        non_converged: flags.into_iter().collect(),
        metadata: CurveMetadata::for_sequence(seq),
    }
}

/// Combine a full list of cluster coherences into the expansion product
/// Π L̃_C. The list must contain exactly one entry per cluster of the set, all
/// on the shared grid. Grid points where a tilde divisor falls below 1e-12
/// are flagged in `non_converged` (the division is skipped, never performed).
pub fn cce_combine(
    coherences: &[ClusterCoherence],
    set: &ClusterSet,
    seq: &PulseSequence,
    tau_grid_us: &[f64],
) -> Result<CoherenceCurve> {
    validate_tau_grid(tau_grid_us)?;
    let np = tau_grid_us.len();
    let mut by_cluster: BTreeMap<&[usize], &[Complex64]> = BTreeMap::new();
    for c in coherences {
        if c.values.len() != np {
            return Err(CoreError::GridMismatch(format!(
                "cluster {:?} has {} values for a grid of {np}",
                c.cluster,
                c.values.len()
            )));
        }
        if by_cluster
            .insert(c.cluster.as_slice(), c.values.as_slice())
            .is_some()
        {
            return Err(CoreError::OperatorInput(format!(
                "duplicate coherence for cluster {:?}",
                c.cluster
            )));
        }
    }
    if by_cluster.len() != set.clusters.len()
        || set
            .clusters
            .iter()
            .any(|c| !by_cluster.contains_key(c.as_slice()))
    {
        return Err(CoreError::OperatorInput(
            "coherence list does not cover the cluster set exactly".into(),
        ));
    }

    let mut lower: BTreeMap<Vec<usize>, Vec<Complex64>> = BTreeMap::new();
    let mut total = vec![C_ONE; np];
    let mut flags: BTreeSet<usize> = BTreeSet::new();
    for cluster in &set.clusters {
        let mut vals = by_cluster[cluster.as_slice()].to_vec();
        divide_by_lower(&mut vals, cluster, &lower, &mut flags);
        for (t, v) in total.iter_mut().zip(&vals) {
            *t *= v;
        }
        lower.insert(cluster.clone(), vals);
    }
    Ok(assemble_curve(total, flags, seq, tau_grid_us))
}

// ---------------------------------------------------------------------------
// Orchestrated expansion
// ---------------------------------------------------------------------------

struct ChunkOut {
    partial: Vec<Complex64>,
    kept: Vec<(Vec<usize>, Vec<Complex64>)>,
    flags: BTreeSet<usize>,
}

/// Evaluate and combine a whole cluster set: parallel map over clusters, then
/// a deterministic chunked reduction (bit-stable for any worker count).
/// Tilde factors are retained only for orders below `max_order`, so memory
/// stays bounded by the lower-order storage even for large pair sets.
#[allow(clippy::too_many_arguments)]
pub fn expansion_coherence(
    spins: &[BathSpin],
    set: &ClusterSet,
    seq: &PulseSequence,
    tau_grid_us: &[f64],
    g: &GTensor,
    b: &MagneticField,
    coupling: IntraBathCoupling,
    progress: Option<ProgressFn>,
) -> Result<CoherenceCurve> {
    validate_tau_grid(tau_grid_us)?;
    for cluster in &set.clusters {
        validate_cluster(cluster, spins.len())?;
    }
    let np = tau_grid_us.len();
    let total_clusters = set.clusters.len();
    let done = AtomicUsize::new(0);
    let report = |k: usize| {
        if let Some(cb) = progress {
            let d = done.fetch_add(k, Ordering::Relaxed) + k;
            cb(d.min(total_clusters), total_clusters);
        }
    };

    let mut total = vec![C_ONE; np];
    let mut flags: BTreeSet<usize> = BTreeSet::new();
    let mut lower: BTreeMap<Vec<usize>, Vec<Complex64>> = BTreeMap::new();

    for order in 1..=set.max_order {
        let of_order: Vec<&Vec<usize>> =
            set.clusters.iter().filter(|c| c.len() == order).collect();
        if of_order.is_empty() {
            continue;
        }
        let keep = order < set.max_order;
        let chunk_results: Vec<ChunkOut> = of_order
            .par_chunks(REDUCTION_CHUNK)
            .map(|chunk| -> Result<ChunkOut> {
                let mut out = ChunkOut {
                    partial: vec![C_ONE; np],
                    kept: Vec::new(),
                    flags: BTreeSet::new(),
                };
                for cluster in chunk {
                    let mut vals =
                        raw_cluster_values(spins, cluster, seq, tau_grid_us, g, b, coupling)?;
                    divide_by_lower(&mut vals, cluster, &lower, &mut out.flags);
                    for (t, v) in out.partial.iter_mut().zip(&vals) {
                        *t *= v;
                    }
                    if keep {
                        out.kept.push(((*cluster).clone(), vals));
                    }
                }
                report(chunk.len());
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        for chunk in chunk_results {
            for (t, v) in total.iter_mut().zip(&chunk.partial) {
                *t *= v;
            }
            flags.extend(chunk.flags);
            for (cluster, vals) in chunk.kept {
                lower.insert(cluster, vals);
            }
        }
    }

    Ok(assemble_curve(total, flags, seq, tau_grid_us))
}

// ---------------------------------------------------------------------------
// Exact (no-factorization) evaluation
// ---------------------------------------------------------------------------

/// Expand row `row` of ⊗ₛ mats[s] (leftmost factor = most significant bit)
/// into `out`, which must have length 2^(mats.len()).
fn expand_kron_row(mats: &[&CMat], row: usize, out: &mut [Complex64]) {
    let n = mats.len();
    out[0] = C_ONE;
    let mut len = 1usize;
    for (s, m) in mats.iter().enumerate() {
        let bit = (row >> (n - 1 - s)) & 1;
        let a = m[(bit, 0)];
        let b = m[(bit, 1)];
        for i in (0..len).rev() {
            let v = out[i];
            out[2 * i] = v * a;
            out[2 * i + 1] = v * b;
        }
        len *= 2;
    }
}

/// Non-interacting exact path: the joint branch propagators are Kronecker
/// products of per-spin 2×2 segment products; the trace is still evaluated
/// row-by-row on the full 2^N space (O(4^N) work, O(2^N) memory) rather than
/// through any cluster factorization.
fn exact_tensor_sum_values(
    spins: &[BathSpin],
    seq: &PulseSequence,
    tau_grid_us: &[f64],
    g: &GTensor,
    b: &MagneticField,
) -> Result<Vec<Complex64>> {
    let n = spins.len();
    let eigs: Vec<(HermitianEigen, HermitianEigen)> = spins
        .iter()
        .map(|s| {
            let (hp, hm) = conditional_hamiltonians_with(std::slice::from_ref(s), g, b, 1, false)?;
            Ok((eigh(&hp), eigh(&hm)))
        })
        .collect::<Result<_>>()?;
    let dim = 1usize << n;
    let inv_dim = Complex64::new(1.0 / dim as f64, 0.0);
    let mut row_a = vec![C_ZERO; dim];
    let mut row_b = vec![C_ZERO; dim];
    Ok(tau_grid_us
        .iter()
        .map(|&tau| {
            if tau == 0.0 {
                return C_ONE;
            }
            let branches: Vec<(CMat, CMat)> = eigs
                .iter()
                .map(|(ep, em)| branch_products(ep, em, seq, tau))
                .collect();
            let ua: Vec<&CMat> = branches.iter().map(|(a, _)| a).collect();
            let ub: Vec<&CMat> = branches.iter().map(|(_, b)| b).collect();
            let mut acc = C_ZERO;
            for r in 0..dim {
                expand_kron_row(&ua, r, &mut row_a);
                expand_kron_row(&ub, r, &mut row_b);
                acc += row_a
                    .iter()
                    .zip(&row_b)
                    .map(|(x, y)| x * y.conj())
                    .sum::<Complex64>();
            }
            acc * inv_dim
        })
        .collect())
}

/// Brute-force coherence of the whole bath on its full joint Hilbert space,
/// with no cluster factorization. Supports up to 12 spins; the interacting
/// path diagonalizes the 2^N-dimensional conditional Hamiltonians and is
/// practical to N ≈ 10 on one core.
pub fn exact_coherence(
    spins: &[BathSpin],
    seq: &PulseSequence,
    tau_grid_us: &[f64],
    g: &GTensor,
    b: &MagneticField,
) -> Result<CoherenceCurve> {
    exact_coherence_with(spins, seq, tau_grid_us, g, b, IntraBathCoupling::Dipolar)
}

/// [`exact_coherence`] with the intra-bath couplings optionally disabled.
pub fn exact_coherence_with(
    spins: &[BathSpin],
    seq: &PulseSequence,
    tau_grid_us: &[f64],
    g: &GTensor,
    b: &MagneticField,
    coupling: IntraBathCoupling,
) -> Result<CoherenceCurve> {
    validate_tau_grid(tau_grid_us)?;
    let n = spins.len();
    if n > EXACT_MAX_SPINS {
        return Err(CoreError::BathTooLarge {
            n,
            max: EXACT_MAX_SPINS,
        });
    }
    let values = if n == 0 {
        vec![C_ONE; tau_grid_us.len()]
    } else {
        match coupling {
            IntraBathCoupling::Disabled => {
                exact_tensor_sum_values(spins, seq, tau_grid_us, g, b)?
            }
            IntraBathCoupling::Dipolar => {
                let (hp, hm) = conditional_hamiltonians_with(spins, g, b, n, true)?;
                interference_values(&hp, &hm, seq, tau_grid_us)
            }
        }
    };
    Ok(assemble_curve(values, BTreeSet::new(), seq, tau_grid_us))
}

// ---------------------------------------------------------------------------
// Ensemble averaging
// ---------------------------------------------------------------------------

/// Weighted pointwise mean of curves on identical time grids (e.g. over
/// isotope configurations, or over the two crystallographic defect sites).
/// Weights must be non-negative and sum to 1 within 1e-9.
pub fn ensemble_average(curves: &[CoherenceCurve], weights: &[f64]) -> Result<CoherenceCurve> {
    if curves.is_empty() || curves.len() != weights.len() {
        return Err(CoreError::OperatorInput(format!(
            "need one weight per curve, got {} curves and {} weights",
            curves.len(),
            weights.len()
        )));
    }
    if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
        return Err(CoreError::OperatorInput(
            "ensemble weights must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CoreError::OperatorInput(format!(
            "ensemble weights sum to {sum}, expected 1 within 1e-9"
        )));
    }
    let times = &curves[0].times;
    for c in &curves[1..] {
        if c.times != *times {
            return Err(CoreError::GridMismatch(
                "ensemble members must share an identical time grid".into(),
            ));
        }
    }
    let np = times.len();
    let mut values = vec![C_ZERO; np];
    let mut flags: BTreeSet<usize> = BTreeSet::new();
    for (c, &w) in curves.iter().zip(weights) {
        let wc = Complex64::new(w, 0.0);
        for (acc, v) in values.iter_mut().zip(&c.values) {
            *acc += wc * v;
        }
        flags.extend(c.non_converged.iter().copied());
    }
    let mut metadata = curves[0].metadata.clone();
    metadata.seed = None;
    Ok(CoherenceCurve {
        times: times.clone(),
        values,
        non_converged: flags.into_iter().collect(),
        metadata,
    })
}
