//! Dense complex linear algebra for small spin-cluster operators.
//!
//! Cluster Hilbert spaces here are tiny (dimension 2^k with k <= 4 for CCE
//! clusters, up to 2^12 for the exact brute-force oracle), so everything is
//! dense `DMatrix<Complex64>`. Hermitian eigendecomposition comes from
//! nalgebra; the matrix exponential for the (non-Hermitian) Lindblad
//! superoperator is a scaling-and-squaring Pade approximant.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Dense complex matrix used for all cluster operators.
pub type CMat = DMatrix<Complex64>;
/// Dense complex vector.
pub type CVec = DVector<Complex64>;

/// Complex zero.
pub const C_ZERO: Complex64 = Complex64::new(0.0, 0.0);
/// Complex one.
pub const C_ONE: Complex64 = Complex64::new(1.0, 0.0);

/// n x n identity.
pub fn eye(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// The Pauli matrices [sigma_x, sigma_y, sigma_z] (spin operators are sigma/2).
pub fn pauli_matrices() -> [CMat; 3] {
    let i = Complex64::new(0.0, 1.0);
    [
        CMat::from_row_slice(2, 2, &[C_ZERO, C_ONE, C_ONE, C_ZERO]),
        CMat::from_row_slice(2, 2, &[C_ZERO, -i, i, C_ZERO]),
        CMat::from_row_slice(2, 2, &[C_ONE, C_ZERO, C_ZERO, -C_ONE]),
    ]
}

/// Kronecker product a (x) b.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMat::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == C_ZERO {
                continue;
            }
            for p in 0..br {
                for q in 0..bc {
                    out[(i * br + p, j * bc + q)] = aij * b[(p, q)];
                }
            }
        }
    }
    out
}

/// Embed a single-spin operator at position `idx` in a k-spin register:
/// I (x) ... (x) op (x) ... (x) I.
pub fn embed(op: &CMat, k: usize, idx: usize) -> CMat {
    debug_assert!(idx < k);
    let mut out = CMat::identity(1, 1);
    for j in 0..k {
        out = if j == idx { kron(&out, op) } else { kron(&out, &eye(2)) };
    }
    out
}

/// tr(a b^dagger) without forming either the adjoint or the product:
/// sum_ij a_ij conj(b_ij) (the Frobenius inner product <b, a>).
pub fn trace_product_adjoint(a: &CMat, b: &CMat) -> Complex64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| x * y.conj()).sum()
}

/// tr(a b) without forming the product: sum_ij a_ij b_ji.
pub fn trace_product(a: &CMat, b: &CMat) -> Complex64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let n = a.nrows();
    let m = a.ncols();
    let mut acc = C_ZERO;
    for i in 0..n {
        for j in 0..m {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Max absolute deviation from Hermiticity, for input validation.
pub fn hermiticity_defect(h: &CMat) -> f64 {
    let n = h.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((h[(i, j)] - h[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Eigendecomposition of a Hermitian matrix: real eigenvalues ascending with
/// matching orthonormal eigenvector columns.
pub struct HermitianEigen {
    /// Eigenvalues, ascending.
    pub values: DVector<f64>,
    /// Unitary matrix whose columns are the eigenvectors.
    pub vectors: CMat,
}

/// Diagonalize a Hermitian matrix. The input is symmetrized defensively
/// ((H + H^dagger)/2) so accumulated 1e-16-level asymmetry cannot leak into
/// the eigensolver; genuinely non-Hermitian input is a caller bug and is
/// caught by the debug assertion.
pub fn eigh(h: &CMat) -> HermitianEigen {
    debug_assert!(
        hermiticity_defect(h) <= 1e-9 * (1.0 + h.norm()),
        "eigh input is not Hermitian (defect {})",
        hermiticity_defect(h)
    );
    let sym = (h + h.adjoint()).scale(0.5);
    let se = sym.symmetric_eigen();
    // nalgebra returns eigenpairs unordered; sort ascending for determinism.
    let n = se.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| se.eigenvalues[a].partial_cmp(&se.eigenvalues[b]).unwrap());
    let values = DVector::from_iterator(n, order.iter().map(|&i| se.eigenvalues[i]));
    let mut vectors = CMat::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &se.eigenvectors.column(i));
    }
    HermitianEigen { values, vectors }
}

impl HermitianEigen {
    /// exp(-i * phase_per_unit * t * H) reconstructed from the eigenpairs:
    /// V diag(exp(-i w_k phase_per_unit t)) V^dagger.
    pub fn propagator(&self, phase_per_unit: f64, t: f64) -> CMat {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for k in 0..n {
            let phase = Complex64::from_polar(1.0, -phase_per_unit * self.values[k] * t);
            for i in 0..n {
                scaled[(i, k)] *= phase;
            }
        }
        &scaled * self.vectors.adjoint()
    }
}

/// Matrix exponential by scaling-and-squaring with a degree-13 Pade
/// approximant (Higham's method, fixed degree). Intended for the Lindblad
/// superoperator (dimension <= 256 here); accuracy near machine epsilon for
/// well-scaled inputs.
pub fn expm(a: &CMat) -> CMat {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    // 1-norm controls the scaling.
    let norm = (0..n)
        .map(|j| (0..n).map(|i| a[(i, j)].norm()).sum::<f64>())
        .fold(0.0f64, f64::max);
    // theta_13 from Higham: below this 1-norm the degree-13 Pade is accurate
    // without scaling.
    const THETA_13: f64 = 5.371_920_351_148_152;
    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil() as i32
    } else {
        0
    };
    let a = a.map(|z| z / 2f64.powi(s));

    const B: [f64; 14] = [
        64_764_752_532_480_000.0,
        32_382_376_266_240_000.0,
        7_771_770_303_897_600.0,
        1_187_353_796_428_800.0,
        129_060_195_264_000.0,
        10_559_470_521_600.0,
        670_442_572_800.0,
        33_522_128_640.0,
        1_323_241_920.0,
        40_840_800.0,
        960_960.0,
        16_380.0,
        182.0,
        1.0,
    ];
    let id = eye(n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let u_inner = &a6 * (&a6.scale(B[13]) + &a4.scale(B[11]) + &a2.scale(B[9]))
        + &a6.scale(B[7])
        + &a4.scale(B[5])
        + &a2.scale(B[3])
        + id.scale(B[1]);
    let u = &a * &u_inner;
    let v = &a6 * (&a6.scale(B[12]) + &a4.scale(B[10]) + &a2.scale(B[8]))
        + &a6.scale(B[6])
        + &a4.scale(B[4])
        + &a2.scale(B[2])
        + id.scale(B[0]);
    // exp(A) ~ (V - U)^-1 (V + U)
    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut x = lhs
        .lu()
        .solve(&rhs)
        .expect("Pade denominator is singular; input not exponentiable at f64 precision");
    for _ in 0..s {
        x = &x * &x;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use num_complex::Complex64 as C;

    fn random_hermitian(n: usize, seed: u64) -> CMat {
        // Small deterministic pseudo-random Hermitian matrix.
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state as f64 / u64::MAX as f64) - 0.5
        };
        let raw = CMat::from_fn(n, n, |_, _| C::new(next(), next()));
        (&raw + raw.adjoint()).scale(0.5)
    }

    #[test]
    fn kron_matches_hand_example() {
        let a = CMat::from_row_slice(2, 2, &[
            C::new(1.0, 0.0), C::new(2.0, 0.0),
            C::new(0.0, 0.0), C::new(1.0, -1.0),
        ]);
        let b = CMat::from_row_slice(2, 2, &[
            C::new(0.0, 0.0), C::new(1.0, 0.0),
            C::new(1.0, 0.0), C::new(0.0, 0.0),
        ]);
        let k = kron(&a, &b);
        assert_eq!(k.nrows(), 4);
        assert_eq!(k[(0, 1)], C::new(1.0, 0.0));
        assert_eq!(k[(0, 3)], C::new(2.0, 0.0));
        assert_eq!(k[(2, 2)], C::new(0.0, 0.0));
        assert_eq!(k[(2, 3)], C::new(1.0, -1.0));
        assert_eq!(k[(3, 2)], C::new(1.0, -1.0));
        assert!(k.row(1).iter().take(2).all(|c| *c == C::new(1.0, 0.0) || *c == C_ZERO));
    }

    #[test]
    fn eigh_reconstructs_input() {
        for n in [2usize, 5, 16] {
            let h = random_hermitian(n, n as u64);
            let eg = eigh(&h);
            let d = CMat::from_fn(n, n, |i, j| {
                if i == j { C::new(eg.values[i], 0.0) } else { C_ZERO }
            });
            let rebuilt = &eg.vectors * d * eg.vectors.adjoint();
            assert!((&rebuilt - &h).norm() < 1e-12 * (1.0 + h.norm()));
            // Ascending eigenvalues.
            for k in 1..n {
                assert!(eg.values[k] >= eg.values[k - 1]);
            }
        }
    }

    #[test]
    fn propagator_is_unitary_and_matches_expm() {
        let h = random_hermitian(8, 3);
        let eg = eigh(&h);
        let u = eg.propagator(0.37, 1.9);
        let uu = &u * u.adjoint();
        assert!((uu - eye(8)).norm() < 1e-12);
        let direct = expm(&h.map(|z| z * C::new(0.0, -0.37 * 1.9)));
        assert!((&u - &direct).norm() < 1e-11);
    }

    #[test]
    fn expm_identity_and_semigroup() {
        assert!((expm(&CMat::zeros(4, 4)) - eye(4)).norm() < 1e-15);
        let h = random_hermitian(6, 7).map(|z| z * C::new(0.3, 0.8));
        let half = expm(&h.map(|z| z * C::new(0.5, 0.0)));
        let full = expm(&h);
        assert!((&half * &half - full).norm() < 1e-11);
    }

    #[test]
    fn expm_handles_large_norm_by_scaling() {
        let h = random_hermitian(5, 11).scale(40.0);
        let a = h.map(|z| z * C::new(0.0, -1.0));
        let u = expm(&a);
        // exp(-iH) of Hermitian H stays unitary even after heavy scaling.
        assert!((&u * u.adjoint() - eye(5)).norm() < 1e-10);
    }

    #[test]
    fn trace_product_matches_naive() {
        let a = random_hermitian(7, 1);
        let b = random_hermitian(7, 2);
        let direct = (&a * &b).diagonal().sum();
        let ours = trace_product(&a, &b);
        assert_relative_eq!(ours.re, direct.re, max_relative = 1e-12);
        assert_relative_eq!(ours.im, direct.im, epsilon = 1e-12);

        let skewed = a.map(|z| z * C::new(0.3, 0.7));
        let direct_adj = (&skewed * b.adjoint()).diagonal().sum();
        let ours_adj = trace_product_adjoint(&skewed, &b);
        assert_relative_eq!(ours_adj.re, direct_adj.re, max_relative = 1e-12);
        assert_relative_eq!(ours_adj.im, direct_adj.im, max_relative = 1e-12);
    }

    #[test]
    fn embed_places_operator_on_the_right_axis() {
        let sz = CMat::from_row_slice(2, 2, &[
            C::new(0.5, 0.0), C_ZERO,
            C_ZERO, C::new(-0.5, 0.0),
        ]);
        let full = embed(&sz, 3, 1);
        assert_eq!(full.nrows(), 8);
        // Basis index b2 b1 b0 with spin 1 in the middle: diagonal entry is
        // +1/2 when bit 1 is 0 (first tensor factor convention: leftmost spin
        // is the most significant bit).
        for idx in 0..8usize {
            let bit = (idx >> 1) & 1;
            let expect = if bit == 0 { 0.5 } else { -0.5 };
            assert_relative_eq!(full[(idx, idx)].re, expect);
        }
    }
}
