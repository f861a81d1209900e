//! Spectral analysis, dip extraction, and least-squares model fits.
//!
//! This module turns coherence traces into reported numbers. The spectral
//! tools expose the bath's frequency content: a Hahn-echo trace over a pure
//! ⁸⁹Y bath concentrates its power at the yttrium Larmor frequency
//! (≈ 202.6 kHz at 0.097 T), with hyperfine-shifted satellites from the
//! nearest yttrium shell; a CPMG trace over a proximal ²⁹Si shows its dip
//! comb, which the dip extractor localizes to sub-grid precision.
//!
//! The fit models cover the standard characterization curves: stretched
//! exponential echo decay exp[−(2τ/T₂)³], Gaussian free-induction decay,
//! Lorentzian resonance lines, exponentially decaying Rabi cosine, and plain
//! exponential relaxation. All fits run a damped (Levenberg–Marquardt-style)
//! least-squares loop with numerical Jacobians, seeded by coarse grid
//! searches so they converge without hand-tuned starting values.
//!
//! Spectra are computed against the pulse-interval τ axis (not total
//! evolution time), so periodic revival structure lands at the driving
//! nuclear Larmor frequency.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::cce::CoherenceCurve;
use crate::error::{CoreError, Result};
use crate::hamiltonian::bath_coupling;
use crate::lattice::BathLattice;

/// Iteration cap for the damped least-squares loop.
pub const FIT_ITERATION_CAP: usize = 500;
/// Relative cost-decrease (and step-size) tolerance declaring convergence.
pub const FIT_RELATIVE_TOLERANCE: f64 = 1e-10;
/// Minimum number of samples any curve fit accepts.
const MIN_FIT_POINTS: usize = 5;
/// Minimum number of samples `fft_spectrum` accepts.
const MIN_FFT_POINTS: usize = 8;

// ---------------------------------------------------------------------------
// Spectra
// ---------------------------------------------------------------------------

/// Apodization window applied before the transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumWindow {
    /// No apodization; preserves Parseval energy exactly.
    Rect,
    /// Hann taper; trades resolution for sidelobe suppression.
    Hann,
}

impl SpectrumWindow {
    pub fn name(&self) -> &'static str {
        match self {
            SpectrumWindow::Rect => "rect",
            SpectrumWindow::Hann => "hann",
        }
    }
}

/// One-sided magnitude spectrum of a coherence trace.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Uniform frequency grid in kHz, starting at DC.
    pub frequencies_khz: Vec<f64>,
    /// |X(f)| of the detrended, windowed signal (unnormalized DFT magnitude).
    pub magnitudes: Vec<f64>,
    /// Window the signal was apodized with.
    pub window: SpectrumWindow,
}

/// A maximum of the magnitude spectrum that clears a prominence threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPeak {
    pub frequency_khz: f64,
    pub magnitude: f64,
}

fn uniform_spacing(tau: &[f64]) -> Result<f64> {
    let dt = tau[1] - tau[0];
    if !dt.is_finite() || dt <= 0.0 {
        return Err(CoreError::AnalysisInput(format!(
            "time grid must be strictly increasing, got leading step {dt}"
        )));
    }
    for w in tau.windows(2) {
        let step = w[1] - w[0];
        if (step - dt).abs() > 1e-9 * dt {
            return Err(CoreError::AnalysisInput(format!(
                "spectrum requires a uniform time grid; found steps {dt} and {step}"
            )));
        }
    }
    Ok(dt)
}

/// Complex one-sided spectrum bins of the detrended, windowed signal. The
/// frequency axis is the pulse-interval axis of the curve, in kHz.
pub(crate) fn fft_bins(
    curve: &CoherenceCurve,
    window: SpectrumWindow,
    zero_pad_factor: usize,
) -> Result<(Vec<f64>, Vec<Complex64>)> {
    let tau = curve.tau_grid();
    let n = tau.len();
    if n < MIN_FFT_POINTS {
        return Err(CoreError::AnalysisInput(format!(
            "spectrum requires at least {MIN_FFT_POINTS} samples, got {n}"
        )));
    }
    if curve.values.len() != n {
        return Err(CoreError::GridMismatch(format!(
            "curve has {} values for {n} time samples",
            curve.values.len()
        )));
    }
    if zero_pad_factor == 0 {
        return Err(CoreError::AnalysisInput(
            "zero_pad_factor must be at least 1".into(),
        ));
    }
    let dt = uniform_spacing(&tau)?;

    let mean = curve.values.iter().sum::<Complex64>() / n as f64;
    let mut buf: Vec<Complex64> = curve
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = match window {
                SpectrumWindow::Rect => 1.0,
                SpectrumWindow::Hann => {
                    0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n as f64 - 1.0)).cos())
                }
            };
            (v - mean) * w
        })
        .collect();
    let n_pad = n * zero_pad_factor;
    buf.resize(n_pad, Complex64::new(0.0, 0.0));

    FftPlanner::new().plan_fft_forward(n_pad).process(&mut buf);

    let half = n_pad / 2; // one-sided incl. Nyquist for even n_pad
    let freqs = (0..=half)
        .map(|k| 1e3 * k as f64 / (n_pad as f64 * dt))
        .collect();
    buf.truncate(half + 1);
    Ok((freqs, buf))
}

/// One-sided magnitude spectrum of a coherence trace against its
/// pulse-interval axis. The signal is mean-subtracted before windowing, so
/// the DC bin carries no offset power; zero padding refines the frequency
/// grid to 1/(pad × span) without adding information.
pub fn fft_spectrum(
    curve: &CoherenceCurve,
    window: SpectrumWindow,
    zero_pad_factor: usize,
) -> Result<Spectrum> {
    let (frequencies_khz, bins) = fft_bins(curve, window, zero_pad_factor)?;
    Ok(Spectrum {
        frequencies_khz,
        magnitudes: bins.iter().map(|c| c.norm()).collect(),
        window,
    })
}

/// Local maxima of the magnitude spectrum whose topographic prominence
/// reaches `prominence_threshold`, sorted by magnitude descending (ties by
/// frequency ascending). Prominence is measured against the deepest valley
/// separating the peak from higher ground on either side.
pub fn find_peaks(spec: &Spectrum, prominence_threshold: f64) -> Vec<SpectralPeak> {
    let m = &spec.magnitudes;
    let mut peaks = Vec::new();
    for i in 1..m.len().saturating_sub(1) {
        if !(m[i] > m[i - 1] && m[i] >= m[i + 1]) {
            continue;
        }
        let mut left_min = m[i];
        let mut j = i;
        while j > 0 {
            j -= 1;
            if m[j] > m[i] {
                break;
            }
            left_min = left_min.min(m[j]);
        }
        let mut right_min = m[i];
        let mut j = i;
        while j + 1 < m.len() {
            j += 1;
            if m[j] > m[i] {
                break;
            }
            right_min = right_min.min(m[j]);
        }
        if m[i] - left_min.max(right_min) >= prominence_threshold {
            peaks.push(SpectralPeak {
                frequency_khz: spec.frequencies_khz[i],
                magnitude: m[i],
            });
        }
    }
    peaks.sort_by(|a, b| {
        b.magnitude
            .total_cmp(&a.magnitude)
            .then(a.frequency_khz.total_cmp(&b.frequency_khz))
    });
    peaks
}

// ---------------------------------------------------------------------------
// Dips
// ---------------------------------------------------------------------------

/// One coherence dip: sub-grid center, depth below the local baseline, and
/// full width at half depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dip {
    pub center_us: f64,
    /// Local baseline minus dip floor, clamped to [0, 1].
    pub depth: f64,
    pub width_us: f64,
}

/// Dips found in a scanned τ window, ordered by center.
#[derive(Debug, Clone, Default)]
pub struct DipReport {
    pub dips: Vec<Dip>,
}

/// Vertex of the parabola through three (x, y) samples; falls back to the
/// middle sample when the points are collinear or concave.
fn parabolic_vertex(x: [f64; 3], y: [f64; 3]) -> (f64, f64) {
    let denom = (x[0] - x[1]) * (x[0] - x[2]) * (x[1] - x[2]);
    let a = (x[2] * (y[1] - y[0]) + x[1] * (y[0] - y[2]) + x[0] * (y[2] - y[1])) / denom;
    let b = (x[2] * x[2] * (y[0] - y[1])
        + x[1] * x[1] * (y[2] - y[0])
        + x[0] * x[0] * (y[1] - y[2]))
        / denom;
    if !(a > 0.0) || !a.is_finite() {
        return (x[1], y[1]);
    }
    let v = (-b / (2.0 * a)).clamp(x[0], x[2]);
    let c = y[1] - a * x[1] * x[1] - b * x[1];
    (v, a * v * v + b * v + c)
}

/// Find coherence dips inside `tau_window`: local minima of Re L below
/// `depth_threshold`, with parabolic sub-grid refinement of the center.
/// Depth is measured against a local baseline (the mean of the flanking
/// maxima between neighboring dips, or the window edges), so overlapping
/// slow modulation does not inflate dip depths.
pub fn find_dips(
    curve: &CoherenceCurve,
    tau_window: (f64, f64),
    depth_threshold: f64,
) -> Result<DipReport> {
    let tau = curve.tau_grid();
    if tau.len() != curve.values.len() {
        return Err(CoreError::GridMismatch(format!(
            "curve has {} values for {} time samples",
            curve.values.len(),
            tau.len()
        )));
    }
    for w in tau.windows(2) {
        if !(w[1] > w[0]) {
            return Err(CoreError::AnalysisInput(format!(
                "dip search requires a strictly increasing τ grid, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    let (lo, hi) = tau_window;
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(CoreError::AnalysisInput(format!(
            "τ window must be a finite non-empty interval, got [{lo}, {hi}]"
        )));
    }

    let idx: Vec<usize> = (0..tau.len())
        .filter(|&i| tau[i] >= lo && tau[i] <= hi)
        .collect();
    if idx.len() < 3 {
        return Ok(DipReport::default());
    }
    let x: Vec<f64> = idx.iter().map(|&i| tau[i]).collect();
    let y: Vec<f64> = idx.iter().map(|&i| curve.values[i].re).collect();

    let mut candidates = Vec::new();
    for p in 1..y.len() - 1 {
        if y[p] < depth_threshold && y[p] < y[p - 1] && y[p] <= y[p + 1] {
            candidates.push(p);
        }
    }

    let mut dips = Vec::new();
    for (ci, &p) in candidates.iter().enumerate() {
        let (center, floor) =
            parabolic_vertex([x[p - 1], x[p], x[p + 1]], [y[p - 1], y[p], y[p + 1]]);
        let left_edge = if ci == 0 { 0 } else { candidates[ci - 1] };
        let right_edge = if ci + 1 < candidates.len() {
            candidates[ci + 1]
        } else {
            y.len() - 1
        };
        let left_max = y[left_edge..=p].iter().fold(f64::MIN, |m, &v| m.max(v));
        let right_max = y[p..=right_edge].iter().fold(f64::MIN, |m, &v| m.max(v));
        let baseline = 0.5 * (left_max + right_max);
        let depth = (baseline - floor).clamp(0.0, 1.0);

        // Full width at half depth, by linear interpolation of the crossings.
        let level = baseline - depth / 2.0;
        let mut left_x = x[left_edge];
        for j in (left_edge..p).rev() {
            if y[j] >= level {
                let f = (level - y[j + 1]) / (y[j] - y[j + 1]);
                left_x = x[j + 1] + f * (x[j] - x[j + 1]);
                break;
            }
        }
        let mut right_x = x[right_edge];
        for j in p + 1..=right_edge {
            if y[j] >= level {
                let f = (level - y[j - 1]) / (y[j] - y[j - 1]);
                right_x = x[j - 1] + f * (x[j] - x[j - 1]);
                break;
            }
        }
        dips.push(Dip {
            center_us: center,
            depth,
            width_us: right_x - left_x,
        });
    }
    Ok(DipReport { dips })
}

// ---------------------------------------------------------------------------
// Least-squares fitting
// ---------------------------------------------------------------------------

/// A fitted parameter with its standard error from the local curvature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FittedParameter {
    pub value: f64,
    pub std_error: f64,
}

/// Outcome of a least-squares fit: named parameters, the residual norm
/// √Σr², a convergence flag, and the iteration count consumed.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub parameters: BTreeMap<String, FittedParameter>,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.parameters.get(name).map(|p| p.value)
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.parameters.get(name).map(|p| p.std_error)
    }
}

struct LsqOutcome {
    params: Vec<f64>,
    std_errors: Vec<f64>,
    residual_norm: f64,
    converged: bool,
    iterations: usize,
}

fn residual_vector<F>(model: &F, xs: &[f64], ys: &[f64], p: &[f64]) -> DVector<f64>
where
    F: Fn(&[f64], f64) -> f64,
{
    DVector::from_iterator(
        xs.len(),
        xs.iter().zip(ys).map(|(&x, &y)| model(p, x) - y),
    )
}

fn numerical_jacobian<F>(model: &F, xs: &[f64], ys: &[f64], p: &[f64]) -> DMatrix<f64>
where
    F: Fn(&[f64], f64) -> f64,
{
    let mut jac = DMatrix::zeros(xs.len(), p.len());
    for j in 0..p.len() {
        let h = 1e-6 * p[j].abs().max(1e-8);
        let mut pp = p.to_vec();
        let mut pm = p.to_vec();
        pp[j] += h;
        pm[j] -= h;
        let rp = residual_vector(model, xs, ys, &pp);
        let rm = residual_vector(model, xs, ys, &pm);
        for i in 0..xs.len() {
            jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Damped least squares: (JᵀJ + λ·diag JᵀJ)δ = −Jᵀr with multiplicative λ
/// control, numerical central-difference Jacobians, and standard errors from
/// the unit-weight covariance (JᵀJ)⁻¹·s² at the solution.
fn fit_least_squares<F>(model: &F, xs: &[f64], ys: &[f64], p0: &[f64]) -> LsqOutcome
where
    F: Fn(&[f64], f64) -> f64,
{
    let np = p0.len();
    let mut p = p0.to_vec();
    let mut r = residual_vector(model, xs, ys, &p);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = cost < 1e-300;
    let mut iterations = 0;

    while !converged && iterations < FIT_ITERATION_CAP {
        iterations += 1;
        let jac = numerical_jacobian(model, xs, ys, &p);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut stepped = false;
        loop {
            let mut damped = jtj.clone();
            for k in 0..np {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            if let Some(delta) = damped.lu().solve(&(-&jtr)) {
                let cand: Vec<f64> = (0..np).map(|k| p[k] + delta[k]).collect();
                let rc = residual_vector(model, xs, ys, &cand);
                let cc = rc.norm_squared();
                if cc.is_finite() && cc <= cost {
                    let rel_drop = (cost - cc) / cost.max(1e-300);
                    let rel_step =
                        delta.norm() / (1.0 + DVector::from_column_slice(&p).norm());
                    p = cand;
                    r = rc;
                    cost = cc;
                    lambda = (lambda / 3.0).max(1e-12);
                    stepped = true;
                    if rel_drop < FIT_RELATIVE_TOLERANCE || rel_step < FIT_RELATIVE_TOLERANCE {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
            if lambda > 1e14 {
                break;
            }
        }
        if !stepped {
            // λ exhausted: accept the current point as converged only if the
            // gradient has genuinely vanished.
            converged = jtr.amax() <= 1e-12 * (1.0 + cost);
            break;
        }
    }

    let dof = xs.len().saturating_sub(np);
    let mut std_errors = vec![0.0; np];
    if dof > 0 {
        let jac = numerical_jacobian(model, xs, ys, &p);
        let jtj = jac.transpose() * &jac;
        if let Some(cov) = jtj.try_inverse() {
            let s2 = cost / dof as f64;
            for k in 0..np {
                let v = cov[(k, k)] * s2;
                std_errors[k] = if v.is_finite() && v > 0.0 { v.sqrt() } else { 0.0 };
            }
        }
    }
    LsqOutcome {
        params: p,
        std_errors,
        residual_norm: cost.sqrt(),
        converged,
        iterations,
    }
}

fn named_result(
    outcome: LsqOutcome,
    names: &[&str],
    transform: impl Fn(&str, f64, f64) -> (f64, f64),
) -> FitResult {
    let mut parameters = BTreeMap::new();
    for (k, name) in names.iter().enumerate() {
        let (value, std_error) = transform(name, outcome.params[k], outcome.std_errors[k]);
        parameters.insert((*name).to_string(), FittedParameter { value, std_error });
    }
    FitResult {
        parameters,
        residual_norm: outcome.residual_norm,
        converged: outcome.converged,
        iterations: outcome.iterations,
    }
}

fn curve_fit_data(curve: &CoherenceCurve, amplitude_bounded: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    if curve.times.len() != curve.values.len() {
        return Err(CoreError::GridMismatch(format!(
            "curve has {} values for {} time samples",
            curve.values.len(),
            curve.times.len()
        )));
    }
    if curve.times.len() < MIN_FIT_POINTS {
        return Err(CoreError::AnalysisInput(format!(
            "fit requires at least {MIN_FIT_POINTS} samples, got {}",
            curve.times.len()
        )));
    }
    let ys: Vec<f64> = curve.values.iter().map(|v| v.re).collect();
    for (&t, &y) in curve.times.iter().zip(&ys) {
        if !t.is_finite() || !y.is_finite() {
            return Err(CoreError::AnalysisInput(
                "fit inputs must be finite".into(),
            ));
        }
        if amplitude_bounded && !(-1.1..=1.1).contains(&y) {
            return Err(CoreError::AnalysisInput(format!(
                "coherence value {y} outside [-1.1, 1.1]"
            )));
        }
    }
    Ok((curve.times.clone(), ys))
}

/// Coarse grid search for a decay constant: log-spaced candidates spanning
/// the sampled horizon, scored by sum of squared residuals.
fn grid_search_decay(
    xs: &[f64],
    ys: &[f64],
    model: impl Fn(f64, f64) -> f64, // (decay, x) -> prediction
) -> f64 {
    let span = xs.last().unwrap() - xs[0];
    let mut best = (f64::INFINITY, span);
    for k in 0..=60 {
        let t = span * 10f64.powf(-2.5 + 4.0 * k as f64 / 60.0);
        let sse: f64 = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| (model(t, x) - y).powi(2))
            .sum();
        if sse < best.0 {
            best = (sse, t);
        }
    }
    best.1
}

/// How the stretched-exponential exponent is treated during fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StretchExponent {
    /// Exponent held at the given value; only amplitude and T₂ float.
    Fixed(f64),
    /// Exponent floats alongside amplitude and T₂.
    Free,
}

/// Fit A·exp[−(t/T₂)ⁿ] against the curve's total-time axis with the cubic
/// exponent used for echo-decay envelopes.
pub fn fit_stretched_exp(curve: &CoherenceCurve) -> Result<FitResult> {
    fit_stretched_exp_with(curve, StretchExponent::Fixed(3.0))
}

/// Stretched-exponential fit with a caller-controlled exponent treatment.
/// A flat curve has no decay to fit: it reports the T₂ → ∞ sentinel with
/// `converged = false` rather than pretending a timescale was measured.
pub fn fit_stretched_exp_with(
    curve: &CoherenceCurve,
    exponent: StretchExponent,
) -> Result<FitResult> {
    let (xs, ys) = curve_fit_data(curve, true)?;
    if let StretchExponent::Fixed(n) = exponent {
        if !n.is_finite() || n <= 0.0 {
            return Err(CoreError::AnalysisInput(format!(
                "stretched exponent must be positive, got {n}"
            )));
        }
    }

    let spread = ys.iter().fold(f64::MIN, |m, &v| m.max(v))
        - ys.iter().fold(f64::MAX, |m, &v| m.min(v));
    if spread <= 1e-9 {
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let mut parameters = BTreeMap::new();
        parameters.insert(
            "amplitude".to_string(),
            FittedParameter { value: mean, std_error: 0.0 },
        );
        parameters.insert(
            "t2_us".to_string(),
            FittedParameter { value: f64::INFINITY, std_error: 0.0 },
        );
        let n0 = match exponent {
            StretchExponent::Fixed(n) => n,
            StretchExponent::Free => 3.0,
        };
        parameters.insert(
            "exponent".to_string(),
            FittedParameter { value: n0, std_error: 0.0 },
        );
        return Ok(FitResult {
            parameters,
            residual_norm: 0.0,
            converged: false,
            iterations: 0,
        });
    }

    let a0 = ys[0];
    match exponent {
        StretchExponent::Fixed(n) => {
            let t0 = grid_search_decay(&xs, &ys, |t, x| a0 * (-(x / t).powf(n)).exp());
            let model = move |p: &[f64], x: f64| p[0] * (-(x / p[1].abs()).powf(n)).exp();
            let out = fit_least_squares(&model, &xs, &ys, &[a0, t0]);
            let mut result = named_result(out, &["amplitude", "t2_us"], |name, v, e| {
                if name == "t2_us" {
                    (v.abs(), e)
                } else {
                    (v, e)
                }
            });
            result.parameters.insert(
                "exponent".to_string(),
                FittedParameter { value: n, std_error: 0.0 },
            );
            Ok(result)
        }
        StretchExponent::Free => {
            let t0 = grid_search_decay(&xs, &ys, |t, x| a0 * (-(x / t).powi(3)).exp());
            let model = |p: &[f64], x: f64| p[0] * (-(x / p[1].abs()).powf(p[2].abs())).exp();
            let out = fit_least_squares(&model, &xs, &ys, &[a0, t0, 3.0]);
            Ok(named_result(
                out,
                &["amplitude", "t2_us", "exponent"],
                |name, v, e| {
                    if name == "amplitude" {
                        (v, e)
                    } else {
                        (v.abs(), e)
                    }
                },
            ))
        }
    }
}

/// Fit A·exp[−(t/T₂*)²] + c to a free-induction decay.
pub fn fit_gaussian_fid(curve: &CoherenceCurve) -> Result<FitResult> {
    let (xs, ys) = curve_fit_data(curve, false)?;
    let tail = ys[ys.len() - 3..].iter().sum::<f64>() / 3.0;
    let a0 = ys[0] - tail;
    let t0 = grid_search_decay(&xs, &ys, |t, x| a0 * (-(x / t).powi(2)).exp() + tail);
    let model = |p: &[f64], x: f64| p[0] * (-(x / p[1].abs()).powi(2)).exp() + p[2];
    let out = fit_least_squares(&model, &xs, &ys, &[a0, t0, tail]);
    Ok(named_result(
        out,
        &["amplitude", "t2_star_us", "offset"],
        |name, v, e| if name == "t2_star_us" { (v.abs(), e) } else { (v, e) },
    ))
}

/// Fit a Lorentzian line c + A·w²/((f−f₀)² + w²) to a spectrum and report
/// the full width at half maximum 2w.
pub fn fit_lorentzian(spec: &Spectrum) -> Result<FitResult> {
    let xs = &spec.frequencies_khz;
    let ys = &spec.magnitudes;
    if xs.len() != ys.len() {
        return Err(CoreError::GridMismatch(format!(
            "spectrum has {} magnitudes for {} frequency bins",
            ys.len(),
            xs.len()
        )));
    }
    if xs.len() < MIN_FIT_POINTS {
        return Err(CoreError::AnalysisInput(format!(
            "fit requires at least {MIN_FIT_POINTS} samples, got {}",
            xs.len()
        )));
    }
    let (imax, &peak) = ys
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty spectrum");
    let floor = ys.iter().fold(f64::MAX, |m, &v| m.min(v));
    let a0 = peak - floor;
    let f0 = xs[imax];
    // Half-maximum crossing distance seeds the linewidth.
    let mut w0 = (xs[xs.len() - 1] - xs[0]) / 10.0;
    for (j, &v) in ys.iter().enumerate().skip(imax) {
        if v <= floor + a0 / 2.0 {
            w0 = (xs[j] - f0).max(xs[1] - xs[0]);
            break;
        }
    }
    let model = |p: &[f64], x: f64| {
        let w2 = p[2] * p[2];
        p[3] + p[0] * w2 / ((x - p[1]).powi(2) + w2)
    };
    let out = fit_least_squares(&model, xs, ys, &[a0, f0, w0, floor]);
    let mut result = named_result(
        out,
        &["amplitude", "center_khz", "halfwidth", "offset"],
        |_, v, e| (v, e),
    );
    let hw = result.parameters.remove("halfwidth").expect("fitted halfwidth");
    result.parameters.insert(
        "fwhm_khz".to_string(),
        FittedParameter {
            value: 2.0 * hw.value.abs(),
            std_error: 2.0 * hw.std_error,
        },
    );
    Ok(result)
}

/// Fit A·exp(−t/T)·cos(2πft + φ) + c to a driven-oscillation trace. The
/// frequency and phase are seeded from the dominant bin of a zero-padded
/// transform, so the optimizer starts inside the correct basin.
pub fn fit_decaying_cosine(curve: &CoherenceCurve) -> Result<FitResult> {
    let (xs, ys) = curve_fit_data(curve, false)?;
    let dt = uniform_spacing(&xs)?;
    let n = xs.len();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = ys.iter().map(|&y| Complex64::new(y - mean, 0.0)).collect();
    let n_pad = n * 8;
    buf.resize(n_pad, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n_pad).process(&mut buf);
    let half = n_pad / 2;
    let (kmax, _) = buf[1..=half]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
        .expect("spectrum has interior bins");
    let k = kmax + 1;
    let f0 = k as f64 / (n_pad as f64 * dt);
    // cos(2πft+φ) contributes (A n_eff/2)·e^{iφ} to the positive bin (the
    // grid starts at xs[0], so rotate the bin phase back to t = 0).
    let phi0 = (buf[k] * Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * f0 * xs[0])).arg();
    let amp0 = ys.iter().fold(f64::MIN, |m, &v| m.max(v)) - ys.iter().fold(f64::MAX, |m, &v| m.min(v));
    let span = xs[n - 1] - xs[0];
    let model = |p: &[f64], x: f64| {
        p[0] * (-x / p[1].abs()).exp() * (2.0 * std::f64::consts::PI * p[2] * x + p[3]).cos() + p[4]
    };
    let mut best: Option<LsqOutcome> = None;
    for t0 in [span / 10.0, span / 3.0, span] {
        let out = fit_least_squares(&model, &xs, &ys, &[amp0 / 2.0, t0, f0, phi0, mean]);
        if best.as_ref().map_or(true, |b| out.residual_norm < b.residual_norm) {
            best = Some(out);
        }
    }
    Ok(named_result(
        best.expect("at least one decay seed"),
        &["amplitude", "decay_us", "frequency_mhz", "phase_rad", "offset"],
        |name, v, e| match name {
            "decay_us" | "frequency_mhz" => (v.abs(), e),
            _ => (v, e),
        },
    ))
}

/// Fit A·exp(−t/T₁) + c to a relaxation trace.
pub fn fit_exponential(curve: &CoherenceCurve) -> Result<FitResult> {
    let (xs, ys) = curve_fit_data(curve, false)?;
    let tail = ys[ys.len() - 3..].iter().sum::<f64>() / 3.0;
    let a0 = ys[0] - tail;
    let t0 = grid_search_decay(&xs, &ys, |t, x| a0 * (-x / t).exp() + tail);
    let model = |p: &[f64], x: f64| p[0] * (-x / p[1].abs()).exp() + p[2];
    let out = fit_least_squares(&model, &xs, &ys, &[a0, t0, tail]);
    Ok(named_result(
        out,
        &["amplitude", "t1_us", "offset"],
        |name, v, e| if name == "t1_us" { (v.abs(), e) } else { (v, e) },
    ))
}

// ---------------------------------------------------------------------------
// Nuclear dephasing estimate
// ---------------------------------------------------------------------------

/// Second-moment dephasing-time estimate for the bath nucleus of `species`
/// closest to the defect: T₂* = 1/√(Σⱼ cⱼ²) over its same-species partners,
/// with cⱼ the Frobenius-normalized dipolar coupling strength ‖Tⱼ‖_F/√6.
/// Returns µs; a nucleus with no same-species partner dephases infinitely
/// slowly on this estimate and reports the ∞ sentinel.
pub fn nuclear_t2_estimate(lat: &BathLattice, species: &str) -> Result<f64> {
    let members: Vec<usize> = (0..lat.sites.len())
        .filter(|&i| lat.sites[i].species.label == species)
        .collect();
    let Some(&designated) = members
        .iter()
        .min_by(|&&a, &&b| {
            lat.sites[a]
                .position
                .norm()
                .total_cmp(&lat.sites[b].position.norm())
        })
    else {
        return Err(CoreError::AnalysisInput(format!(
            "no spin-active '{species}' nucleus in the bath"
        )));
    };
    let mut sum_sq_khz = 0.0;
    for &j in &members {
        if j == designated {
            continue;
        }
        let coupling = bath_coupling(designated, &lat.sites[designated], j, &lat.sites[j])?;
        let c_khz = coupling.tensor_hz.norm() / 6f64.sqrt() / 1e3;
        sum_sq_khz += c_khz * c_khz;
    }
    if sum_sq_khz == 0.0 {
        return Ok(f64::INFINITY);
    }
    // RMS coupling in kHz = cycles/ms, so the inverse is in ms.
    Ok(1e3 / sum_sq_khz.sqrt())
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cce::{cluster_coherence, CurveMetadata};
    use crate::dynamics::{filter_center_frequency, make_sequence, SequenceKind};
    use crate::hamiltonian::{GTensor, MagneticField};
    use crate::lattice::{build_supercell, load_crystal_definition, BathSpin, SpinSpecies};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn fid_curve(times: Vec<f64>, values: Vec<f64>) -> CoherenceCurve {
        let seq = make_sequence(SequenceKind::Fid, 0, 1.0).unwrap();
        CoherenceCurve {
            values: values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
            times,
            non_converged: vec![],
            metadata: CurveMetadata::for_sequence(&seq),
        }
    }

    fn forced_silicon() -> BathSpin {
        BathSpin {
            species: Arc::new(SpinSpecies {
                label: "Si".into(),
                gamma_mhz_per_t: -8.465,
                spin_quantum_number: 0.5,
                natural_abundance: 0.047,
            }),
            position: Vector3::new(1.0, 1.0, 1.0) * (3.6 / 3f64.sqrt()),
        }
    }

    fn silicon_cpmg_curve(n_pulses: usize) -> CoherenceCurve {
        let g = GTensor::cerium_ground_doublet();
        let b = MagneticField::along_z(0.097);
        let seq = make_sequence(SequenceKind::Cpmg, n_pulses, 1.0).unwrap();
        let grid: Vec<f64> = (0..=130).map(|i| 0.30 + i as f64 * 0.005).collect();
        let spins = vec![forced_silicon()];
        let cc = cluster_coherence(&spins, &[0], &seq, &grid, &g, &b, 1).unwrap();
        CoherenceCurve {
            times: grid.iter().map(|t| t * 2.0 * n_pulses as f64).collect(),
            values: cc.values,
            non_converged: vec![],
            metadata: CurveMetadata::for_sequence(&seq),
        }
    }

    #[test]
    fn pure_tone_spectrum_peaks_at_the_tone() {
        // 200 kHz tone sampled over 100 µs: the peak must sit within one bin
        // for both windows.
        let n = 512;
        let dt = 100.0 / n as f64;
        let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let values: Vec<f64> = times
            .iter()
            .map(|t| (2.0 * std::f64::consts::PI * 0.2 * t).cos())
            .collect();
        let curve = fid_curve(times, values);
        for window in [SpectrumWindow::Rect, SpectrumWindow::Hann] {
            let spec = fft_spectrum(&curve, window, 1).unwrap();
            let bin = spec.frequencies_khz[1] - spec.frequencies_khz[0];
            let (imax, _) = spec
                .magnitudes
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            assert!(
                (spec.frequencies_khz[imax] - 200.0).abs() <= bin + 1e-9,
                "{} window peak at {} kHz",
                window.name(),
                spec.frequencies_khz[imax]
            );
        }
    }

    #[test]
    fn two_tone_spectrum_recovers_both_peaks_within_one_bin() {
        let n = 1024;
        let dt = 0.1;
        let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let values: Vec<f64> = times
            .iter()
            .map(|t| {
                let w = 2.0 * std::f64::consts::PI;
                (w * 0.12 * t).cos() + 0.6 * (w * 0.2 * t).cos()
            })
            .collect();
        let curve = fid_curve(times, values);
        let spec = fft_spectrum(&curve, SpectrumWindow::Rect, 2).unwrap();
        let bin = spec.frequencies_khz[1] - spec.frequencies_khz[0];
        let peaks = find_peaks(&spec, spec.magnitudes.iter().cloned().fold(0.0, f64::max) / 4.0);
        assert!(peaks.len() >= 2, "found {} peaks", peaks.len());
        // Sorted by magnitude: the full-amplitude 120 kHz tone leads.
        assert!((peaks[0].frequency_khz - 120.0).abs() <= bin + 1e-9);
        assert!((peaks[1].frequency_khz - 200.0).abs() <= bin + 1e-9);
        assert!(peaks[0].magnitude >= peaks[1].magnitude);
    }

    #[test]
    fn empty_and_featureless_spectra_yield_no_peaks() {
        let empty = Spectrum {
            frequencies_khz: vec![],
            magnitudes: vec![],
            window: SpectrumWindow::Rect,
        };
        assert!(find_peaks(&empty, 0.0).is_empty());
        let flat = Spectrum {
            frequencies_khz: (0..16).map(|k| k as f64).collect(),
            magnitudes: vec![1.0; 16],
            window: SpectrumWindow::Rect,
        };
        assert!(find_peaks(&flat, 1e-12).is_empty());
    }

    #[test]
    fn even_signal_spectrum_has_zero_phase() {
        // x[i] = cos(2πk i/n) is even under the DFT's circular reflection, so
        // every bin must be purely real up to roundoff.
        let n = 256;
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        let values: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 7.0 * i as f64 / n as f64).cos())
            .collect();
        let curve = fid_curve(times, values);
        let (_, bins) = fft_bins(&curve, SpectrumWindow::Rect, 1).unwrap();
        let max_mag = bins.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let max_im = bins.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        assert!(max_im < 1e-9 * max_mag, "imaginary residue {max_im}");
    }

    #[test]
    fn rect_window_spectrum_conserves_parseval_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.25).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mean = values.iter().sum::<f64>() / n as f64;
        let energy_time: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        let curve = fid_curve(times, values);
        for pad in [1usize, 4] {
            let spec = fft_spectrum(&curve, SpectrumWindow::Rect, pad).unwrap();
            let n_pad = n * pad;
            let half = n_pad / 2;
            let mut energy_freq = spec.magnitudes[0].powi(2) + spec.magnitudes[half].powi(2);
            for k in 1..half {
                energy_freq += 2.0 * spec.magnitudes[k].powi(2);
            }
            energy_freq /= n_pad as f64;
            assert!(
                (energy_freq - energy_time).abs() < 1e-6 * energy_time,
                "pad {pad}: {energy_freq} vs {energy_time}"
            );
        }
    }

    #[test]
    fn spectrum_rejects_malformed_inputs() {
        let good_times: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let good: Vec<f64> = good_times.iter().map(|t| (0.3 * t).cos()).collect();
        let curve = fid_curve(good_times.clone(), good.clone());
        assert!(fft_spectrum(&curve, SpectrumWindow::Rect, 0).is_err());

        let short = fid_curve(good_times[..5].to_vec(), good[..5].to_vec());
        assert!(fft_spectrum(&short, SpectrumWindow::Rect, 1).is_err());

        let mut warped = good_times;
        warped[8] += 0.2;
        let nonuniform = fid_curve(warped, good);
        assert!(fft_spectrum(&nonuniform, SpectrumWindow::Rect, 1).is_err());
    }

    #[test]
    fn flat_curve_has_no_dips() {
        let times: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        let curve = fid_curve(times, vec![1.0; 100]);
        let report = find_dips(&curve, (0.0, 1.0), 0.9).unwrap();
        assert!(report.dips.is_empty());
    }

    #[test]
    fn dip_refinement_recovers_an_off_grid_center() {
        // Gaussian dip centered between grid points: parabolic refinement
        // must land within a tenth of the grid step, and the depth must be
        // measured against the unit baseline.
        let times: Vec<f64> = (0..200).map(|i| i as f64 * 0.01).collect();
        let center = 1.0037;
        let values: Vec<f64> = times
            .iter()
            .map(|&t| 1.0 - 0.5 * (-((t - center) / 0.08).powi(2)).exp())
            .collect();
        let curve = fid_curve(times, values);
        let report = find_dips(&curve, (0.5, 1.5), 0.9).unwrap();
        assert_eq!(report.dips.len(), 1);
        let dip = report.dips[0];
        assert!((dip.center_us - center).abs() < 0.001, "center {}", dip.center_us);
        assert!((dip.depth - 0.5).abs() < 0.01, "depth {}", dip.depth);
        assert!(dip.width_us > 0.05 && dip.width_us < 0.3, "width {}", dip.width_us);
    }

    #[test]
    fn silicon_cpmg_dip_sits_at_half_the_larmor_period() {
        // A ²⁹Si nucleus 3.6 Å from the defect at 0.097 T precesses at
        // 821 kHz; the first CPMG-1 coherence dip sits where the pulse
        // spacing matches half its precession period, ≈ 0.609 µs.
        let curve = silicon_cpmg_curve(1);
        let report = find_dips(&curve, (0.30, 0.95), 0.9).unwrap();
        assert_eq!(report.dips.len(), 1, "dips: {:?}", report.dips);
        let dip = report.dips[0];
        assert!(
            (dip.center_us - 0.609).abs() / 0.609 < 0.10,
            "dip center {} µs",
            dip.center_us
        );
        // Cross-consistency with the sequence filter: the dip's center
        // frequency must match the nuclear Larmor frequency within 10%.
        let seq = make_sequence(SequenceKind::Cpmg, 1, dip.center_us).unwrap();
        let f_filter = filter_center_frequency(&seq).unwrap();
        let larmor = 8.465 * 0.097 * 1e3;
        assert!(
            (f_filter - larmor).abs() / larmor < 0.10,
            "filter {f_filter} kHz vs Larmor {larmor} kHz"
        );
    }

    #[test]
    fn cpmg_five_splits_the_silicon_dip_into_five() {
        let curve = silicon_cpmg_curve(5);
        let report = find_dips(&curve, (0.30, 0.95), 0.9).unwrap();
        assert_eq!(report.dips.len(), 5, "dips: {:?}", report.dips);
        // The middle dip of the split structure stays at the CPMG-1 center.
        assert!(
            (report.dips[2].center_us - 0.609).abs() / 0.609 < 0.10,
            "middle dip at {}",
            report.dips[2].center_us
        );
        for d in &report.dips {
            assert!(d.center_us >= 0.30 && d.center_us <= 0.95);
            assert!(d.depth > 0.0 && d.depth <= 1.0);
        }
    }

    #[test]
    fn stretched_exponential_fit_recovers_the_echo_decay_time() {
        let t2 = 124.0;
        let taus: Vec<f64> = (0..=80).map(|i| i as f64).collect();
        let times: Vec<f64> = taus.iter().map(|t| 2.0 * t).collect();
        let values: Vec<f64> = times.iter().map(|&x| (-(x / t2).powi(3)).exp()).collect();
        let seq = make_sequence(SequenceKind::Hahn, 1, 1.0).unwrap();
        let curve = CoherenceCurve {
            values: values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
            times,
            non_converged: vec![],
            metadata: CurveMetadata::for_sequence(&seq),
        };
        let fit = fit_stretched_exp(&curve).unwrap();
        assert!(fit.converged);
        let t2_fit = fit.value("t2_us").unwrap();
        assert!((t2_fit - t2).abs() / t2 < 0.01, "T2 {t2_fit}");
        assert!((fit.value("amplitude").unwrap() - 1.0).abs() < 0.01);
        assert_eq!(fit.value("exponent").unwrap(), 3.0);
        assert!(fit.iterations <= FIT_ITERATION_CAP);
    }

    #[test]
    fn free_exponent_variant_recovers_a_noncubic_stretch() {
        let times: Vec<f64> = (0..=80).map(|i| 2.0 * i as f64).collect();
        let values: Vec<f64> = times
            .iter()
            .map(|&x| (-(x / 124.0).powf(2.6)).exp())
            .collect();
        let curve = fid_curve(times, values);
        let fit = fit_stretched_exp_with(&curve, StretchExponent::Free).unwrap();
        assert!(fit.converged);
        assert!((fit.value("exponent").unwrap() - 2.6).abs() < 0.02);
        assert!((fit.value("t2_us").unwrap() - 124.0).abs() / 124.0 < 0.01);
    }

    #[test]
    fn constant_curve_reports_the_infinite_t2_sentinel() {
        let times: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let curve = fid_curve(times, vec![1.0; 20]);
        let fit = fit_stretched_exp(&curve).unwrap();
        assert!(!fit.converged, "a flat line has no decay timescale");
        assert!(fit.value("t2_us").unwrap().is_infinite());
        assert!((fit.value("amplitude").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_stretched_exp_fits_recover_the_median_decay_time() {
        let t2 = 124.0;
        let times: Vec<f64> = (0..=60).map(|i| 2.5 * i as f64).collect();
        let clean: Vec<f64> = times.iter().map(|&x| (-(x / t2).powi(3)).exp()).collect();
        let mut recovered = Vec::new();
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy: Vec<f64> = clean
                .iter()
                .map(|&v| v + rng.gen_range(-0.05..0.05))
                .collect();
            let curve = fid_curve(times.clone(), noisy);
            let fit = fit_stretched_exp(&curve).unwrap();
            recovered.push(fit.value("t2_us").unwrap());
        }
        recovered.sort_by(f64::total_cmp);
        let median = recovered[recovered.len() / 2];
        assert!(
            (median - t2).abs() / t2 < 0.05,
            "median T2 {median} over 50 noisy fits"
        );
    }

    #[test]
    fn gaussian_fid_fit_recovers_t2_star_and_its_linewidth_scale() {
        let t2_star = 0.31; // µs
        let times: Vec<f64> = (0..=60).map(|i| i as f64 * 0.02).collect();
        let values: Vec<f64> = times
            .iter()
            .map(|&t| (-(t / t2_star).powi(2)).exp())
            .collect();
        let curve = fid_curve(times, values);
        let fit = fit_gaussian_fid(&curve).unwrap();
        assert!(fit.converged);
        let t_fit = fit.value("t2_star_us").unwrap();
        assert!((t_fit - t2_star).abs() / t2_star < 0.01, "T2* {t_fit}");
        // The Fourier-conjugate linewidth 2√(ln2)/(π·T₂*) of the fitted decay
        // lands at ≈ 1.7 MHz — the same scale as a ~2 MHz resonance line.
        let fwhm_mhz = 2.0 * (2f64.ln()).sqrt() / (std::f64::consts::PI * t_fit);
        assert!(
            (1.5..1.9).contains(&fwhm_mhz),
            "implied linewidth {fwhm_mhz} MHz"
        );
    }

    #[test]
    fn lorentzian_fit_recovers_the_resonance_linewidth() {
        let (center, fwhm) = (5000.0, 2200.0);
        let hw = fwhm / 2.0;
        let freqs: Vec<f64> = (0..=240).map(|i| i as f64 * 50.0).collect();
        let mags: Vec<f64> = freqs
            .iter()
            .map(|&f| 0.1 + 0.9 * hw * hw / ((f - center).powi(2) + hw * hw))
            .collect();
        let spec = Spectrum {
            frequencies_khz: freqs,
            magnitudes: mags,
            window: SpectrumWindow::Rect,
        };
        let fit = fit_lorentzian(&spec).unwrap();
        assert!(fit.converged);
        assert!((fit.value("center_khz").unwrap() - center).abs() / center < 0.01);
        assert!((fit.value("fwhm_khz").unwrap() - fwhm).abs() / fwhm < 0.01);
    }

    #[test]
    fn decaying_cosine_fit_recovers_rabi_frequency_and_decay() {
        let (f_mhz, decay) = (5.6, 2.0);
        let times: Vec<f64> = (0..500).map(|i| i as f64 * 0.008).collect();
        let values: Vec<f64> = times
            .iter()
            .map(|&t| {
                0.45 * (-t / decay).exp() * (2.0 * std::f64::consts::PI * f_mhz * t + 0.4).cos()
                    + 0.5
            })
            .collect();
        let curve = fid_curve(times, values);
        let fit = fit_decaying_cosine(&curve).unwrap();
        assert!(fit.converged);
        assert!(
            (fit.value("frequency_mhz").unwrap() - f_mhz).abs() / f_mhz < 0.01,
            "f {}",
            fit.value("frequency_mhz").unwrap()
        );
        assert!(
            (fit.value("decay_us").unwrap() - decay).abs() / decay < 0.01,
            "decay {}",
            fit.value("decay_us").unwrap()
        );
        assert!((fit.value("offset").unwrap() - 0.5).abs() < 0.01);
    }

    #[test]
    fn exponential_fit_recovers_the_relaxation_time() {
        let t1 = 610.0;
        let times: Vec<f64> = (0..=80).map(|i| i as f64 * 25.0).collect();
        let values: Vec<f64> = times.iter().map(|&t| 0.8 * (-t / t1).exp() + 0.1).collect();
        let curve = fid_curve(times, values);
        let fit = fit_exponential(&curve).unwrap();
        assert!(fit.converged);
        assert!((fit.value("t1_us").unwrap() - t1).abs() / t1 < 0.01);
        assert!((fit.value("offset").unwrap() - 0.1).abs() < 0.01);
    }

    #[test]
    fn fits_are_invariant_under_time_rescaling() {
        // Rescaling the time axis by 1000 (µs → ns) must rescale the fitted
        // timescale by exactly the same factor.
        let times_us: Vec<f64> = (0..=80).map(|i| 2.0 * i as f64).collect();
        let values: Vec<f64> = times_us
            .iter()
            .map(|&x| (-(x / 124.0).powi(3)).exp())
            .collect();
        let in_us = fid_curve(times_us.clone(), values.clone());
        let in_ns = fid_curve(times_us.iter().map(|t| t * 1e3).collect(), values);
        let fit_us = fit_stretched_exp(&in_us).unwrap();
        let fit_ns = fit_stretched_exp(&in_ns).unwrap();
        let t_us = fit_us.value("t2_us").unwrap();
        let t_ns = fit_ns.value("t2_us").unwrap();
        assert!(
            (t_ns / 1e3 - t_us).abs() / t_us < 1e-6,
            "{t_us} µs vs {t_ns} ns"
        );
    }

    #[test]
    fn fit_rejects_out_of_range_coherence_and_short_curves() {
        let times: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut values = vec![0.5; 10];
        values[4] = 1.5;
        let curve = fid_curve(times.clone(), values);
        assert!(fit_stretched_exp(&curve).is_err());
        let short = fid_curve(times[..4].to_vec(), vec![1.0; 4]);
        assert!(fit_stretched_exp(&short).is_err());
    }

    #[test]
    fn yttrium_dephasing_estimate_lands_in_the_tens_of_milliseconds() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/yso.toml");
        let def = load_crystal_definition(
            &std::fs::read_to_string(path).expect("shipped crystal definition"),
        )
        .unwrap();
        let lat = build_supercell(&def, Vector3::new(2.0, 2.0, 2.0), 0, 1).unwrap();
        let t2_us = nuclear_t2_estimate(&lat, "Y").unwrap();
        assert!(
            (10_000.0..200_000.0).contains(&t2_us),
            "Y T2* estimate {t2_us} µs"
        );
    }

    #[test]
    fn dilute_silicon_estimates_scatter_more_than_dense_yttrium() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/yso.toml");
        let def = load_crystal_definition(
            &std::fs::read_to_string(path).expect("shipped crystal definition"),
        )
        .unwrap();
        let mut si = Vec::new();
        let mut y = Vec::new();
        for seed in 1..=8u64 {
            let lat = build_supercell(&def, Vector3::new(3.0, 3.0, 3.0), 0, seed).unwrap();
            si.push(nuclear_t2_estimate(&lat, "Si").unwrap());
            y.push(nuclear_t2_estimate(&lat, "Y").unwrap());
        }
        // The Y sublattice is fully occupied, so its estimate is seed-free.
        for v in &y {
            assert_eq!(*v, y[0]);
        }
        si.sort_by(f64::total_cmp);
        let median = si[si.len() / 2];
        assert!(
            (1_000.0..100_000.0).contains(&median),
            "Si median {median} µs over seeds: {si:?}"
        );
        // Isotopic dilution makes the silicon estimate realization-dependent.
        assert!(
            si[si.len() - 1] / si[0] > 1.2,
            "Si spread {si:?} vs Y {:.1}",
            y[0]
        );
    }

    #[test]
    fn lone_nucleus_reports_the_infinite_dephasing_sentinel() {
        let si = forced_silicon();
        let lat = BathLattice {
            sites: vec![si],
            lattice_sites: vec![],
            defect_position: Vector3::zeros(),
            box_extent: Vector3::new(1.0, 1.0, 1.0),
            seed: 0,
        };
        assert!(nuclear_t2_estimate(&lat, "Si").unwrap().is_infinite());
        assert!(nuclear_t2_estimate(&lat, "Y").is_err());
    }
}
