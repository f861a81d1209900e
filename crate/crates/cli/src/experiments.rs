//! The named experiments: each one drives lattice generation → conditional
//! Hamiltonians → cluster expansion → signal analysis for one physical
//! question, and emits its data files through a locked, manifested run
//! directory.
//!
//! All experiments share the same pipeline skeleton: build the isotope-
//! realized bath for each ensemble ion, evaluate the coherence on the
//! configured pulse-interval grid, average, then hand the curve to the
//! analysis stage named by the experiment.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::Result;
use nalgebra::Vector3;
use serde_json::json;
use spindec_core::analysis::{
    fft_spectrum, find_dips, find_peaks, fit_gaussian_fid, fit_stretched_exp_with,
    nuclear_t2_estimate, SpectrumWindow, StretchExponent,
};
use spindec_core::cce::{
    cluster_coherence_with, enumerate_clusters, ensemble_average, expansion_coherence,
    ClusterSet, CoherenceCurve,
};
use spindec_core::dynamics::{make_sequence, noisy_cluster_coherence, PulseSequence, SequenceKind};
use spindec_core::hamiltonian::{GTensor, MagneticField};
use spindec_core::lattice::{
    build_supercell, lattice_sites_within, load_crystal_definition, occupancy_distribution,
    sites_within, BathLattice, BathSpin, CrystalDefinition, MIN_SITE_SEPARATION_ANGSTROM,
};

use crate::config::{ConfigError, ExperimentConfig};
use crate::output::{
    dips_value, execute_run, fit_value, fmt_f64, read_curve, FileFormat, RunManifest,
};

/// Depth threshold separating a decoupling dip from ripple: dips are reported
/// where the (baseline-referenced) trace falls below this level.
pub const DIP_DEPTH_THRESHOLD: f64 = 0.9;

/// Radius of the occupancy statistic's neighborhood (Å): the shell of silicon
/// sites whose hyperfine coupling is strong enough to matter for single-spin
/// sensing.
pub const OCCUPANCY_RADIUS_ANGSTROM: f64 = 6.0;

/// The nearest silicon coordination shell is every site within 10% of the
/// minimum silicon distance. In the shipped crystal that window spans the
/// four closest sites (3.46–3.78 Å), which sit well apart from the next
/// site at 4.23 Å; a fixed absolute tolerance would split this group.
pub const NEAREST_SHELL_WINDOW: f64 = 1.10;

/// |L̃| below this is treated as a vanishing tilde divisor and the grid point
/// is flagged instead of divided (matches the expansion engine's guard).
const TILDE_GUARD: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Shared simulation context
// ---------------------------------------------------------------------------

/// Everything resolved once per run: validated config, its hash, the loaded
/// crystal, and the field/g-tensor operators.
pub struct SimContext {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub crystal: CrystalDefinition,
    pub g: GTensor,
    pub field: MagneticField,
}

impl SimContext {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let text = fs::read_to_string(&cfg.crystal_file).map_err(|e| {
            ConfigError(format!(
                "crystal_file: cannot read {}: {e}",
                cfg.crystal_file.display()
            ))
        })?;
        let crystal =
            load_crystal_definition(&text).map_err(|e| ConfigError(format!("crystal_file: {e}")))?;
        let d = Vector3::from(cfg.field.direction);
        let field = MagneticField::new(cfg.field.magnitude_t, d / d.norm())
            .map_err(|e| ConfigError(format!("field: {e}")))?;
        Ok(SimContext {
            cfg: cfg.clone(),
            hash: cfg.hash(),
            crystal,
            g: GTensor::cerium_ground_doublet(),
            field,
        })
    }

    /// Same run resolved with silicon removed and the noise channel off: the
    /// reference against which silicon-induced modulation is isolated.
    fn silicon_free_reference(&self) -> SimContext {
        let mut cfg = self.cfg.clone();
        cfg.overrides.force_silicon_at_angstrom = None;
        cfg.overrides.clear_silicon = true;
        cfg.lindblad = None;
        SimContext {
            cfg,
            // The reference belongs to the same run: keep the primary hash.
            hash: self.hash.clone(),
            crystal: self.crystal.clone(),
            g: self.g.clone(),
            field: self.field.clone(),
        }
    }

    fn supercell(&self, seed: u64) -> Result<BathLattice> {
        build_supercell(
            &self.crystal,
            Vector3::from(self.cfg.bath.extent_nm),
            self.cfg.bath.defect_site_index,
            seed,
        )
        .map_err(|e| ConfigError(format!("bath: {e}")).into())
    }

    /// The bath spin list for one isotope realization, with overrides
    /// applied, plus the index of the target silicon (forced spin if present,
    /// otherwise the nearest spin-active Si).
    fn bath_spins(&self, seed: u64) -> Result<(Vec<BathSpin>, Option<usize>)> {
        let lat = self.supercell(seed)?;
        let mut spins = sites_within(&lat, self.cfg.bath.radius_nm * 10.0, None);
        if self.cfg.overrides.clear_silicon {
            spins.retain(|s| s.species.label != "Si");
        }
        if let Some(pos) = self.cfg.overrides.force_silicon_at_angstrom {
            let p = Vector3::from(pos);
            // The forced nucleus replaces whatever the isotope draw put on
            // that site, so it is never double-counted.
            spins.retain(|s| (s.position - p).norm() > MIN_SITE_SEPARATION_ANGSTROM);
            let si = self.crystal.species_table.get("Si").cloned().ok_or_else(|| {
                ConfigError(
                    "overrides.force_silicon_at_angstrom: the crystal defines no Si species"
                        .into(),
                )
            })?;
            spins.push(BathSpin {
                species: si,
                position: p,
            });
            let target = Some(spins.len() - 1);
            return Ok((spins, target));
        }
        let target = spins
            .iter()
            .enumerate()
            .filter(|(_, s)| s.species.label == "Si")
            .min_by(|a, b| a.1.position.norm().total_cmp(&b.1.position.norm()))
            .map(|(i, _)| i);
        Ok((spins, target))
    }

    /// Coherence of one isotope realization on the configured τ grid.
    fn simulate(&self, seq: &PulseSequence, seed: u64) -> Result<CoherenceCurve> {
        let grid = self.cfg.tau_grid();
        let (spins, target) = self.bath_spins(seed)?;
        let set = enumerate_clusters(&spins, self.cfg.cce.order, self.cfg.pair_cutoff())?;
        let mut curve = match (&self.cfg.lindblad, target) {
            (Some(_), Some(t)) => self.noisy_expansion(&spins, &set, seq, &grid, t)?,
            (Some(_), None) => {
                return Err(ConfigError(format!(
                    "lindblad: no spin-active silicon in the bath for seed {seed}; force one \
                     via overrides.force_silicon_at_angstrom or change the seed"
                ))
                .into())
            }
            _ => expansion_coherence(
                &spins,
                &set,
                seq,
                &grid,
                &self.g,
                &self.field,
                self.cfg.intra_bath(),
                None,
            )?,
        };
        curve.metadata.seed = Some(seed);
        Ok(curve)
    }

    /// Expansion with the noise channel on the target spin. Clusters avoiding
    /// the target evolve coherently as usual; the target's own factor and its
    /// pair corrections are propagated under the dissipative master equation.
    /// Target-containing clusters of order ≥ 3 are truncated — the channel is
    /// treated to pair order, which bounds the register at two spins.
    fn noisy_expansion(
        &self,
        spins: &[BathSpin],
        set: &ClusterSet,
        seq: &PulseSequence,
        grid: &[f64],
        target: usize,
    ) -> Result<CoherenceCurve> {
        let params = self
            .cfg
            .lindblad_params(target)
            .expect("caller checked the channel is configured");
        let others = ClusterSet {
            clusters: set
                .clusters
                .iter()
                .filter(|c| !c.contains(&target))
                .cloned()
                .collect(),
            max_order: set.max_order,
            pair_cutoff: set.pair_cutoff,
        };
        let mut curve = expansion_coherence(
            spins,
            &others,
            seq,
            grid,
            &self.g,
            &self.field,
            self.cfg.intra_bath(),
            None,
        )?;
        let mut flags: BTreeSet<usize> = curve.non_converged.iter().copied().collect();

        let single =
            noisy_cluster_coherence(spins, &[target], seq, grid, &params, &self.g, &self.field)?;
        for (v, s) in curve.values.iter_mut().zip(&single.values) {
            *v *= s;
        }

        for pair in set
            .clusters
            .iter()
            .filter(|c| c.len() == 2 && c.contains(&target))
        {
            let partner = if pair[0] == target { pair[1] } else { pair[0] };
            let joint =
                noisy_cluster_coherence(spins, pair, seq, grid, &params, &self.g, &self.field)?;
            let partner_single = cluster_coherence_with(
                spins,
                &[partner],
                seq,
                grid,
                &self.g,
                &self.field,
                2,
                self.cfg.intra_bath(),
            )?;
            for (p, v) in curve.values.iter_mut().enumerate() {
                let denom = single.values[p] * partner_single.values[p];
                if denom.norm() < TILDE_GUARD {
                    flags.insert(p);
                } else {
                    *v *= joint.values[p] / denom;
                }
            }
        }
        curve.non_converged = flags.into_iter().collect();
        Ok(curve)
    }

    /// Ensemble-averaged coherence: one isotope realization per ion, seeds
    /// `seed, seed+1, …`, combined with the configured weights.
    pub fn ensemble_curve(&self, seq: &PulseSequence) -> Result<CoherenceCurve> {
        let n = self.cfg.ensemble.ions;
        let mut curves = Vec::with_capacity(n);
        for i in 0..n {
            curves.push(self.simulate(seq, self.cfg.seed + i as u64)?);
        }
        let mut curve = if n == 1 {
            curves.pop().expect("one ion simulated")
        } else {
            ensemble_average(&curves, &self.cfg.ensemble_weights())?
        };
        curve.metadata.seed = Some(self.cfg.seed);
        curve.metadata.config_hash = Some(self.hash.clone());
        Ok(curve)
    }

    fn output_format(&self) -> Result<FileFormat> {
        FileFormat::from_name(&self.cfg.output.format).map_err(Into::into)
    }
}

/// Pointwise `offset + (a − b)` on a shared grid; sequences must match.
fn difference_curve(
    a: &CoherenceCurve,
    b: &CoherenceCurve,
    offset: f64,
) -> Result<CoherenceCurve> {
    if a.metadata.sequence != b.metadata.sequence || a.metadata.n_pulses != b.metadata.n_pulses {
        return Err(ConfigError(format!(
            "sequence mismatch: {} vs {}",
            a.metadata.sequence, b.metadata.sequence
        ))
        .into());
    }
    if a.times != b.times {
        return Err(ConfigError(format!(
            "time grids differ ({} vs {} points or unequal values)",
            a.times.len(),
            b.times.len()
        ))
        .into());
    }
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x - y + offset)
        .collect();
    let mut non_converged: Vec<usize> = a
        .non_converged
        .iter()
        .chain(&b.non_converged)
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    non_converged.dedup();
    let mut metadata = a.metadata.clone();
    metadata.seed = a.metadata.seed.filter(|_| a.metadata.seed == b.metadata.seed);
    Ok(CoherenceCurve {
        times: a.times.clone(),
        values,
        non_converged,
        metadata,
    })
}

fn tau_window(curve: &CoherenceCurve) -> (f64, f64) {
    let tau = curve.tau_grid();
    (tau[0], *tau.last().expect("curves are non-empty"))
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

/// Hahn-echo collapse/revival curve plus a stretched-exponential envelope
/// fit. Returns whether numerical non-convergence was flagged anywhere.
pub fn hahn_echo(cfg: &ExperimentConfig) -> Result<bool> {
    let ctx = SimContext::new(cfg)?;
    let format = ctx.output_format()?;
    execute_run(
        &cfg.output.directory,
        "hahn_echo",
        &ctx.hash,
        cfg.seed,
        format,
        cfg.output.plot,
        |sink| {
            let seq = make_sequence(SequenceKind::Hahn, 1, cfg.sequence.tau_start_us)?;
            let curve = ctx.ensemble_curve(&seq)?;
            sink.write_curve("hahn_echo", "curve", &curve)?;

            let mode = if cfg.fit.free_exponent {
                StretchExponent::Free
            } else {
                StretchExponent::Fixed(cfg.fit.stretch_exponent)
            };
            let fit = fit_stretched_exp_with(&curve, mode)?;
            if !fit.converged {
                sink.flag_fit_non_convergence();
            }
            let extra = [(
                "exponent_mode",
                json!(if cfg.fit.free_exponent { "free" } else { "fixed" }),
            )];
            sink.write_json("hahn_fit", "fit", &fit_value("stretched_exponential", &fit, &extra))?;
            let t2 = fit.value("t2_us").unwrap_or(f64::NAN);
            let n = fit.value("exponent").unwrap_or(f64::NAN);
            sink.note(format!(
                "stretched-exponential fit: T2 = {t2:.4} µs, exponent = {n:.3}, converged = {}",
                fit.converged
            ));
            Ok(())
        },
    )
}

/// Free-induction decay plus a Gaussian envelope fit (skipped for a constant
/// curve, e.g. an empty bath).
pub fn fid(cfg: &ExperimentConfig) -> Result<bool> {
    let ctx = SimContext::new(cfg)?;
    let format = ctx.output_format()?;
    execute_run(
        &cfg.output.directory,
        "fid",
        &ctx.hash,
        cfg.seed,
        format,
        cfg.output.plot,
        |sink| {
            let seq = make_sequence(SequenceKind::Fid, 0, cfg.sequence.tau_start_us)?;
            let curve = ctx.ensemble_curve(&seq)?;
            sink.write_curve("fid", "curve", &curve)?;

            let re: Vec<f64> = curve.values.iter().map(|v| v.re).collect();
            let spread = re.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
                - re.iter().fold(f64::INFINITY, |m, &v| m.min(v));
            if spread > 1e-9 {
                let fit = fit_gaussian_fid(&curve)?;
                if !fit.converged {
                    sink.flag_fit_non_convergence();
                }
                sink.write_json("fid_fit", "fit", &fit_value("gaussian_fid", &fit, &[]))?;
                let t2s = fit.value("t2_star_us").unwrap_or(f64::NAN);
                sink.note(format!(
                    "gaussian envelope fit: T2* = {t2s:.4} µs, converged = {}",
                    fit.converged
                ));
            } else {
                sink.write_json(
                    "fid_fit",
                    "fit",
                    &json!({
                        "model": "gaussian_fid",
                        "skipped": true,
                        "reason": "curve is constant; no decay to fit",
                    }),
                )?;
                sink.note("curve is constant (L ≡ 1); envelope fit skipped".to_string());
            }
            Ok(())
        },
    )
}

/// CPMG-N scans: for every configured pulse count, the full simulation, a
/// silicon-free reference, their difference trace (offset to 1 so decoupling
/// dips read as drops below 1), and the dip report.
pub fn cpmg_scan(cfg: &ExperimentConfig) -> Result<bool> {
    let ctx = SimContext::new(cfg)?;
    let reference = ctx.silicon_free_reference();
    let format = ctx.output_format()?;
    execute_run(
        &cfg.output.directory,
        "cpmg_scan",
        &ctx.hash,
        cfg.seed,
        format,
        cfg.output.plot,
        |sink| {
            for &n in &cfg.sequence.scan_pulses {
                let seq = make_sequence(SequenceKind::Cpmg, n, cfg.sequence.tau_start_us)?;
                let with_si = ctx.ensemble_curve(&seq)?;
                let without_si = reference.ensemble_curve(&seq)?;
                let diff = difference_curve(&with_si, &without_si, 1.0)?;

                let stem = format!("cpmg-{n}");
                sink.write_curve(&stem, "curve", &with_si)?;
                sink.write_curve(&format!("{stem}_reference"), "reference_curve", &without_si)?;
                sink.write_curve(&format!("{stem}_difference"), "difference", &diff)?;

                let report = find_dips(&diff, tau_window(&diff), DIP_DEPTH_THRESHOLD)?;
                let extra = [("sequence", json!(format!("cpmg-{n}")))];
                sink.write_json(
                    &format!("{stem}_dips"),
                    "dips",
                    &dips_value(DIP_DEPTH_THRESHOLD, &report, &extra),
                )?;
                let centers: Vec<String> = report
                    .dips
                    .iter()
                    .map(|d| format!("{:.4}", d.center_us))
                    .collect();
                sink.note(format!(
                    "cpmg-{n}: {} dip(s) below {DIP_DEPTH_THRESHOLD} at τ = [{}] µs",
                    report.dips.len(),
                    centers.join(", ")
                ));
            }
            Ok(())
        },
    )
}

/// Modulation spectrum of the configured sequence: the source curve, its
/// one-sided magnitude spectrum, and the detected peaks.
pub fn spectrum(cfg: &ExperimentConfig) -> Result<bool> {
    if cfg.sequence.tau_points < 8 {
        return Err(ConfigError(
            "sequence.tau_points: the spectrum experiment needs at least 8 grid points".into(),
        )
        .into());
    }
    let ctx = SimContext::new(cfg)?;
    let format = ctx.output_format()?;
    execute_run(
        &cfg.output.directory,
        "spectrum",
        &ctx.hash,
        cfg.seed,
        format,
        cfg.output.plot,
        |sink| {
            let seq = cfg.pulse_sequence()?;
            let curve = ctx.ensemble_curve(&seq)?;
            sink.write_curve("spectrum_source", "curve", &curve)?;

            let window = match cfg.spectrum.window.as_str() {
                "hann" => SpectrumWindow::Hann,
                _ => SpectrumWindow::Rect,
            };
            let pad = cfg.spectrum.zero_pad_factor;
            let spec = fft_spectrum(&curve, window, pad)?;
            sink.write_spectrum("spectrum", &spec, pad)?;

            let tallest = spec.magnitudes.iter().fold(0.0f64, |m, &v| m.max(v));
            let prominence = cfg.spectrum.peak_prominence.unwrap_or(0.05 * tallest);
            let peaks = find_peaks(&spec, prominence);
            let peak_docs: Vec<serde_json::Value> = peaks
                .iter()
                .map(|p| json!({"frequency_khz": p.frequency_khz, "magnitude": p.magnitude}))
                .collect();
            sink.write_json(
                "peaks",
                "summary",
                &json!({
                    "prominence_threshold": prominence,
                    "count": peaks.len(),
                    "peaks": peak_docs,
                }),
            )?;
            let head: Vec<String> = peaks
                .iter()
                .take(3)
                .map(|p| format!("{:.2} kHz", p.frequency_khz))
                .collect();
            sink.note(format!(
                "{} peak(s) above prominence {prominence:.3}; strongest: [{}]",
                peaks.len(),
                head.join(", ")
            ));
            Ok(())
        },
    )
}

/// Occupancy statistics of the defect's silicon neighborhood: the binomial
/// count distribution within [`OCCUPANCY_RADIUS_ANGSTROM`], and the
/// probability that the nearest coordination shell hosts at least one
/// spin-active nucleus.
pub fn occupancy(cfg: &ExperimentConfig) -> Result<bool> {
    let ctx = SimContext::new(cfg)?;
    let format = ctx.output_format()?;
    execute_run(
        &cfg.output.directory,
        "occupancy",
        &ctx.hash,
        cfg.seed,
        format,
        cfg.output.plot,
        |sink| {
            let lat = ctx.supercell(cfg.seed)?;
            let si_sites = lattice_sites_within(&lat, OCCUPANCY_RADIUS_ANGSTROM, Some("Si"));
            let n = si_sites.len();
            let abundance = ctx
                .crystal
                .species_table
                .get("Si")
                .map(|s| s.natural_abundance)
                .unwrap_or(0.0);
            let pmf = occupancy_distribution(n, abundance);

            let comments = vec![
                ("experiment".to_string(), "occupancy".to_string()),
                (
                    "radius_angstrom".to_string(),
                    fmt_f64(OCCUPANCY_RADIUS_ANGSTROM),
                ),
                ("n_sites".to_string(), n.to_string()),
                ("abundance".to_string(), fmt_f64(abundance)),
                ("config_hash".to_string(), ctx.hash.clone()),
            ];
            let rows: Vec<String> = pmf
                .iter()
                .enumerate()
                .map(|(k, p)| format!("{k},{}", fmt_f64(*p)))
                .collect();
            sink.write_table("occupancy_pmf", "distribution", &comments, "k,probability", &rows)?;

            let distances: Vec<f64> = si_sites.iter().map(|s| s.position.norm()).collect();
            let shell: Vec<f64> = match distances.first() {
                Some(&d0) => distances
                    .iter()
                    .take_while(|&&d| d <= d0 * NEAREST_SHELL_WINDOW)
                    .copied()
                    .collect(),
                None => Vec::new(),
            };
            let p_shell = 1.0 - (1.0 - abundance).powi(shell.len() as i32);
            sink.write_json(
                "occupancy_summary",
                "summary",
                &json!({
                    "radius_angstrom": OCCUPANCY_RADIUS_ANGSTROM,
                    "abundance": abundance,
                    "n_sites_within_radius": n,
                    "p_zero_within_radius": pmf[0],
                    "nearest_shell": {
                        "relative_window": NEAREST_SHELL_WINDOW,
                        "count": shell.len(),
                        "distances_angstrom": shell,
                        "p_at_least_one": p_shell,
                    },
                }),
            )?;
            sink.note(format!(
                "{n} Si sites within {OCCUPANCY_RADIUS_ANGSTROM} Å: P(0 spins) = {:.4}",
                pmf[0]
            ));
            sink.note(format!(
                "nearest shell ({} sites): P(≥1 spin) = {p_shell:.4}",
                shell.len()
            ));
            Ok(())
        },
    )
}

/// Dipolar-limited nuclear coherence-time estimates for the bath species.
pub fn estimate_t2n(cfg: &ExperimentConfig) -> Result<bool> {
    let ctx = SimContext::new(cfg)?;
    let format = ctx.output_format()?;
    execute_run(
        &cfg.output.directory,
        "estimate_t2n",
        &ctx.hash,
        cfg.seed,
        format,
        cfg.output.plot,
        |sink| {
            let lat = ctx.supercell(cfg.seed)?;
            let mut species_docs = serde_json::Map::new();
            let mut rows = Vec::new();
            let mut comments = vec![
                ("experiment".to_string(), "estimate_t2n".to_string()),
                ("seed".to_string(), cfg.seed.to_string()),
                ("config_hash".to_string(), ctx.hash.clone()),
            ];
            for label in ["Y", "Si"] {
                match nuclear_t2_estimate(&lat, label) {
                    Ok(t2) => {
                        species_docs.insert(label.to_string(), json!({ "t2_us": t2 }));
                        rows.push(format!("{label},{}", fmt_f64(t2)));
                        sink.note(format!("{label}: T2 ≈ {t2:.1} µs"));
                    }
                    Err(e) => {
                        species_docs
                            .insert(label.to_string(), json!({ "t2_us": null, "note": e.to_string() }));
                        comments.push((label.to_string(), e.to_string()));
                        sink.note(format!("{label}: unavailable ({e})"));
                    }
                }
            }
            match format {
                FileFormat::Csv => {
                    sink.write_table("t2n", "summary", &comments, "species,t2_us", &rows)?
                }
                FileFormat::Json => sink.write_json(
                    "t2n",
                    "summary",
                    &json!({
                        "seed": cfg.seed,
                        "config_hash": ctx.hash,
                        "species": species_docs,
                    }),
                )?,
            }
            Ok(())
        },
    )
}

// ---------------------------------------------------------------------------
// Run differencing
// ---------------------------------------------------------------------------

fn load_primary_curve(dir: &Path) -> Result<(RunManifest, CoherenceCurve)> {
    let manifest = crate::output::verify_run_dir(dir).map_err(|e| {
        ConfigError(format!("{}: not a completed run directory: {e}", dir.display()))
    })?;
    let curves: Vec<_> = manifest
        .outputs
        .iter()
        .filter(|o| o.role == "curve")
        .collect();
    if curves.len() != 1 {
        return Err(ConfigError(format!(
            "{}: expected exactly one primary curve, found {} (diffing a multi-curve run \
             is ambiguous)",
            dir.display(),
            curves.len()
        ))
        .into());
    }
    let (_, curve) = read_curve(&dir.join(&curves[0].path))?;
    Ok((manifest, curve))
}

/// Difference of two completed runs: the pointwise residual curve (zero for
/// identical runs) and a dip analysis of the residual, which isolates the
/// sensed-spin modulation from the common bath background.
pub fn diff_runs(a: &Path, b: &Path, out: &Path, format: FileFormat, plot: bool) -> Result<bool> {
    let (manifest_a, curve_a) = load_primary_curve(a)?;
    let (manifest_b, curve_b) = load_primary_curve(b)?;
    let diff = difference_curve(&curve_a, &curve_b, 0.0)?;
    let hash = format!("{}:{}", manifest_a.config_hash, manifest_b.config_hash);
    execute_run(out, "diff_runs", &hash, manifest_a.seed, format, plot, |sink| {
        sink.write_curve("difference", "difference", &diff)?;

        // Dips of the residual read against an ideal flat baseline of 1.
        let shifted = CoherenceCurve {
            times: diff.times.clone(),
            values: diff.values.iter().map(|v| v + 1.0).collect(),
            non_converged: diff.non_converged.clone(),
            metadata: diff.metadata.clone(),
        };
        let report = find_dips(&shifted, tau_window(&shifted), DIP_DEPTH_THRESHOLD)?;
        sink.write_json(
            "difference_dips",
            "dips",
            &dips_value(DIP_DEPTH_THRESHOLD, &report, &[]),
        )?;

        let max_abs = diff.values.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
        sink.note(format!(
            "max |Δ| = {max_abs:.3e}; {} residual dip(s)",
            report.dips.len()
        ));
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use spindec_core::cce::CurveMetadata;

    fn curve_from(vals: &[f64], sequence: &str, n_pulses: usize) -> CoherenceCurve {
        CoherenceCurve {
            times: (0..vals.len()).map(|i| 0.1 + i as f64 * 0.1).collect(),
            values: vals.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
            non_converged: Vec::new(),
            metadata: CurveMetadata {
                sequence: sequence.into(),
                n_pulses,
                seed: Some(1),
                config_hash: None,
            },
        }
    }

    #[test]
    fn difference_of_a_curve_with_itself_is_the_offset() {
        let a = curve_from(&[1.0, 0.8, 0.6, 0.9], "hahn", 1);
        let d = difference_curve(&a, &a, 1.0).unwrap();
        assert!(d.values.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() == 0.0));
    }

    #[test]
    fn difference_rejects_mismatched_sequences_and_grids() {
        let a = curve_from(&[1.0, 0.8, 0.6], "hahn", 1);
        let b = curve_from(&[1.0, 0.8, 0.6], "cpmg-2", 2);
        assert!(difference_curve(&a, &b, 0.0).is_err());

        let mut c = curve_from(&[1.0, 0.8, 0.6], "hahn", 1);
        c.times[2] += 0.05;
        assert!(difference_curve(&a, &c, 0.0).is_err());
    }

    #[test]
    fn nearest_shell_window_groups_the_shipped_coordination_shell() {
        // Distances of the shipped geometry's closest silicon sites: four
        // sites inside the 10% window, then a clear gap.
        let d = [3.461, 3.5221, 3.5641, 3.778, 4.2261, 5.0616];
        let shell: Vec<f64> = d
            .iter()
            .take_while(|&&x| x <= d[0] * NEAREST_SHELL_WINDOW)
            .copied()
            .collect();
        assert_eq!(shell.len(), 4);
    }
}
