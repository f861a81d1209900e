//! Run configuration: a single human-editable TOML file with documented
//! defaults, validated with field-path error messages, and hashed so every
//! output can be traced back to the exact parameters that produced it.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spindec_core::cce::{IntraBathCoupling, PairCutoff};
use spindec_core::dynamics::{LindbladParams, PulseSequence, SequenceKind};

/// A configuration problem: malformed file, unknown field, or a value that
/// fails validation. Reported with the offending field's path and mapped to
/// the dedicated process exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(field: &str, message: impl fmt::Display) -> ConfigError {
    ConfigError(format!("{field}: {message}"))
}

/// Complete, fully-serializable description of one experiment run. Every
/// field has a default, so an empty file (or no file at all) is a valid
/// configuration; the resolved struct — after command-line overrides — is
/// what gets hashed and embedded in the outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Crystal definition TOML, resolved relative to the config file's
    /// directory (or the working directory when no file was given).
    pub crystal_file: PathBuf,
    /// Isotope-assignment seed; ensemble ion i uses `seed + i`.
    pub seed: u64,
    pub bath: BathConfig,
    pub field: FieldConfig,
    pub sequence: SequenceConfig,
    pub cce: CceConfig,
    /// Optional dephasing/relaxation channel on the target silicon nucleus;
    /// absent means fully coherent bath evolution.
    pub lindblad: Option<LindbladConfig>,
    pub overrides: OverrideConfig,
    pub ensemble: EnsembleConfig,
    pub fit: FitConfig,
    pub spectrum: SpectrumConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            crystal_file: PathBuf::from("data/yso.toml"),
            seed: 1,
            bath: BathConfig::default(),
            field: FieldConfig::default(),
            sequence: SequenceConfig::default(),
            cce: CceConfig::default(),
            lindblad: None,
            overrides: OverrideConfig::default(),
            ensemble: EnsembleConfig::default(),
            fit: FitConfig::default(),
            spectrum: SpectrumConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BathConfig {
    /// Supercell box edge lengths in nm, centered on the defect.
    pub extent_nm: [f64; 3],
    /// Which basis site hosts the defect (must be a deterministically
    /// occupied host species, i.e. an yttrium site).
    pub defect_site_index: usize,
    /// Spherical trim radius in nm applied after the box build; 0 empties
    /// the bath.
    pub radius_nm: f64,
}

impl Default for BathConfig {
    fn default() -> Self {
        // A 2 nm sphere holds ~150 yttrium nuclei — enough to converge the
        // first collapse/revival cycle in seconds. Paper-scale baths
        // (radius 6.5 nm) are supported but take correspondingly longer.
        BathConfig {
            extent_nm: [4.0, 4.0, 4.0],
            defect_site_index: 0,
            radius_nm: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub magnitude_t: f64,
    /// Direction in the crystal frame; normalized at use.
    pub direction: [f64; 3],
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            magnitude_t: 0.097,
            direction: [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    /// "fid", "hahn", or "cpmg".
    pub kind: String,
    /// π-pulse count; forced to 0 for FID and 1 for Hahn.
    pub n_pulses: usize,
    /// Pulse counts covered by the CPMG scan experiment.
    pub scan_pulses: Vec<usize>,
    pub tau_start_us: f64,
    pub tau_stop_us: f64,
    pub tau_points: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            kind: "hahn".into(),
            n_pulses: 1,
            scan_pulses: vec![1, 2, 5],
            tau_start_us: 0.025,
            tau_stop_us: 12.5,
            tau_points: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CceConfig {
    /// Maximum cluster order retained by the expansion (1–4).
    pub order: usize,
    /// Pair-admission distance cutoff in Å. Mutually exclusive with
    /// `pair_cutoff_coupling_hz`.
    pub pair_cutoff_angstrom: Option<f64>,
    /// Pair-admission coupling-strength cutoff in Hz.
    pub pair_cutoff_coupling_hz: Option<f64>,
    /// Whether nuclei inside a cluster couple to each other ("dipolar") or
    /// evolve independently ("disabled", the non-interacting approximation).
    pub intra_bath: String,
}

impl Default for CceConfig {
    fn default() -> Self {
        CceConfig {
            order: 2,
            pair_cutoff_angstrom: Some(8.0),
            pair_cutoff_coupling_hz: None,
            intra_bath: "dipolar".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LindbladConfig {
    pub gamma1_khz: f64,
    pub gamma2_khz: f64,
}

impl Default for LindbladConfig {
    fn default() -> Self {
        LindbladConfig {
            gamma1_khz: 64.0,
            gamma2_khz: 64.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverrideConfig {
    /// Place a spin-active ²⁹Si at this defect-relative position (Å),
    /// regardless of the isotope draw.
    pub force_silicon_at_angstrom: Option<[f64; 3]>,
    /// Remove every spin-active silicon from the bath (reference runs).
    pub clear_silicon: bool,
}

impl Default for OverrideConfig {
    fn default() -> Self {
        OverrideConfig {
            force_silicon_at_angstrom: None,
            clear_silicon: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Number of ions averaged (each with its own isotope realization).
    pub ions: usize,
    /// Per-ion weights summing to 1; uniform when omitted.
    pub weights: Option<Vec<f64>>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            ions: 1,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Stretching exponent for the echo-decay envelope fit.
    pub stretch_exponent: f64,
    /// Let the exponent float instead of holding it fixed.
    pub free_exponent: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            stretch_exponent: 3.0,
            free_exponent: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    /// "rect" or "hann".
    pub window: String,
    pub zero_pad_factor: usize,
    /// Peak-picking prominence threshold; defaults to 5% of the tallest bin.
    pub peak_prominence: Option<f64>,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            window: "rect".into(),
            zero_pad_factor: 4,
            peak_prominence: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// "csv" or "json" for the data files.
    pub format: String,
    /// Emit an SVG plot per curve/spectrum.
    pub plot: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: PathBuf::from("runs/out"),
            format: "csv".into(),
            plot: true,
        }
    }
}

impl ExperimentConfig {
    /// Load from a TOML file. A `crystal_file` given in the file resolves
    /// relative to the config's directory; the default stays relative to the
    /// working directory. Unknown fields are rejected so typos cannot
    /// silently fall back to defaults.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let names_crystal = text
            .parse::<toml::Table>()
            .map(|t| t.contains_key("crystal_file"))
            .unwrap_or(false);
        if names_crystal && cfg.crystal_file.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.crystal_file = dir.join(&cfg.crystal_file);
            }
        }
        Ok(cfg)
    }

    /// Validate every field, reporting the first violation with its path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let b = &self.bath;
        if !b.extent_nm.iter().all(|x| x.is_finite() && *x > 0.0) {
            return Err(err("bath.extent_nm", "all components must be positive"));
        }
        if !b.radius_nm.is_finite() || b.radius_nm < 0.0 {
            return Err(err("bath.radius_nm", "must be non-negative"));
        }
        let f = &self.field;
        if !f.magnitude_t.is_finite() || f.magnitude_t <= 0.0 {
            return Err(err("field.magnitude_t", "must be positive"));
        }
        let norm = f.direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(err("field.direction", "must be a nonzero vector"));
        }

        let s = &self.sequence;
        match s.kind.as_str() {
            "fid" | "hahn" | "cpmg" => {}
            other => {
                return Err(err(
                    "sequence.kind",
                    format!("unknown sequence '{other}' (expected fid, hahn, or cpmg)"),
                ));
            }
        }
        if s.kind == "cpmg" && s.n_pulses == 0 {
            return Err(err("sequence.n_pulses", "cpmg requires at least one π pulse"));
        }
        if !s.tau_start_us.is_finite() || s.tau_start_us < 0.0 {
            return Err(err("sequence.tau_start_us", "must be non-negative"));
        }
        if !s.tau_stop_us.is_finite() || s.tau_stop_us <= s.tau_start_us {
            return Err(err("sequence.tau_stop_us", "must exceed tau_start_us"));
        }
        if s.tau_points < 2 {
            return Err(err("sequence.tau_points", "need at least 2 grid points"));
        }
        if s.scan_pulses.is_empty() || s.scan_pulses.iter().any(|&n| n == 0) {
            return Err(err(
                "sequence.scan_pulses",
                "must list at least one pulse count, all ≥ 1",
            ));
        }

        let c = &self.cce;
        if !(1..=4).contains(&c.order) {
            return Err(err("cce.order", "supported cluster orders are 1–4"));
        }
        match (c.pair_cutoff_angstrom, c.pair_cutoff_coupling_hz) {
            (Some(d), None) => {
                if !d.is_finite() || d <= 0.0 {
                    return Err(err("cce.pair_cutoff_angstrom", "must be positive"));
                }
            }
            (None, Some(h)) => {
                if !h.is_finite() || h < 0.0 {
                    return Err(err("cce.pair_cutoff_coupling_hz", "must be non-negative"));
                }
            }
            (Some(_), Some(_)) => {
                return Err(err(
                    "cce.pair_cutoff_coupling_hz",
                    "set either the distance or the coupling cutoff, not both",
                ));
            }
            (None, None) => {
                return Err(err(
                    "cce.pair_cutoff_angstrom",
                    "one pair cutoff (distance or coupling) is required",
                ));
            }
        }
        match c.intra_bath.as_str() {
            "dipolar" | "disabled" => {}
            other => {
                return Err(err(
                    "cce.intra_bath",
                    format!("unknown mode '{other}' (expected dipolar or disabled)"),
                ));
            }
        }

        if let Some(l) = &self.lindblad {
            if !l.gamma1_khz.is_finite() || l.gamma1_khz < 0.0 {
                return Err(err("lindblad.gamma1_khz", "must be non-negative"));
            }
            if !l.gamma2_khz.is_finite() || l.gamma2_khz < 0.0 {
                return Err(err("lindblad.gamma2_khz", "must be non-negative"));
            }
        }

        if let Some(pos) = &self.overrides.force_silicon_at_angstrom {
            if !pos.iter().all(|x| x.is_finite()) {
                return Err(err("overrides.force_silicon_at_angstrom", "must be finite"));
            }
            let r = pos.iter().map(|x| x * x).sum::<f64>().sqrt();
            if r < 1.0 {
                return Err(err(
                    "overrides.force_silicon_at_angstrom",
                    format!("{r:.3} Å from the defect is inside the contact regime"),
                ));
            }
        }

        let e = &self.ensemble;
        if e.ions == 0 {
            return Err(err("ensemble.ions", "need at least one ion"));
        }
        if let Some(w) = &e.weights {
            if w.len() != e.ions {
                return Err(err(
                    "ensemble.weights",
                    format!("{} weights for {} ions", w.len(), e.ions),
                ));
            }
            if !w.iter().all(|x| x.is_finite() && *x >= 0.0) {
                return Err(err("ensemble.weights", "must be non-negative"));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(err("ensemble.weights", format!("must sum to 1, got {sum}")));
            }
        }

        if !self.fit.stretch_exponent.is_finite() || self.fit.stretch_exponent <= 0.0 {
            return Err(err("fit.stretch_exponent", "must be positive"));
        }

        match self.spectrum.window.as_str() {
            "rect" | "hann" => {}
            other => {
                return Err(err(
                    "spectrum.window",
                    format!("unknown window '{other}' (expected rect or hann)"),
                ));
            }
        }
        if self.spectrum.zero_pad_factor == 0 {
            return Err(err("spectrum.zero_pad_factor", "must be at least 1"));
        }
        if let Some(p) = self.spectrum.peak_prominence {
            if !p.is_finite() || p < 0.0 {
                return Err(err("spectrum.peak_prominence", "must be non-negative"));
            }
        }

        match self.output.format.as_str() {
            "csv" | "json" => {}
            other => {
                return Err(err(
                    "output.format",
                    format!("unknown format '{other}' (expected csv or json)"),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration (canonical JSON of the struct,
    /// after all command-line overrides). Identical configs hash identically
    /// regardless of the TOML formatting they were written with.
    pub fn hash(&self) -> String {
        let canonical =
            serde_json::to_string(self).expect("config serialization is infallible");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// The pulse-interval grid defined by the sequence block.
    pub fn tau_grid(&self) -> Vec<f64> {
        let s = &self.sequence;
        let n = s.tau_points;
        let step = (s.tau_stop_us - s.tau_start_us) / (n - 1) as f64;
        (0..n).map(|i| s.tau_start_us + i as f64 * step).collect()
    }

    /// The validated pulse sequence (τ field carries the grid start; the
    /// scan overrides it point by point).
    pub fn pulse_sequence(&self) -> Result<PulseSequence, ConfigError> {
        self.pulse_sequence_with(self.sequence.n_pulses)
    }

    /// Same sequence kind with an explicit pulse count (CPMG scans).
    pub fn pulse_sequence_with(&self, n_pulses: usize) -> Result<PulseSequence, ConfigError> {
        let (kind, n) = match self.sequence.kind.as_str() {
            "fid" => (SequenceKind::Fid, 0),
            "hahn" => (SequenceKind::Hahn, 1),
            "cpmg" => (SequenceKind::Cpmg, n_pulses),
            other => return Err(err("sequence.kind", format!("unknown sequence '{other}'"))),
        };
        spindec_core::dynamics::make_sequence(kind, n, self.sequence.tau_start_us)
            .map_err(|e| err("sequence", e))
    }

    pub fn pair_cutoff(&self) -> PairCutoff {
        match (self.cce.pair_cutoff_angstrom, self.cce.pair_cutoff_coupling_hz) {
            (Some(d), _) => PairCutoff::DistanceAngstrom(d),
            (_, Some(h)) => PairCutoff::CouplingHz(h),
            _ => PairCutoff::default(),
        }
    }

    pub fn intra_bath(&self) -> IntraBathCoupling {
        match self.cce.intra_bath.as_str() {
            "disabled" => IntraBathCoupling::Disabled,
            _ => IntraBathCoupling::Dipolar,
        }
    }

    /// Lindblad parameters aimed at `target_spin_index`, when the channel is
    /// configured.
    pub fn lindblad_params(&self, target_spin_index: usize) -> Option<LindbladParams> {
        self.lindblad.as_ref().map(|l| {
            LindbladParams::new(l.gamma1_khz, l.gamma2_khz, target_spin_index)
                .expect("rates validated with the config")
        })
    }

    /// Per-ion ensemble weights (uniform unless configured).
    pub fn ensemble_weights(&self) -> Vec<f64> {
        match &self.ensemble.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / self.ensemble.ions as f64; self.ensemble.ions],
        }
    }
}
