//! Run artifacts: data files (CSV or JSON), standalone SVG plots, and the
//! run manifest that ties every output to the configuration hash with a
//! checksum. The manifest is written last, so its presence marks a completed
//! run; a `.lock` file guards the directory while a run is in progress.
//!
//! All numeric CSV fields use 17-significant-digit scientific notation, which
//! round-trips every f64 exactly: re-parsing an emitted curve reproduces the
//! in-memory values bit for bit.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use spindec_core::analysis::{DipReport, FitResult, Spectrum};
use spindec_core::cce::{CoherenceCurve, CurveMetadata};

use crate::config::ConfigError;

/// Serialization of the data files; plots are always SVG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Json,
}

impl FileFormat {
    pub fn from_name(name: &str) -> Result<Self, ConfigError> {
        match name {
            "csv" => Ok(FileFormat::Csv),
            "json" => Ok(FileFormat::Json),
            other => Err(ConfigError(format!(
                "output.format: unknown format '{other}' (expected csv or json)"
            ))),
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            FileFormat::Csv => "csv",
            FileFormat::Json => "json",
        }
    }
}

/// Exact decimal representation of an f64: 17 significant digits in
/// scientific notation, enough for lossless round-tripping.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// One entry of the run manifest: a file the run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the run directory.
    pub path: String,
    /// What the file holds: "curve", "reference_curve", "difference",
    /// "spectrum", "fit", "dips", "distribution", "summary", or "plot".
    pub role: String,
    pub sha256: String,
    /// Grid indices the expansion flagged as numerically untrustworthy.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub non_converged: Vec<usize>,
}

/// Completion record of a run: written last, so its presence marks a run
/// whose files are all in place; every emitted file appears here with a
/// checksum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub outputs: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";
const LOCK_NAME: &str = ".lock";

/// Exclusive marker file held for the duration of a run; removed on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => bail!(
                "run directory {} is locked by another run (stale lock? remove {})",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).context(format!("cannot lock {}", dir.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// Run sink
// ---------------------------------------------------------------------------

/// Collects the files of one run: serialized writes, checksums as they go,
/// and the summary lines to print when the run completes.
pub struct RunSink {
    dir: PathBuf,
    format: FileFormat,
    plot: bool,
    experiment: String,
    config_hash: String,
    seed: u64,
    entries: Vec<ManifestEntry>,
    notes: Vec<String>,
    fit_non_convergence: bool,
}

impl RunSink {
    /// A line for the run's terminal summary.
    pub fn note(&mut self, line: impl Into<String>) {
        self.notes.push(line.into());
    }

    /// Record that an emitted fit did not converge (reflected in the exit
    /// code, like non-converged expansion points).
    pub fn flag_fit_non_convergence(&mut self) {
        self.fit_non_convergence = true;
    }

    fn write(&mut self, name: &str, role: &str, bytes: &[u8], non_conv: &[usize]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.entries.push(ManifestEntry {
            path: name.to_string(),
            role: role.to_string(),
            sha256: sha256_hex(bytes),
            non_converged: non_conv.to_vec(),
        });
        Ok(())
    }

    /// Emit a coherence-style curve as `<stem>.{csv|json}` plus an SVG plot
    /// when plotting is enabled.
    pub fn write_curve(&mut self, stem: &str, role: &str, curve: &CoherenceCurve) -> Result<()> {
        let name = format!("{stem}.{}", self.format.extension());
        let body = match self.format {
            FileFormat::Csv => curve_csv(&self.experiment, curve),
            FileFormat::Json => curve_json(&self.experiment, curve),
        };
        self.write(&name, role, body.as_bytes(), &curve.non_converged)?;
        if self.plot {
            let re: Vec<f64> = curve.values.iter().map(|v| v.re).collect();
            let series = [Series {
                label: "Re L",
                xs: &curve.times,
                ys: &re,
                color: PALETTE[0],
            }];
            let svg = line_plot_svg(stem, "total evolution time (µs)", "coherence", &series);
            self.write(&format!("{stem}.svg"), "plot", svg.as_bytes(), &[])?;
        }
        Ok(())
    }

    /// Emit a magnitude spectrum as `<stem>.{csv|json}` plus a plot.
    pub fn write_spectrum(&mut self, stem: &str, spec: &Spectrum, pad: usize) -> Result<()> {
        let name = format!("{stem}.{}", self.format.extension());
        let body = match self.format {
            FileFormat::Csv => spectrum_csv(&self.experiment, &self.config_hash, spec, pad),
            FileFormat::Json => spectrum_json(&self.experiment, &self.config_hash, spec, pad),
        };
        self.write(&name, "spectrum", body.as_bytes(), &[])?;
        if self.plot {
            let series = [Series {
                label: "|X(f)|",
                xs: &spec.frequencies_khz,
                ys: &spec.magnitudes,
                color: PALETTE[1],
            }];
            let svg = line_plot_svg(stem, "frequency (kHz)", "magnitude", &series);
            self.write(&format!("{stem}.svg"), "plot", svg.as_bytes(), &[])?;
        }
        Ok(())
    }

    /// Emit a JSON document (fit summaries, dip reports, statistics).
    pub fn write_json(&mut self, stem: &str, role: &str, value: &Value) -> Result<()> {
        let mut body = serde_json::to_string_pretty(value)?;
        body.push('\n');
        self.write(&format!("{stem}.json"), role, body.as_bytes(), &[])
    }

    /// Emit a small CSV table given header + preformatted rows.
    pub fn write_table(
        &mut self,
        stem: &str,
        role: &str,
        comments: &[(String, String)],
        header: &str,
        rows: &[String],
    ) -> Result<()> {
        let mut body = String::new();
        for (k, v) in comments {
            body.push_str(&format!("# {k}: {v}\n"));
        }
        body.push_str(header);
        body.push('\n');
        for r in rows {
            body.push_str(r);
            body.push('\n');
        }
        self.write(&format!("{stem}.csv"), role, body.as_bytes(), &[])
    }
}

/// Execute `body` inside a locked run directory, then write the manifest
/// (the atomic completion marker) and print the summary. Returns whether any
/// numerical non-convergence was flagged, for the exit code.
pub fn execute_run(
    dir: &Path,
    experiment: &str,
    config_hash: &str,
    seed: u64,
    format: FileFormat,
    plot: bool,
    body: impl FnOnce(&mut RunSink) -> Result<()>,
) -> Result<bool> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let _lock = RunLock::acquire(dir)?;
    let started = Instant::now();
    let mut sink = RunSink {
        dir: dir.to_path_buf(),
        format,
        plot,
        experiment: experiment.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        entries: Vec::new(),
        notes: Vec::new(),
        fit_non_convergence: false,
    };
    body(&mut sink)?;

    let non_converged =
        sink.fit_non_convergence || sink.entries.iter().any(|e| !e.non_converged.is_empty());
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        experiment: experiment.to_string(),
        config_hash: config_hash.to_string(),
        seed: sink.seed,
        wall_time_s: started.elapsed().as_secs_f64(),
        outputs: sink.entries,
    };
    let mut body = serde_json::to_string_pretty(&manifest)?;
    body.push('\n');
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))?;

    println!("{experiment}: wrote {} file(s) to {}", manifest.outputs.len(), dir.display());
    for line in &sink.notes {
        println!("  {line}");
    }
    if non_converged {
        println!("  WARNING: numerical non-convergence flagged; see {MANIFEST_NAME}");
    }
    Ok(non_converged)
}

// ---------------------------------------------------------------------------
// Curve serialization
// ---------------------------------------------------------------------------

fn curve_comments(experiment: &str, curve: &CoherenceCurve) -> Vec<(String, String)> {
    let m = &curve.metadata;
    let mut out = vec![
        ("experiment".to_string(), experiment.to_string()),
        ("sequence".to_string(), m.sequence.clone()),
        ("n_pulses".to_string(), m.n_pulses.to_string()),
    ];
    if let Some(s) = m.seed {
        out.push(("seed".to_string(), s.to_string()));
    }
    if let Some(h) = &m.config_hash {
        out.push(("config_hash".to_string(), h.clone()));
    }
    if !curve.non_converged.is_empty() {
        let list: Vec<String> = curve.non_converged.iter().map(|i| i.to_string()).collect();
        out.push(("non_converged".to_string(), list.join(",")));
    }
    out
}

fn curve_csv(experiment: &str, curve: &CoherenceCurve) -> String {
    let mut s = String::new();
    for (k, v) in curve_comments(experiment, curve) {
        s.push_str(&format!("# {k}: {v}\n"));
    }
    s.push_str("time_us,re_l,im_l,abs_l\n");
    for (t, v) in curve.times.iter().zip(&curve.values) {
        s.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(*t),
            fmt_f64(v.re),
            fmt_f64(v.im),
            fmt_f64(v.norm())
        ));
    }
    s
}

fn curve_json(experiment: &str, curve: &CoherenceCurve) -> String {
    let m = &curve.metadata;
    let v = json!({
        "experiment": experiment,
        "sequence": m.sequence,
        "n_pulses": m.n_pulses,
        "seed": m.seed,
        "config_hash": m.config_hash,
        "non_converged": curve.non_converged,
        "time_us": curve.times,
        "re_l": curve.values.iter().map(|v| v.re).collect::<Vec<_>>(),
        "im_l": curve.values.iter().map(|v| v.im).collect::<Vec<_>>(),
        "abs_l": curve.values.iter().map(|v| v.norm()).collect::<Vec<_>>(),
    });
    let mut s = serde_json::to_string_pretty(&v).expect("plain data serializes");
    s.push('\n');
    s
}

/// Re-read a curve file emitted by [`RunSink::write_curve`], either format.
/// Returns the experiment name and the reconstructed curve (metadata
/// included), with values exactly equal to what was written.
pub fn read_curve(path: &Path) -> Result<(String, CoherenceCurve)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => parse_curve_csv(&text).with_context(|| path.display().to_string()),
        Some("json") => parse_curve_json(&text).with_context(|| path.display().to_string()),
        _ => bail!("{}: unknown curve format (expected .csv or .json)", path.display()),
    }
}

fn parse_curve_csv(text: &str) -> Result<(String, CoherenceCurve)> {
    let mut experiment = String::new();
    let mut meta = CurveMetadata {
        sequence: String::new(),
        n_pulses: 0,
        seed: None,
        config_hash: None,
    };
    let mut non_converged: Vec<usize> = Vec::new();
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut saw_header = false;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            let Some((k, v)) = rest.split_once(':') else { continue };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "experiment" => experiment = v.to_string(),
                "sequence" => meta.sequence = v.to_string(),
                "n_pulses" => meta.n_pulses = v.parse().context("n_pulses")?,
                "seed" => meta.seed = Some(v.parse().context("seed")?),
                "config_hash" => meta.config_hash = Some(v.to_string()),
                "non_converged" => {
                    non_converged = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .context("non_converged")?;
                }
                _ => {}
            }
            continue;
        }
        if !saw_header {
            if line.trim() != "time_us,re_l,im_l,abs_l" {
                bail!("unexpected curve header {line:?}");
            }
            saw_header = true;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            bail!("curve row has {} columns, expected 4", cols.len());
        }
        times.push(cols[0].trim().parse::<f64>().context("time_us")?);
        values.push(Complex64::new(
            cols[1].trim().parse::<f64>().context("re_l")?,
            cols[2].trim().parse::<f64>().context("im_l")?,
        ));
    }
    if !saw_header {
        bail!("no curve header found");
    }
    Ok((
        experiment,
        CoherenceCurve {
            times,
            values,
            non_converged,
            metadata: meta,
        },
    ))
}

fn parse_curve_json(text: &str) -> Result<(String, CoherenceCurve)> {
    #[derive(Deserialize)]
    struct CurveFile {
        experiment: String,
        sequence: String,
        n_pulses: usize,
        seed: Option<u64>,
        config_hash: Option<String>,
        #[serde(default)]
        non_converged: Vec<usize>,
        time_us: Vec<f64>,
        re_l: Vec<f64>,
        im_l: Vec<f64>,
    }
    let f: CurveFile = serde_json::from_str(text)?;
    if f.re_l.len() != f.time_us.len() || f.im_l.len() != f.time_us.len() {
        bail!("curve arrays have mismatched lengths");
    }
    let values = f
        .re_l
        .iter()
        .zip(&f.im_l)
        .map(|(&re, &im)| Complex64::new(re, im))
        .collect();
    Ok((
        f.experiment,
        CoherenceCurve {
            times: f.time_us,
            values,
            non_converged: f.non_converged,
            metadata: CurveMetadata {
                sequence: f.sequence,
                n_pulses: f.n_pulses,
                seed: f.seed,
                config_hash: f.config_hash,
            },
        },
    ))
}

fn spectrum_csv(experiment: &str, hash: &str, spec: &Spectrum, pad: usize) -> String {
    let mut s = String::new();
    s.push_str(&format!("# experiment: {experiment}\n"));
    s.push_str(&format!("# window: {}\n", spec.window.name()));
    s.push_str(&format!("# zero_pad_factor: {pad}\n"));
    s.push_str(&format!("# config_hash: {hash}\n"));
    s.push_str("frequency_khz,magnitude\n");
    for (f, m) in spec.frequencies_khz.iter().zip(&spec.magnitudes) {
        s.push_str(&format!("{},{}\n", fmt_f64(*f), fmt_f64(*m)));
    }
    s
}

fn spectrum_json(experiment: &str, hash: &str, spec: &Spectrum, pad: usize) -> String {
    let v = json!({
        "experiment": experiment,
        "window": spec.window.name(),
        "zero_pad_factor": pad,
        "config_hash": hash,
        "frequency_khz": spec.frequencies_khz,
        "magnitude": spec.magnitudes,
    });
    let mut s = serde_json::to_string_pretty(&v).expect("plain data serializes");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// Structured summaries
// ---------------------------------------------------------------------------

/// JSON document for a fit: model name, convergence, and per-parameter
/// value ± standard error.
pub fn fit_value(model: &str, fit: &FitResult, extra: &[(&str, Value)]) -> Value {
    let mut params = serde_json::Map::new();
    for (name, p) in &fit.parameters {
        params.insert(
            name.clone(),
            json!({ "value": p.value, "std_error": p.std_error }),
        );
    }
    let mut doc = serde_json::Map::new();
    doc.insert("model".into(), json!(model));
    doc.insert("converged".into(), json!(fit.converged));
    doc.insert("iterations".into(), json!(fit.iterations));
    doc.insert("residual_norm".into(), json!(fit.residual_norm));
    doc.insert("parameters".into(), Value::Object(params));
    for (k, v) in extra {
        doc.insert((*k).to_string(), v.clone());
    }
    Value::Object(doc)
}

/// JSON document for a dip report.
pub fn dips_value(threshold: f64, report: &DipReport, extra: &[(&str, Value)]) -> Value {
    let dips: Vec<Value> = report
        .dips
        .iter()
        .map(|d| {
            json!({
                "center_us": d.center_us,
                "depth": d.depth,
                "width_us": d.width_us,
            })
        })
        .collect();
    let mut doc = serde_json::Map::new();
    doc.insert("depth_threshold".into(), json!(threshold));
    doc.insert("count".into(), json!(report.dips.len()));
    doc.insert("dips".into(), Value::Array(dips));
    for (k, v) in extra {
        doc.insert((*k).to_string(), v.clone());
    }
    Value::Object(doc)
}

// ---------------------------------------------------------------------------
// SVG plotting
// ---------------------------------------------------------------------------

/// Fixed color cycle for plot series.
pub const PALETTE: [&str; 6] =
    ["#1f6feb", "#d1242f", "#2da44e", "#bf8700", "#8250df", "#57606a"];

/// One plotted line.
pub struct Series<'a> {
    pub label: &'a str,
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub color: &'a str,
}

const PLOT_W: f64 = 860.0;
const PLOT_H: f64 = 520.0;
const MARGIN_L: f64 = 72.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 44.0;
const MARGIN_B: f64 = 56.0;

fn data_range<'a>(series: &'a [Series<'a>], pick: impl Fn(&'a Series<'a>) -> &'a [f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &v in pick(s) {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        // Degenerate (constant) axis: open a unit window around the value.
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.04 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Largest "nice" step (1, 2, or 5 × 10^k) giving at most ~6 intervals.
fn nice_step(range: f64) -> f64 {
    let raw = range / 5.0;
    let mag = 10f64.powf(raw.abs().log10().floor());
    let frac = raw / mag;
    let nice = if frac <= 1.0 {
        1.0
    } else if frac <= 2.0 {
        2.0
    } else if frac <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn ticks(lo: f64, hi: f64) -> (Vec<f64>, usize) {
    let step = nice_step(hi - lo);
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    let vals = (first..=last).map(|k| k as f64 * step).collect();
    (vals, decimals)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a deterministic standalone line plot. Text, colors, and geometry
/// depend only on the inputs, so identical data produces identical bytes.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let (x0, x1) = data_range(series, |s| s.xs);
    let (y0, y1) = data_range(series, |s| s.ys);
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (PLOT_W - MARGIN_L - MARGIN_R);
    let py = |y: f64| PLOT_H - MARGIN_B - (y - y0) / (y1 - y0) * (PLOT_H - MARGIN_T - MARGIN_B);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
         viewBox=\"0 0 {PLOT_W} {PLOT_H}\" font-family=\"Helvetica, Arial, sans-serif\">\n"
    ));
    s.push_str(&format!(
        "<rect width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"#ffffff\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"26\" font-size=\"16\" fill=\"#1f2328\" text-anchor=\"middle\">{}</text>\n",
        (MARGIN_L + PLOT_W - MARGIN_R) / 2.0,
        xml_escape(title)
    ));

    let (xt, xd) = ticks(x0, x1);
    let (yt, yd) = ticks(y0, y1);
    for &v in &xt {
        let x = px(v);
        s.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#eaeef2\"/>\n",
            MARGIN_T,
            PLOT_H - MARGIN_B
        ));
        s.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"12\" fill=\"#57606a\" \
             text-anchor=\"middle\">{v:.*}</text>\n",
            PLOT_H - MARGIN_B + 18.0,
            xd
        ));
    }
    for &v in &yt {
        let y = py(v);
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#eaeef2\"/>\n",
            MARGIN_L,
            PLOT_W - MARGIN_R
        ));
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" fill=\"#57606a\" \
             text-anchor=\"end\">{v:.*}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0,
            yd
        ));
    }
    s.push_str(&format!(
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{:.1}\" height=\"{:.1}\" \
         fill=\"none\" stroke=\"#57606a\"/>\n",
        PLOT_W - MARGIN_L - MARGIN_R,
        PLOT_H - MARGIN_T - MARGIN_B
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" fill=\"#1f2328\" \
         text-anchor=\"middle\">{}</text>\n",
        (MARGIN_L + PLOT_W - MARGIN_R) / 2.0,
        PLOT_H - 14.0,
        xml_escape(x_label)
    ));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" font-size=\"13\" fill=\"#1f2328\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        (MARGIN_T + PLOT_H - MARGIN_B) / 2.0,
        (MARGIN_T + PLOT_H - MARGIN_B) / 2.0,
        xml_escape(y_label)
    ));

    for srs in series {
        let mut points = String::new();
        for (x, y) in srs.xs.iter().zip(srs.ys) {
            if !(x.is_finite() && y.is_finite()) {
                continue;
            }
            points.push_str(&format!("{:.2},{:.2} ", px(*x), py(*y)));
        }
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
            points.trim_end(),
            srs.color
        ));
    }

    for (i, srs) in series.iter().enumerate() {
        let y = MARGIN_T + 16.0 + 18.0 * i as f64;
        let x = PLOT_W - MARGIN_R - 150.0;
        s.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{}\" \
             stroke-width=\"2\"/>\n",
            x + 22.0,
            srs.color
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"#1f2328\">{}</text>\n",
            x + 28.0,
            y + 4.0,
            xml_escape(srs.label)
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Verify that every file in `dir` (other than the manifest itself) is an
/// output the manifest lists with a matching checksum, and that every listed
/// output exists. Orphans and mismatches are errors.
pub fn verify_run_dir(dir: &Path) -> Result<RunManifest> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path)
        .with_context(|| format!("missing manifest {}", manifest_path.display()))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let mut listed = BTreeSet::new();
    for entry in &manifest.outputs {
        let path = dir.join(&entry.path);
        let bytes =
            fs::read(&path).with_context(|| format!("listed output {} missing", entry.path))?;
        if sha256_hex(&bytes) != entry.sha256 {
            bail!("checksum mismatch for {}", entry.path);
        }
        listed.insert(entry.path.clone());
    }
    for item in fs::read_dir(dir)? {
        let name = item?.file_name().to_string_lossy().into_owned();
        if name == MANIFEST_NAME || name == LOCK_NAME {
            continue;
        }
        if !listed.contains(&name) {
            bail!("orphan file {name} not referenced by the manifest");
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_curve() -> CoherenceCurve {
        let times: Vec<f64> = (0..12).map(|i| 0.05 + 0.1 * i as f64).collect();
        let values = times
            .iter()
            .map(|&t| Complex64::new((0.7 * t).cos() * 0.9, -0.03 * t))
            .collect();
        CoherenceCurve {
            times,
            values,
            non_converged: vec![3, 7],
            metadata: CurveMetadata {
                sequence: "hahn".into(),
                n_pulses: 1,
                seed: Some(42),
                config_hash: Some("abc123".into()),
            },
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let curve = sample_curve();
        let text = curve_csv("hahn_echo", &curve);
        let (experiment, back) = parse_curve_csv(&text).unwrap();
        assert_eq!(experiment, "hahn_echo");
        assert_eq!(back.metadata, curve.metadata);
        assert_eq!(back.non_converged, curve.non_converged);
        assert_eq!(back.times, curve.times);
        assert_eq!(back.values, curve.values);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let curve = sample_curve();
        let text = curve_json("hahn_echo", &curve);
        let (experiment, back) = parse_curve_json(&text).unwrap();
        assert_eq!(experiment, "hahn_echo");
        assert_eq!(back.metadata, curve.metadata);
        assert_eq!(back.times, curve.times);
        assert_eq!(back.values, curve.values);
    }

    #[test]
    fn f64_formatting_survives_extreme_values() {
        for &x in &[0.0, 1.0, -1.0, 1e-300, -2.5e300, std::f64::consts::PI, 1.0 / 3.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn plot_svg_is_deterministic_and_well_formed() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64 * 0.3).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (x * 0.9).sin()).collect();
        let series = [Series {
            label: "Re L",
            xs: &xs,
            ys: &ys,
            color: PALETTE[0],
        }];
        let a = line_plot_svg("demo", "x", "y", &series);
        let b = line_plot_svg("demo", "x", "y", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<polyline").count(), 1);
    }

    #[test]
    fn constant_series_still_plots() {
        let xs = [0.0, 1.0, 2.0];
        let ys = [1.0, 1.0, 1.0];
        let series = [Series {
            label: "flat",
            xs: &xs,
            ys: &ys,
            color: PALETTE[2],
        }];
        let svg = line_plot_svg("flat", "x", "y", &series);
        assert!(svg.contains("<polyline"));
    }
}
