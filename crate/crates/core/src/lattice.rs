//! Crystalline nuclear-spin environment around the electron defect.
//!
//! The electron sits on a substitutional site of a periodic crystal and decoheres
//! through dipolar coupling to the surrounding nuclear spins. This module builds
//! that environment: it ingests a crystal definition (unit cell, basis, species
//! table), replicates it into a finite box centered on the defect, stochastically
//! assigns spin-active isotopes (e.g. ²⁹Si at 4.7% natural abundance), and answers
//! the geometric queries the rest of the pipeline needs.
//!
//! All positions handed to physics code are defect-relative and in Ångström, so
//! the r and n̂ entering the dipolar couplings are direct field reads. Isotope
//! assignment draws once per lattice site from a generator keyed by
//! `(seed, cell indices, basis index)`, which makes a site's isotope identity a
//! pure function of the seed and the site — enlarging the box never reshuffles
//! the isotopes of sites that were already present.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{CoreError, Result};

/// Default cluster-size cap shared with the cluster expansion; re-exported here
/// only for documentation locality of lattice-side limits.
pub const MIN_SITE_SEPARATION_ANGSTROM: f64 = 0.1;

/// A nuclear species: gyromagnetic ratio (as γ/2π, signed, MHz/T), spin quantum
/// number (only 1/2 is supported), and natural abundance of the spin-active
/// isotope on this element's sites.
///
/// Spinless isotopes are represented by `abundance = 0` species so that their
/// sites remain part of the geometry (stable site indexing, coordination checks)
/// without ever carrying a spin.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinSpecies {
    /// Element label, e.g. `"Y"`, `"Si"`, `"O"`.
    pub label: String,
    /// Signed gyromagnetic ratio γ/2π in MHz/T.
    pub gamma_mhz_per_t: f64,
    /// Spin quantum number; only 1/2 is accepted at load time.
    pub spin_quantum_number: f64,
    /// Probability that a site of this element carries the spin-active isotope.
    pub natural_abundance: f64,
}

/// One basis site of the unit cell: element label plus fractional coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSite {
    pub label: String,
    /// Fractional coordinates in `[0, 1)`.
    pub frac: Vector3<f64>,
}

/// A validated crystal definition: lattice vectors (Å), basis sites, and the
/// species table keyed by element label.
#[derive(Debug, Clone)]
pub struct CrystalDefinition {
    /// Columns are the three lattice vectors a, b, c in Å.
    pub lattice_matrix: Matrix3<f64>,
    pub basis_sites: Vec<BasisSite>,
    pub species_table: BTreeMap<String, Arc<SpinSpecies>>,
}

/// A spin-active nucleus of the generated bath.
#[derive(Debug, Clone)]
pub struct BathSpin {
    pub species: Arc<SpinSpecies>,
    /// Position in Å, relative to the defect.
    pub position: Vector3<f64>,
}

/// Any generated lattice site (spin-active or not), retained so that geometric
/// queries can be answered before/independently of isotope assignment.
#[derive(Debug, Clone)]
pub struct LatticeSite {
    pub species: Arc<SpinSpecies>,
    /// Integer cell translation this site was generated from.
    pub cell: [i64; 3],
    /// Index into `CrystalDefinition::basis_sites`.
    pub basis_index: usize,
    /// Position in Å, relative to the defect.
    pub position: Vector3<f64>,
    /// Whether the isotope draw made this site a nuclear spin of the bath.
    pub spin_active: bool,
}

/// The finite nuclear environment: all spin-active bath nuclei (defect excluded),
/// the full site list for geometry queries, and the generation parameters.
///
/// Immutable after construction and safe to share across threads.
#[derive(Debug, Clone)]
pub struct BathLattice {
    /// Spin-active nuclei, defect-relative positions, deterministic order.
    pub sites: Vec<BathSpin>,
    /// Every generated site inside the box (including spinless ones), except the
    /// defect site itself.
    pub lattice_sites: Vec<LatticeSite>,
    /// Absolute position of the defect in the crystal frame used during
    /// generation (Å); bath positions are relative to this point.
    pub defect_position: Vector3<f64>,
    /// Requested box extent in nm (the box is centered on the defect).
    pub box_extent: Vector3<f64>,
    /// Isotope-assignment seed.
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Crystal definition loading
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct RawDefinition {
    cell: RawCell,
    species: Vec<RawSpecies>,
    basis: Vec<RawBasis>,
}

#[derive(Deserialize)]
struct RawCell {
    a: [f64; 3],
    b: [f64; 3],
    c: [f64; 3],
}

#[derive(Deserialize)]
struct RawSpecies {
    label: String,
    gamma_mhz_per_t: f64,
    spin: f64,
    abundance: f64,
}

#[derive(Deserialize)]
struct RawBasis {
    label: String,
    frac: [f64; 3],
}

/// Parse and validate a crystal definition document (TOML).
///
/// Expected schema:
///
/// ```toml
/// [cell]                      # lattice vectors in Å
/// a = [10.41, 0.0, 0.0]
/// b = [0.0, 6.72, 0.0]
/// c = [-2.74, 0.0, 12.19]
///
/// [[species]]
/// label = "Y"
/// gamma_mhz_per_t = -2.08859056   # signed γ/2π in MHz/T
/// spin = 0.5
/// abundance = 1.0
///
/// [[basis]]
/// label = "Y"
/// frac = [0.8744, 0.9881, 0.1073] # fractional coordinates in [0, 1)
/// ```
///
/// Validation enforces: linearly independent lattice vectors, fractional
/// coordinates in `[0, 1)`, spin quantum number exactly 1/2, abundance in
/// `[0, 1]`, every basis label present in the species table, and no two sites
/// of the periodic crystal closer than 0.1 Å. Syntax errors report line numbers.
pub fn load_crystal_definition(source: &str) -> Result<CrystalDefinition> {
    let raw: RawDefinition = toml::from_str(source)
        .map_err(|e| CoreError::CrystalParse(e.to_string()))?;

    let lattice_matrix = Matrix3::from_columns(&[
        Vector3::from(raw.cell.a),
        Vector3::from(raw.cell.b),
        Vector3::from(raw.cell.c),
    ]);
    if !lattice_matrix.iter().all(|x| x.is_finite()) {
        return Err(CoreError::CrystalDefinition(
            "lattice vectors contain non-finite entries".into(),
        ));
    }
    let volume = lattice_matrix.determinant().abs();
    if volume < 1e-9 {
        return Err(CoreError::CrystalDefinition(format!(
            "lattice vectors are linearly dependent (cell volume {volume:.3e} Å³)"
        )));
    }

    let mut species_table = BTreeMap::new();
    for sp in &raw.species {
        if !sp.gamma_mhz_per_t.is_finite() {
            return Err(CoreError::CrystalDefinition(format!(
                "species '{}': non-finite gyromagnetic ratio",
                sp.label
            )));
        }
        if (sp.spin - 0.5).abs() > 1e-12 {
            return Err(CoreError::CrystalDefinition(format!(
                "species '{}': spin quantum number {} is unsupported (only 1/2)",
                sp.label, sp.spin
            )));
        }
        if !(0.0..=1.0).contains(&sp.abundance) {
            return Err(CoreError::CrystalDefinition(format!(
                "species '{}': abundance {} outside [0, 1]",
                sp.label, sp.abundance
            )));
        }
        let prev = species_table.insert(
            sp.label.clone(),
            Arc::new(SpinSpecies {
                label: sp.label.clone(),
                gamma_mhz_per_t: sp.gamma_mhz_per_t,
                spin_quantum_number: sp.spin,
                natural_abundance: sp.abundance,
            }),
        );
        if prev.is_some() {
            return Err(CoreError::CrystalDefinition(format!(
                "species '{}' defined twice",
                sp.label
            )));
        }
    }

    let mut basis_sites = Vec::with_capacity(raw.basis.len());
    for (i, b) in raw.basis.iter().enumerate() {
        if !species_table.contains_key(&b.label) {
            return Err(CoreError::CrystalDefinition(format!(
                "basis site {i}: unknown element label '{}'",
                b.label
            )));
        }
        let frac = Vector3::from(b.frac);
        if !frac.iter().all(|x| x.is_finite() && (0.0..1.0).contains(x)) {
            return Err(CoreError::CrystalDefinition(format!(
                "basis site {i} ('{}'): fractional coordinates {:?} outside [0, 1)",
                b.label, b.frac
            )));
        }
        basis_sites.push(BasisSite {
            label: b.label.clone(),
            frac,
        });
    }
    if basis_sites.is_empty() {
        return Err(CoreError::CrystalDefinition("empty basis".into()));
    }

    let def = CrystalDefinition {
        lattice_matrix,
        basis_sites,
        species_table,
    };
    check_min_separation(&def)?;
    Ok(def)
}

/// Verify that no two sites of the periodic crystal are closer than
/// [`MIN_SITE_SEPARATION_ANGSTROM`]. Checking the home cell against its 27
/// neighboring cells is exhaustive for a periodic lattice.
fn check_min_separation(def: &CrystalDefinition) -> Result<()> {
    let m = &def.lattice_matrix;
    let home: Vec<Vector3<f64>> = def.basis_sites.iter().map(|b| m * b.frac).collect();
    for n1 in -1..=1_i64 {
        for n2 in -1..=1_i64 {
            for n3 in -1..=1_i64 {
                let shift = m * Vector3::new(n1 as f64, n2 as f64, n3 as f64);
                for (i, pi) in home.iter().enumerate() {
                    for (j, pj) in home.iter().enumerate() {
                        if n1 == 0 && n2 == 0 && n3 == 0 && i >= j {
                            continue;
                        }
                        let d = (pi - (pj + shift)).norm();
                        if d < MIN_SITE_SEPARATION_ANGSTROM {
                            return Err(CoreError::CrystalDefinition(format!(
                                "basis sites {i} and {j} (cell offset [{n1},{n2},{n3}]) \
                                 are {d:.4} Å apart (< {MIN_SITE_SEPARATION_ANGSTROM} Å)"
                            )));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Supercell generation
// ---------------------------------------------------------------------------

/// Deterministic per-site isotope draw. The generator is keyed by the seed and
/// the cell translation, with the basis index selecting an independent stream,
/// so each lattice site's draw is independent of every other site and of the
/// box extent.
fn site_is_occupied(seed: u64, cell: [i64; 3], basis_index: usize, abundance: f64) -> bool {
    if abundance <= 0.0 {
        return false;
    }
    if abundance >= 1.0 {
        return true;
    }
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&cell[0].to_le_bytes());
    key[16..24].copy_from_slice(&cell[1].to_le_bytes());
    key[24..32].copy_from_slice(&cell[2].to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(basis_index as u64);
    rng.gen::<f64>() < abundance
}

/// Replicate the unit cell to fill a box of the given extent (nm) centered on
/// the chosen defect site, remove the defect's own nucleus, and assign
/// spin-active isotopes site-by-site with the seeded generator.
///
/// The defect must address a deterministically spin-occupied basis site
/// (abundance 1 and nonzero gyromagnetic ratio) — i.e. a host-lattice nuclear
/// site the electron substitutes for. Regeneration with identical
/// `(definition, extent, defect, seed)` is bit-identical, and growing the box
/// preserves the isotope assignment of all previously contained sites.
pub fn build_supercell(
    def: &CrystalDefinition,
    extent_nm: Vector3<f64>,
    defect_site_index: usize,
    seed: u64,
) -> Result<BathLattice> {
    if !extent_nm.iter().all(|x| x.is_finite() && *x > 0.0) {
        return Err(CoreError::Geometry(format!(
            "box extent must be strictly positive, got {:?}",
            (extent_nm.x, extent_nm.y, extent_nm.z)
        )));
    }
    let defect_basis = def.basis_sites.get(defect_site_index).ok_or_else(|| {
        CoreError::Geometry(format!(
            "defect site index {defect_site_index} out of range ({} basis sites)",
            def.basis_sites.len()
        ))
    })?;
    let defect_species = &def.species_table[&defect_basis.label];
    if defect_species.natural_abundance < 1.0 || defect_species.gamma_mhz_per_t == 0.0 {
        return Err(CoreError::Geometry(format!(
            "defect site index {defect_site_index} addresses '{}', which is not a \
             deterministically spin-occupied host site",
            defect_basis.label
        )));
    }

    let m = &def.lattice_matrix;
    let m_inv = m
        .try_inverse()
        .expect("validated lattice matrix is invertible");
    let defect_position = m * defect_basis.frac;
    let half = extent_nm * 10.0 / 2.0; // nm → Å, half-extent per axis

    // Conservative integer translation ranges: map the box corners into
    // fractional space; a site at frac + n lands inside only if n is within
    // [floor(min corner) - 1, ceil(max corner) + 1] per component.
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let corner =
                    defect_position + Vector3::new(sx * half.x, sy * half.y, sz * half.z);
                let s = m_inv * corner;
                for k in 0..3 {
                    lo[k] = lo[k].min(s[k].floor() as i64 - 1);
                    hi[k] = hi[k].max(s[k].ceil() as i64 + 1);
                }
            }
        }
    }

    let mut lattice_sites = Vec::new();
    let mut sites = Vec::new();
    for n1 in lo[0]..=hi[0] {
        for n2 in lo[1]..=hi[1] {
            for n3 in lo[2]..=hi[2] {
                let shift = Vector3::new(n1 as f64, n2 as f64, n3 as f64);
                for (bi, basis) in def.basis_sites.iter().enumerate() {
                    let rel = m * (basis.frac + shift) - defect_position;
                    if rel.x.abs() > half.x || rel.y.abs() > half.y || rel.z.abs() > half.z {
                        continue;
                    }
                    let is_defect = n1 == 0 && n2 == 0 && n3 == 0 && bi == defect_site_index;
                    if is_defect {
                        continue;
                    }
                    let species = Arc::clone(&def.species_table[&basis.label]);
                    let spin_active = site_is_occupied(
                        seed,
                        [n1, n2, n3],
                        bi,
                        species.natural_abundance,
                    );
                    if spin_active {
                        sites.push(BathSpin {
                            species: Arc::clone(&species),
                            position: rel,
                        });
                    }
                    lattice_sites.push(LatticeSite {
                        species,
                        cell: [n1, n2, n3],
                        basis_index: bi,
                        position: rel,
                        spin_active,
                    });
                }
            }
        }
    }

    Ok(BathLattice {
        sites,
        lattice_sites,
        defect_position,
        box_extent: extent_nm,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Geometric queries
// ---------------------------------------------------------------------------

fn distance_then_lex(a: &Vector3<f64>, b: &Vector3<f64>) -> std::cmp::Ordering {
    let (ra, rb) = (a.norm(), b.norm());
    ra.total_cmp(&rb)
        .then_with(|| a.x.total_cmp(&b.x))
        .then_with(|| a.y.total_cmp(&b.y))
        .then_with(|| a.z.total_cmp(&b.z))
}

/// All spin-active bath nuclei with `|position| ≤ radius` (Å), optionally
/// restricted to one species label, sorted by distance from the defect
/// (ties broken lexicographically by position).
pub fn sites_within(
    lat: &BathLattice,
    radius_angstrom: f64,
    species_filter: Option<&str>,
) -> Vec<BathSpin> {
    assert!(radius_angstrom >= 0.0, "radius must be non-negative");
    let mut out: Vec<BathSpin> = lat
        .sites
        .iter()
        .filter(|s| s.position.norm() <= radius_angstrom)
        .filter(|s| species_filter.map_or(true, |f| s.species.label == f))
        .cloned()
        .collect();
    out.sort_by(|a, b| distance_then_lex(&a.position, &b.position));
    out
}

/// Like [`sites_within`], but over *all* lattice sites regardless of isotope
/// assignment — the geometry query needed for occupancy statistics ("how many
/// silicon sites sit within 6 Å", before asking which ones carry a spin).
pub fn lattice_sites_within(
    lat: &BathLattice,
    radius_angstrom: f64,
    species_filter: Option<&str>,
) -> Vec<LatticeSite> {
    assert!(radius_angstrom >= 0.0, "radius must be non-negative");
    let mut out: Vec<LatticeSite> = lat
        .lattice_sites
        .iter()
        .filter(|s| s.position.norm() <= radius_angstrom)
        .filter(|s| species_filter.map_or(true, |f| s.species.label == f))
        .cloned()
        .collect();
    out.sort_by(|a, b| distance_then_lex(&a.position, &b.position));
    out
}

/// Binomial occupancy distribution: probabilities of finding k = 0..=n
/// spin-active isotopes among `n_sites` sites of the given abundance.
///
/// The returned vector has length `n_sites + 1` and sums to 1 within 1e-12.
pub fn occupancy_distribution(n_sites: usize, abundance: f64) -> Vec<f64> {
    assert!(
        (0.0..=1.0).contains(&abundance),
        "abundance must lie in [0, 1]"
    );
    let n = n_sites;
    let mut pmf = vec![0.0; n + 1];
    if abundance == 0.0 {
        pmf[0] = 1.0;
        return pmf;
    }
    if abundance == 1.0 {
        pmf[n] = 1.0;
        return pmf;
    }
    // Multiplicative recurrence from P(0) = (1-p)^n keeps every term accurate
    // to a few ulps for the modest n used here.
    let ratio = abundance / (1.0 - abundance);
    pmf[0] = (1.0 - abundance).powi(n as i32);
    for k in 0..n {
        pmf[k + 1] = pmf[k] * ratio * ((n - k) as f64) / ((k + 1) as f64);
    }
    pmf
}
