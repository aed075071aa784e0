//! Prism-array optics: absorption inside the prisms, energy-dependent
//! deflection, and the mapping of 10 eV bins onto detector rows.
//!
//! Detector row `n` is the cell `[n - 0.5, n + 0.5)` of the continuous
//! deflection coordinate; row 0 sits at zero deflection, so higher energies
//! land on lower rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::materials::{DeltaModel, EnergyGrid, EnergySpectrum, MaterialTable};
use crate::numeric::CompensatedSum;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrismGeometry {
    /// Prism tip angle (rad).
    pub alpha_p: f64,
    /// Prisms per array.
    pub n_pa: u32,
    /// Impinging height of the ray on the prism (m).
    pub y: f64,
    /// Prism-to-detector distance (m).
    pub d: f64,
    /// Detector row pitch (m).
    pub h_pixel: f64,
    pub n_rows: usize,
    pub delta: DeltaModel,
}

/// Named geometry presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeometryPreset {
    /// Simulation setup: 50 prisms at 60°, y = 0.1 mm, d = 10 m, 6.5 µm rows.
    #[serde(rename = "bm18-sim")]
    Bm18Sim,
    /// Experimental setup: 100 prisms at 70.52°, d = 28 m, 14.28 µm rows.
    #[serde(rename = "bm18-exp")]
    Bm18Exp,
}

impl GeometryPreset {
    pub fn name(&self) -> &'static str {
        match self {
            GeometryPreset::Bm18Sim => "bm18-sim",
            GeometryPreset::Bm18Exp => "bm18-exp",
        }
    }

    /// Uncalibrated geometry: δ follows the free-electron silicon model until
    /// [`calibrate_delta`] replaces it.
    pub fn geometry(&self) -> PrismGeometry {
        let delta = DeltaModel::silicon_free_electron();
        match self {
            GeometryPreset::Bm18Sim => PrismGeometry {
                alpha_p: 60f64.to_radians(),
                n_pa: 50,
                y: 1e-4,
                d: 10.0,
                h_pixel: 6.5e-6,
                n_rows: 101,
                delta,
            },
            GeometryPreset::Bm18Exp => PrismGeometry {
                alpha_p: 70.52f64.to_radians(),
                n_pa: 100,
                y: 1e-4,
                d: 28.0,
                h_pixel: 14.28e-6,
                n_rows: 101,
                delta,
            },
        }
    }
}

impl std::str::FromStr for GeometryPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm18-sim" => Ok(GeometryPreset::Bm18Sim),
            "bm18-exp" => Ok(GeometryPreset::Bm18Exp),
            other => Err(Error::InvalidParameter(format!("unknown geometry preset {other:?}"))),
        }
    }
}

/// Table 1 anchor of the simulation setup: row 50 centered on 32.565 keV.
pub const ANCHOR_ENERGY_KEV: f64 = 32.565;
pub const ANCHOR_ROW: f64 = 50.0;

impl PrismGeometry {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.alpha_p > 0.0 && self.alpha_p < std::f64::consts::PI) {
            return bad(format!("prism angle must lie in (0, pi), got {}", self.alpha_p));
        }
        if self.n_pa == 0 {
            return bad("need at least one prism".into());
        }
        if !(self.y >= 0.0) || !(self.d > 0.0) || !(self.h_pixel > 0.0) {
            return bad("y must be >= 0 and d, h_pixel > 0".into());
        }
        if self.n_rows == 0 {
            return bad("need at least one detector row".into());
        }
        Ok(())
    }

    pub fn with_delta(mut self, delta: DeltaModel) -> Self {
        self.delta = delta;
        self
    }

    fn half_angle_sin(&self) -> f64 {
        (self.alpha_p / 2.0).sin()
    }

    /// Total radial deflection per unit row, i.e. rad per row.
    fn rad_per_row(&self) -> f64 {
        self.h_pixel / self.d
    }
}

/// Path length through the prism array, z = 2·tan(α/2)·y·n_pa.
pub fn prism_path_length(geom: &PrismGeometry) -> f64 {
    2.0 * (geom.alpha_p / 2.0).tan() * geom.y * geom.n_pa as f64
}

/// Per-bin transmission through the prism array.
pub fn prism_transmission_factors(grid: &EnergyGrid, geom: &PrismGeometry, si: &MaterialTable) -> Result<Vec<f64>> {
    let z = prism_path_length(geom);
    grid.centers()
        .map(|e| Ok((-si.linear_attenuation(e)? * z).exp()))
        .collect()
}

/// I₂(E) = I₁(E)·exp(−μ_Si(E)·z).
pub fn prism_transmission(spectrum: &EnergySpectrum, geom: &PrismGeometry, si: &MaterialTable) -> Result<EnergySpectrum> {
    let t = prism_transmission_factors(spectrum.grid(), geom, si)?;
    spectrum.attenuated(&t)
}

/// Deflection at the first prism surface γ(E) and the array total α_pa(E).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deflection {
    pub gamma: f64,
    pub alpha_pa: f64,
}

fn deflection_for_delta(delta: f64, geom: &PrismGeometry) -> Result<Deflection> {
    let s = geom.half_angle_sin();
    let c = (geom.alpha_p / 2.0).cos();
    let arg = s / (1.0 - delta);
    if !(arg.abs() <= 1.0) || !(delta < 1.0) {
        return Err(Error::Numeric(format!(
            "delta {delta} leaves the arcsin domain for prism angle {}",
            geom.alpha_p
        )));
    }
    // γ = asin(arg) − α/2, rewritten as asin of sin(γ) to avoid cancelling
    // two O(1) angles when γ is ~1e-7.
    let eps = s * delta / (1.0 - delta);
    let q = 2.0 * s * eps + eps * eps;
    let sin_gamma = eps * c + s * q / (c + (c * c - q).sqrt());
    let gamma = sin_gamma.asin();
    Ok(Deflection {
        gamma,
        alpha_pa: 2.0 * geom.n_pa as f64 * gamma,
    })
}

pub fn deflection_angle(e: f64, geom: &PrismGeometry) -> Result<Deflection> {
    deflection_for_delta(geom.delta.delta(e)?, geom)
}

/// Continuous detector row hit by photons of energy `e`.
pub fn energy_to_row(e: f64, geom: &PrismGeometry) -> Result<f64> {
    Ok(deflection_angle(e, geom)?.alpha_pa / geom.rad_per_row())
}

/// Inverse of [`energy_to_row`]; `row` must be > 0.
pub fn row_to_energy(row: f64, geom: &PrismGeometry) -> Result<f64> {
    if !(row > 0.0) {
        return Err(Error::InvalidParameter(format!("row must be > 0 to invert, got {row}")));
    }
    let delta = delta_for_row(row, geom)?;
    Ok((geom.delta.c_delta() / delta).sqrt())
}

fn delta_for_row(row: f64, geom: &PrismGeometry) -> Result<f64> {
    let gamma = row * geom.rad_per_row() / (2.0 * geom.n_pa as f64);
    let angle = gamma + geom.alpha_p / 2.0;
    if angle >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::Numeric(format!("row {row} needs a deflection beyond 90 degrees")));
    }
    let s = geom.half_angle_sin();
    let c = (geom.alpha_p / 2.0).cos();
    let half = (gamma / 2.0).sin();
    // δ = 1 − s / sin(α/2 + γ) with the difference expanded analytically.
    let delta = (c * gamma.sin() - 2.0 * s * half * half) / angle.sin();
    if !(delta > 0.0) {
        return Err(Error::Numeric(format!("row {row} maps to non-positive delta")));
    }
    Ok(delta)
}

/// Solves for δ's calibration constant so that `anchor_energy` lands on `anchor_row`.
///
/// The closed-form inverse is exact; a Newton polish on the forward map
/// removes rounding so the fixed point holds to ~1e-12 relative.
pub fn calibrate_delta(geom: &PrismGeometry, anchor_energy: f64, anchor_row: f64) -> Result<DeltaModel> {
    geom.validate()?;
    if !(anchor_row > 0.0) || !(anchor_energy > 0.0) {
        return Err(Error::InvalidParameter("calibration anchor must be positive".into()));
    }
    let e2 = anchor_energy * anchor_energy;
    // Small-angle start: row ≈ 2·n_pa·δ·tan(α/2)·d/h.
    let mut delta = anchor_row * geom.rad_per_row() / (2.0 * geom.n_pa as f64 * (geom.alpha_p / 2.0).tan());
    for _ in 0..20 {
        let d = deflection_for_delta(delta, geom)?;
        let residual = d.alpha_pa / geom.rad_per_row() - anchor_row;
        let s = geom.half_angle_sin();
        let arg = s / (1.0 - delta);
        let dgamma = s / ((1.0 - delta) * (1.0 - delta)) / (1.0 - arg * arg).sqrt();
        let drow = 2.0 * geom.n_pa as f64 * dgamma / geom.rad_per_row();
        let step = residual / drow;
        delta -= step;
        if step.abs() <= 1e-15 * delta {
            break;
        }
    }
    if !(delta > 0.0) || delta >= 1.0 - geom.half_angle_sin() {
        return Err(Error::Numeric("no calibration inside the arcsin domain".into()));
    }
    DeltaModel::new(delta * e2)
}

/// Geometry with δ calibrated to the standard anchor (row 50 ↔ 32.565 keV).
pub fn calibrated(geom: PrismGeometry) -> Result<PrismGeometry> {
    let delta = calibrate_delta(&geom, ANCHOR_ENERGY_KEV, ANCHOR_ROW)?;
    Ok(geom.with_delta(delta))
}

/// Energy range `[e_min, e_max]` collected by row `n` (cell `[n-0.5, n+0.5)`).
/// Row 0 has no upper bound; `f64::INFINITY` is returned.
pub fn row_energy_range(n: usize, geom: &PrismGeometry) -> Result<(f64, f64)> {
    let lo = row_to_energy(n as f64 + 0.5, geom)?;
    let hi = if n == 0 {
        f64::INFINITY
    } else {
        row_to_energy(n as f64 - 0.5, geom)?
    };
    Ok((lo, hi))
}

/// Share of one energy bin deposited on one row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deposit {
    pub bin: usize,
    pub row: usize,
    pub fraction: f64,
}

/// Static bin → row assignment for a grid and geometry. The object does not
/// refract, so the plan is identical for every pixel.
#[derive(Debug, Clone)]
pub struct DispersionPlan {
    n_rows: usize,
    n_bins: usize,
    /// Deposits sorted by row, then bin.
    deposits: Vec<Deposit>,
    /// Fraction of each bin that falls outside `[0, n_rows)`.
    discarded: Vec<f64>,
    row_starts: Vec<usize>,
}

/// Overlap of `[a, b)` with `[c, d)`.
fn overlap(a: f64, b: f64, c: f64, d: f64) -> f64 {
    (b.min(d) - a.max(c)).max(0.0)
}

impl DispersionPlan {
    pub fn new(grid: &EnergyGrid, geom: &PrismGeometry) -> Result<Self> {
        geom.validate()?;
        let n_rows = geom.n_rows;
        let mut deposits = Vec::new();
        let mut discarded = Vec::with_capacity(grid.n_bins());
        let lower = -0.5;
        let upper = n_rows as f64 - 0.5;
        for bin in 0..grid.n_bins() {
            // Higher energy → smaller row.
            let r_lo = energy_to_row(grid.upper_edge(bin), geom)?;
            let r_hi = energy_to_row(grid.lower_edge(bin), geom)?;
            let span = r_hi - r_lo;
            if !(span > 0.0) {
                return Err(Error::Numeric(format!("bin {bin} has non-positive row span")));
            }
            let mut kept = CompensatedSum::new();
            let first = (r_lo.max(lower) + 0.5).floor().max(0.0) as usize;
            let last = ((r_hi.min(upper) + 0.5).floor().max(0.0) as usize).min(n_rows - 1);
            if r_hi > lower && r_lo < upper {
                for row in first..=last {
                    let c = row as f64 - 0.5;
                    let f = overlap(r_lo, r_hi, c, c + 1.0) / span;
                    if f > 0.0 {
                        deposits.push(Deposit { bin, row, fraction: f });
                        kept.add(f);
                    }
                }
            }
            discarded.push((1.0 - kept.value()).max(0.0));
        }
        deposits.sort_by_key(|d| (d.row, d.bin));
        let mut row_starts = vec![0; n_rows + 1];
        for d in &deposits {
            row_starts[d.row + 1] += 1;
        }
        for r in 0..n_rows {
            row_starts[r + 1] += row_starts[r];
        }
        Ok(Self {
            n_rows,
            n_bins: grid.n_bins(),
            deposits,
            discarded,
            row_starts,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn deposits(&self) -> &[Deposit] {
        &self.deposits
    }

    pub fn row_deposits(&self, row: usize) -> &[Deposit] {
        &self.deposits[self.row_starts[row]..self.row_starts[row + 1]]
    }

    pub fn discarded_fraction(&self, bin: usize) -> f64 {
        self.discarded[bin]
    }

    /// Smallest and largest bin index that deposits on any row.
    pub fn bin_span(&self) -> Option<(usize, usize)> {
        let lo = self.deposits.iter().map(|d| d.bin).min()?;
        let hi = self.deposits.iter().map(|d| d.bin).max()?;
        Some((lo, hi))
    }
}

/// Photons per row plus the photons that missed the kept rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RowCounts {
    pub rows: Vec<f64>,
    pub discarded: f64,
}

impl RowCounts {
    pub fn deposited(&self) -> f64 {
        self.rows.iter().copied().collect::<CompensatedSum>().value()
    }
}

/// Disperses a spectrum onto detector rows. Photons are conserved:
/// `deposited + discarded == spectrum.total()` up to compensated rounding.
pub fn disperse_spectrum_to_rows(spectrum: &EnergySpectrum, geom: &PrismGeometry) -> Result<RowCounts> {
    let plan = DispersionPlan::new(spectrum.grid(), geom)?;
    Ok(plan.disperse(spectrum.photons()))
}

impl DispersionPlan {
    pub fn disperse(&self, photons: &[f64]) -> RowCounts {
        let mut rows = vec![CompensatedSum::new(); self.n_rows];
        let mut kept_per_bin = vec![CompensatedSum::new(); self.n_bins];
        for d in &self.deposits {
            let share = photons[d.bin] * d.fraction;
            rows[d.row].add(share);
            kept_per_bin[d.bin].add(share);
        }
        // The remainder is computed per bin so that kept + discarded matches
        // the input bin exactly, independent of how fractions round.
        let discarded: CompensatedSum = photons
            .iter()
            .zip(&kept_per_bin)
            .map(|(p, k)| p - k.value())
            .collect();
        RowCounts {
            rows: rows.iter().map(|r| r.value()).collect(),
            discarded: discarded.value(),
        }
    }
}
