//! Energy-resolved material data and source spectra.
//!
//! All energies are in keV, linear attenuation coefficients in 1/m. Tables
//! are plain two-column text (`energy mu`), `#` comments allowed. A comment
//! of the form `# density_kg_m3 = 2330` sets the material density.
//!
//! Lookups between samples use log-log interpolation; lookups outside the
//! tabulated range are errors, never extrapolated.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::compensated_sum;

/// Uniform energy binning; bin `i` spans `[e_min + i*pitch, e_min + (i+1)*pitch)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyGrid {
    e_min: f64,
    pitch: f64,
    n_bins: usize,
}

/// Default simulation bin width (10 eV).
pub const DEFAULT_PITCH_KEV: f64 = 0.010;

impl EnergyGrid {
    pub fn new(e_min: f64, pitch: f64, n_bins: usize) -> Result<Self> {
        if !(pitch > 0.0) || !pitch.is_finite() {
            return Err(Error::InvalidParameter(format!("energy pitch must be > 0, got {pitch}")));
        }
        if n_bins == 0 {
            return Err(Error::InvalidParameter("energy grid needs at least one bin".into()));
        }
        if !(e_min >= 0.0) || !e_min.is_finite() {
            return Err(Error::InvalidParameter(format!("e_min must be >= 0, got {e_min}")));
        }
        Ok(Self { e_min, pitch, n_bins })
    }

    /// Grid covering `[e_lo, e_hi)` with the given pitch.
    pub fn spanning(e_lo: f64, e_hi: f64, pitch: f64) -> Result<Self> {
        if !(e_hi > e_lo) {
            return Err(Error::InvalidParameter(format!("empty energy span [{e_lo}, {e_hi})")));
        }
        let n = ((e_hi - e_lo) / pitch - 1e-9).ceil().max(1.0) as usize;
        Self::new(e_lo, pitch, n)
    }

    pub fn e_min(&self) -> f64 {
        self.e_min
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn e_max(&self) -> f64 {
        self.lower_edge(self.n_bins)
    }

    pub fn lower_edge(&self, i: usize) -> f64 {
        self.e_min + i as f64 * self.pitch
    }

    pub fn upper_edge(&self, i: usize) -> f64 {
        self.lower_edge(i + 1)
    }

    pub fn center(&self, i: usize) -> f64 {
        self.e_min + (i as f64 + 0.5) * self.pitch
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_bins).map(move |i| self.center(i))
    }
}

/// Tabulated linear attenuation of one material.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialTable {
    name: String,
    energies: Vec<f64>,
    mu: Vec<f64>,
    density: Option<f64>,
}

impl MaterialTable {
    pub fn new(name: impl Into<String>, energies: Vec<f64>, mu: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if energies.len() != mu.len() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {} energies but {} attenuation values",
                energies.len(),
                mu.len()
            )));
        }
        if energies.len() < 2 {
            return Err(Error::Format(format!("{name}: need at least two samples")));
        }
        if energies.windows(2).any(|w| !(w[1] > w[0])) || energies.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::NonMonotoneEnergy(name));
        }
        if let Some((e, v)) = energies.iter().zip(&mu).find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::NonPositiveAttenuation {
                name,
                energy_kev: *e,
                value: *v,
            });
        }
        Ok(Self {
            name,
            energies,
            mu,
            density: None,
        })
    }

    pub fn with_density(mut self, kg_per_m3: f64) -> Self {
        self.density = Some(kg_per_m3);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn values(&self) -> &[f64] {
        &self.mu
    }

    /// Density in kg/m³, when the table declares one.
    pub fn density(&self) -> Option<f64> {
        self.density
    }

    pub fn range(&self) -> (f64, f64) {
        (self.energies[0], *self.energies.last().unwrap())
    }

    pub fn contains(&self, e: f64) -> bool {
        let (lo, hi) = self.range();
        e >= lo && e <= hi
    }

    /// Linear attenuation (1/m) at `e` keV.
    pub fn linear_attenuation(&self, e: f64) -> Result<f64> {
        let (lo, hi) = self.range();
        if !(e >= lo && e <= hi) {
            return Err(Error::EnergyOutOfRange {
                name: self.name.clone(),
                energy_kev: e,
                min_kev: lo,
                max_kev: hi,
            });
        }
        Ok(loglog_interp(&self.energies, &self.mu, e))
    }

    /// Attenuation at every bin center of `grid`.
    pub fn sample_grid(&self, grid: &EnergyGrid) -> Result<Vec<f64>> {
        grid.centers().map(|e| self.linear_attenuation(e)).collect()
    }
}

/// Log-log interpolation on a strictly increasing abscissa; `x` must lie in range.
/// Knots are returned exactly. Falls back to linear interpolation when an
/// endpoint value is zero.
fn loglog_interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let i = match xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => return ys[i],
        Err(i) => i,
    };
    let (x0, x1, y0, y1) = (xs[i - 1], xs[i], ys[i - 1], ys[i]);
    if y0 > 0.0 && y1 > 0.0 {
        let t = (x / x0).ln() / (x1 / x0).ln();
        (y0.ln() + t * (y1 / y0).ln()).exp()
    } else {
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

struct TwoColumn {
    x: Vec<f64>,
    y: Vec<f64>,
    density: Option<f64>,
}

fn parse_two_column(text: &str, path: &Path) -> Result<TwoColumn> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut density = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                if k.trim() == "density_kg_m3" {
                    density = v.trim().parse::<f64>().ok();
                }
            }
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let mut cols = line.split_whitespace();
        let (a, b) = match (cols.next(), cols.next(), cols.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => return Err(parse_err(format!("expected two columns, got {line:?}"))),
        };
        let a: f64 = a.parse().map_err(|_| parse_err(format!("bad number {a:?}")))?;
        let b: f64 = b.parse().map_err(|_| parse_err(format!("bad number {b:?}")))?;
        x.push(a);
        y.push(b);
    }
    Ok(TwoColumn { x, y, density })
}

/// Reads a two-column attenuation table (keV, 1/m).
pub fn load_material_table(path: impl AsRef<Path>) -> Result<MaterialTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "material".into());
    parse_material_table(&name, &text, path)
}

fn parse_material_table(name: &str, text: &str, path: &Path) -> Result<MaterialTable> {
    let cols = parse_two_column(text, path)?;
    let table = MaterialTable::new(name, cols.x, cols.y)?;
    Ok(match cols.density {
        Some(d) => table.with_density(d),
        None => table,
    })
}

/// Tables shipped with the crate (Elam cross sections, 10–500 keV).
pub mod bundled {
    use std::path::Path;

    use super::{parse_material_table, EnergySpectrum, MaterialTable};
    use crate::error::Result;
    use crate::materials::EnergyGrid;

    const SI: &str = include_str!("../data/si.txt");
    const AL: &str = include_str!("../data/al.txt");
    const SIO2: &str = include_str!("../data/sio2.txt");
    const LUAG: &str = include_str!("../data/luag.txt");
    const SPECTRUM: &str = include_str!("../data/spectrum_bm18_approx.txt");

    fn parse(name: &str, text: &str) -> MaterialTable {
        parse_material_table(name, text, Path::new(name)).expect("bundled table is valid")
    }

    pub fn silicon() -> MaterialTable {
        parse("si", SI)
    }

    pub fn aluminium() -> MaterialTable {
        parse("al", AL)
    }

    pub fn silica() -> MaterialTable {
        parse("sio2", SIO2)
    }

    pub fn luag() -> MaterialTable {
        parse("luag", LUAG)
    }

    /// Looks up a bundled table by identifier (`si`, `al`, `sio2`, `luag`).
    pub fn by_name(name: &str) -> Option<MaterialTable> {
        match name.to_ascii_lowercase().as_str() {
            "si" | "silicon" => Some(silicon()),
            "al" | "aluminium" | "aluminum" => Some(aluminium()),
            "sio2" | "silica" => Some(silica()),
            "luag" | "lu3al5o12" => Some(luag()),
            _ => None,
        }
    }

    /// Approximate source spectrum resampled onto `grid`.
    pub fn spectrum(grid: EnergyGrid) -> Result<EnergySpectrum> {
        EnergySpectrum::from_text(SPECTRUM, Path::new("spectrum_bm18_approx.txt"), grid)
    }

    /// The default simulation grid: 10 eV bins from 20 to 400 keV.
    pub fn default_grid() -> EnergyGrid {
        EnergyGrid::spanning(20.0, 400.0, super::DEFAULT_PITCH_KEV).expect("valid grid")
    }
}

/// Expected photons per energy bin per pixel per exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySpectrum {
    grid: EnergyGrid,
    photons: Vec<f64>,
}

impl EnergySpectrum {
    pub fn new(grid: EnergyGrid, photons: Vec<f64>) -> Result<Self> {
        if photons.len() != grid.n_bins() {
            return Err(Error::ShapeMismatch(format!(
                "spectrum has {} values for {} bins",
                photons.len(),
                grid.n_bins()
            )));
        }
        if photons.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidParameter("spectrum counts must be finite and >= 0".into()));
        }
        Ok(Self { grid, photons })
    }

    /// Resamples tabulated `(keV, photons per bin)` samples onto `grid` bin centers.
    /// Sample values are interpreted per bin of `grid`'s pitch.
    pub fn from_samples(energies: &[f64], counts: &[f64], grid: EnergyGrid) -> Result<Self> {
        let (lo, hi) = (energies[0], energies[energies.len() - 1]);
        let mut photons = Vec::with_capacity(grid.n_bins());
        for e in grid.centers() {
            if e < lo || e > hi {
                return Err(Error::EnergyOutOfRange {
                    name: "spectrum".into(),
                    energy_kev: e,
                    min_kev: lo,
                    max_kev: hi,
                });
            }
            photons.push(loglog_interp(energies, counts, e));
        }
        Self::new(grid, photons)
    }

    fn from_text(text: &str, path: &Path, grid: EnergyGrid) -> Result<Self> {
        let cols = parse_two_column(text, path)?;
        if cols.x.len() < 2 {
            return Err(Error::Format(format!("{}: need at least two samples", path.display())));
        }
        if cols.x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::NonMonotoneEnergy(path.display().to_string()));
        }
        Self::from_samples(&cols.x, &cols.y, grid)
    }

    /// Loads a two-column spectrum file and resamples it onto `grid`.
    pub fn load(path: impl AsRef<Path>, grid: EnergyGrid) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path, grid)
    }

    pub fn grid(&self) -> &EnergyGrid {
        &self.grid
    }

    pub fn photons(&self) -> &[f64] {
        &self.photons
    }

    pub fn total(&self) -> f64 {
        compensated_sum(self.photons.iter().copied())
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.grid, self.photons.iter().map(|p| p * factor).collect())
    }

    /// Applies a per-bin transmission factor.
    pub fn attenuated(&self, transmission: &[f64]) -> Result<Self> {
        if transmission.len() != self.photons.len() {
            return Err(Error::ShapeMismatch("transmission length differs from spectrum".into()));
        }
        Self::new(
            self.grid,
            self.photons.iter().zip(transmission).map(|(p, t)| p * t).collect(),
        )
    }
}

/// Silicon refractive index decrement, δ(E) = C / E².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaModel {
    c_delta: f64,
}

/// Classical electron radius (m).
const ELECTRON_RADIUS_M: f64 = 2.817_940_326_2e-15;
/// hc in keV·m.
const HC_KEV_M: f64 = 12.398_419_843_320_026e-10;
const AVOGADRO: f64 = 6.022_140_76e23;

impl DeltaModel {
    pub fn new(c_delta: f64) -> Result<Self> {
        if !(c_delta > 0.0) || !c_delta.is_finite() {
            return Err(Error::InvalidParameter(format!("c_delta must be > 0, got {c_delta}")));
        }
        Ok(Self { c_delta })
    }

    /// Free-electron (far from edges) model δ = r_e λ² n_e / 2π for an element
    /// of density `rho_g_cm3`, atomic number `z` and molar mass `a` g/mol.
    pub fn free_electron(rho_g_cm3: f64, z: f64, a: f64) -> Result<Self> {
        let electrons_per_m3 = rho_g_cm3 * 1e6 * AVOGADRO * z / a;
        // δ·E² is independent of E; evaluate at 1 keV.
        let lambda = HC_KEV_M;
        Self::new(ELECTRON_RADIUS_M * lambda * lambda * electrons_per_m3 / (2.0 * std::f64::consts::PI))
    }

    /// Textbook silicon: 2.33 g/cm³, Z = 14, A = 28.09.
    pub fn silicon_free_electron() -> Self {
        Self::free_electron(2.33, 14.0, 28.09).expect("positive constants")
    }

    pub fn c_delta(&self) -> f64 {
        self.c_delta
    }

    pub fn delta(&self, e: f64) -> Result<f64> {
        if !(e > 0.0) {
            return Err(Error::InvalidParameter(format!("energy must be > 0 keV, got {e}")));
        }
        Ok(self.c_delta / (e * e))
    }
}

/// δ_Si(E) for a model; see [`DeltaModel::delta`].
pub fn delta_si(model: &DeltaModel, e: f64) -> Result<f64> {
    model.delta(e)
}

/// Linear attenuation of `table` at `e`; see [`MaterialTable::linear_attenuation`].
pub fn linear_attenuation(table: &MaterialTable, e: f64) -> Result<f64> {
    table.linear_attenuation(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn two_row() -> MaterialTable {
        MaterialTable::new("t", vec![10.0, 100.0], vec![1000.0, 10.0]).unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_two_row_file() {
        let f = write_tmp("# test\n10 1000\n100 10\n");
        let t = load_material_table(f.path()).unwrap();
        assert_eq!(t.energies(), &[10.0, 100.0]);
        assert_eq!(t.values(), &[1000.0, 10.0]);
    }

    #[test]
    fn duplicate_energy_rejected() {
        let f = write_tmp("10 1000\n10 900\n100 10\n");
        let err = load_material_table(f.path()).unwrap_err();
        assert!(err.to_string().contains("non-monotone energy grid"), "{err}");
    }

    #[test]
    fn non_positive_mu_rejected() {
        let f = write_tmp("10 1000\n20 0\n");
        assert!(matches!(
            load_material_table(f.path()),
            Err(Error::NonPositiveAttenuation { .. })
        ));
    }

    #[test]
    fn parse_error_names_line() {
        let f = write_tmp("10 1000\n20 abc\n");
        match load_material_table(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn knot_is_exact() {
        let si = bundled::silicon();
        for (e, mu) in si.energies().iter().zip(si.values()) {
            assert_eq!(si.linear_attenuation(*e).unwrap(), *mu);
        }
    }

    #[test]
    fn loglog_geometric_midpoint() {
        // log-log line through (10, 1000) and (100, 10): mu = 1000 * (E/10)^-2.
        let t = two_row();
        let mid = 10f64.powf(1.5);
        assert!((t.linear_attenuation(mid).unwrap() - 100.0).abs() < 1e-9);
        let e = 31.6228;
        let oracle = 1000.0 * (e / 10.0f64).powi(-2);
        assert!((t.linear_attenuation(e).unwrap() - oracle).abs() < 1e-9);
        assert!((t.linear_attenuation(e).unwrap() - 100.0).abs() < 1e-3);
    }

    #[test]
    fn out_of_range_is_error() {
        let t = two_row();
        assert!(matches!(
            t.linear_attenuation(9.99),
            Err(Error::EnergyOutOfRange { .. })
        ));
        assert!(t.linear_attenuation(100.01).is_err());
    }

    #[test]
    fn delta_scales_inverse_square() {
        let m = DeltaModel::silicon_free_electron();
        for e in [10.0, 32.5, 77.7, 250.0] {
            let d1 = m.delta(e).unwrap();
            let d2 = m.delta(2.0 * e).unwrap();
            assert!((d2 - d1 / 4.0).abs() <= 1e-15 * d1);
            assert!((d1 * e * e - m.c_delta()).abs() <= 1e-15 * m.c_delta());
        }
        assert!(m.delta(0.0).is_err());
        assert!(m.delta(-1.0).is_err());
    }

    #[test]
    fn free_electron_silicon_delta() {
        // Oracle: r_e λ² n_e / 2π at 32.565 keV evaluated at 40 digits beforehand.
        let d = delta_si(&DeltaModel::silicon_free_electron(), 32.565).unwrap();
        assert!((d - 4.546378e-7).abs() < 1e-12, "{d}");
        assert!((d / 4.55e-7 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn bundled_tables_carry_density() {
        assert_eq!(bundled::silicon().density(), Some(2330.0));
        assert_eq!(bundled::luag().density(), Some(6730.0));
        for t in [bundled::silicon(), bundled::aluminium(), bundled::silica(), bundled::luag()] {
            let (lo, hi) = t.range();
            assert!(lo <= 20.0 && hi >= 400.0);
        }
    }

    #[test]
    fn spectrum_total_is_plain_sum() {
        let grid = EnergyGrid::new(20.0, 0.01, 1000).unwrap();
        let s = bundled::spectrum(grid).unwrap();
        let naive: f64 = s.photons().iter().sum();
        assert!((s.total() - naive).abs() <= 1e-9 * naive);
        assert!((s.scaled(2.0).unwrap().total() - 2.0 * s.total()).abs() <= 1e-9 * s.total());
    }

    #[test]
    fn grid_edges() {
        let g = EnergyGrid::spanning(20.0, 400.0, 0.01).unwrap();
        assert_eq!(g.n_bins(), 38_000);
        assert!((g.e_max() - 400.0).abs() < 1e-9);
        assert!(EnergyGrid::new(1.0, 0.0, 3).is_err());
        assert!(EnergyGrid::new(1.0, 0.1, 0).is_err());
    }
}
