//! Scintillator-camera signal chain and dataset simulation.
//!
//! The deterministic chain converts row-resolved photon counts into gray
//! values (ground truth). The stochastic chain applies, in order: Poisson on
//! absorbed X-ray photons, conversion to optical photons, a second Poisson,
//! quantum efficiency, dark current, PRNU gain, DSNU offset, readout noise,
//! and quantization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::materials::{EnergyGrid, EnergySpectrum, MaterialTable};
use crate::numeric::derive_seed;
use crate::optics::{prism_transmission_factors, row_energy_range, DispersionPlan, PrismGeometry};
use crate::phantom::{longitudinal_projection, VoxelPhantom};
use crate::stack::{RowEnergy, SinogramStack, StackData, StackMeta};

/// Exposure the bundled spectrum is normalized to (s).
pub const REFERENCE_EXPOSURE_S: f64 = 0.010;

/// Width of the energy groups used for the first Poisson stage in dataset
/// simulation (keV). See [`SimulationSetup`].
pub const NOISE_GROUP_KEV: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// LuAG scintillator thickness (m).
    pub scint_thickness: f64,
    /// Optical photons per MeV absorbed.
    pub scint_yield: f64,
    /// Optical loss divisor between scintillator and sensor.
    pub optical_loss: f64,
    pub qe: f64,
    pub electrons_per_dn: f64,
    /// Exposure (s); scales the spectrum relative to [`REFERENCE_EXPOSURE_S`].
    pub exposure: f64,
    /// Dark electrons per exposure; also the DSNU standard deviation.
    pub dark_current: f64,
    pub prnu_sigma: f64,
    /// Readout noise variance (e²).
    pub readout_sigma_sq: f64,
    pub bit_depth: u32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            scint_thickness: 2e-3,
            scint_yield: 25_000.0,
            optical_loss: 4000.0,
            qe: 0.82,
            electrons_per_dn: 0.46,
            exposure: 0.010,
            dark_current: 2.0,
            prnu_sigma: 0.001,
            readout_sigma_sq: 0.64,
            bit_depth: 16,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("detector: {m}")));
        let finite_nonneg = [
            self.scint_thickness,
            self.dark_current,
            self.prnu_sigma,
            self.readout_sigma_sq,
        ];
        if finite_nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("thickness, dark current and noise parameters must be finite and >= 0");
        }
        let positive = [self.scint_yield, self.optical_loss, self.electrons_per_dn, self.exposure];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("yield, optical loss, e/DN and exposure must be > 0");
        }
        if !(self.qe > 0.0 && self.qe <= 1.0) {
            return bad("qe must lie in (0, 1]");
        }
        if self.prnu_sigma >= 0.1 {
            return bad("prnu_sigma must be < 0.1");
        }
        if !(1..=16).contains(&self.bit_depth) {
            return bad("bit_depth must be within 1..=16");
        }
        Ok(())
    }

    pub fn max_dn(&self) -> f64 {
        ((1u32 << self.bit_depth) - 1) as f64
    }

    /// DN per absorbed photon of energy `e_kev`, deterministic chain.
    pub fn dn_per_photon(&self, e_kev: f64) -> f64 {
        e_kev * 1e-3 * self.scint_yield / self.optical_loss * self.qe / self.electrons_per_dn
    }

    fn optical_per_photon(&self, e_kev: f64) -> f64 {
        e_kev * 1e-3 * self.scint_yield / self.optical_loss
    }
}

/// 1 − exp(−μ_LuAG(E)·thickness).
pub fn scintillator_absorbed_fraction(e: f64, cfg: &DetectorConfig, luag: &MaterialTable) -> Result<f64> {
    let mu = luag.linear_attenuation(e)?;
    Ok(-(-mu * cfg.scint_thickness).exp_m1())
}

/// Photons of one energy bin reaching a row cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinPhotons {
    pub energy_kev: f64,
    pub photons: f64,
    /// Scintillator absorbed fraction at this energy.
    pub absorbed: f64,
}

/// Noise-free gray value of one pixel, before quantization.
pub fn expected_gray_value(bins: &[BinPhotons], cfg: &DetectorConfig) -> f64 {
    bins.iter()
        .map(|b| b.photons * b.absorbed * cfg.dn_per_photon(b.energy_kev))
        .sum()
}

/// Round half to even, then clamp to the detector range.
pub fn quantize(dn: f64, cfg: &DetectorConfig) -> u16 {
    if dn.is_nan() {
        return 0;
    }
    dn.round_ties_even().clamp(0.0, cfg.max_dn()) as u16
}

/// Intermediate values of one pass through the noise chain.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseTrace {
    /// Absorbed X-ray photons after the first Poisson draw.
    pub xray_photons: f64,
    /// Expected optical photons at the sensor.
    pub optical_expectation: f64,
    /// Optical photons after the second Poisson draw.
    pub optical_photons: f64,
    /// Electrons before PRNU (photo-electrons plus dark current).
    pub electrons: f64,
    pub prnu_gain: f64,
    pub dsnu_offset: f64,
    pub readout: f64,
    /// Real-valued DN before quantization.
    pub dn_unquantized: f64,
    pub dn: u16,
}

pub fn poisson_draw(lambda: f64, rng: &mut impl Rng) -> f64 {
    if !(lambda > 0.0) {
        return 0.0;
    }
    match Poisson::new(lambda) {
        Ok(p) => p.sample(rng),
        // Far beyond any detector flux; the normal limit is exact to O(λ^-1/2).
        Err(_) => (lambda + lambda.sqrt() * gaussian(rng)).max(0.0).round(),
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

fn normal(mean: f64, sd: f64, rng: &mut impl Rng) -> f64 {
    Normal::new(mean, sd).map(|n| n.sample(rng)).unwrap_or(mean)
}

/// Stages two onward, given the expected optical photon count.
fn finish_chain(optical_expectation: f64, cfg: &DetectorConfig, rng: &mut impl Rng, trace: &mut NoiseTrace) -> u16 {
    trace.optical_expectation = optical_expectation;
    trace.optical_photons = poisson_draw(optical_expectation, rng);
    trace.electrons = trace.optical_photons * cfg.qe + cfg.dark_current;
    trace.prnu_gain = normal(1.0, cfg.prnu_sigma, rng);
    trace.dsnu_offset = normal(0.0, cfg.dark_current, rng);
    trace.readout = normal(0.0, cfg.readout_sigma_sq.sqrt(), rng);
    let e = trace.electrons * trace.prnu_gain + trace.dsnu_offset + trace.readout;
    trace.dn_unquantized = e / cfg.electrons_per_dn;
    trace.dn = quantize(trace.dn_unquantized, cfg);
    trace.dn
}

/// Full noise chain for one pixel with a caller-owned generator.
pub fn apply_noise_traced(bins: &[BinPhotons], cfg: &DetectorConfig, rng: &mut impl Rng) -> NoiseTrace {
    let mut trace = NoiseTrace::default();
    let mut optical = 0.0;
    for b in bins {
        let n = poisson_draw(b.photons * b.absorbed, rng);
        trace.xray_photons += n;
        optical += n * cfg.optical_per_photon(b.energy_kev);
    }
    finish_chain(optical, cfg, rng, &mut trace);
    trace
}

/// Seeded noisy gray value for one pixel.
pub fn apply_noise(bins: &[BinPhotons], cfg: &DetectorConfig, seed: u64) -> u16 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_noise_traced(bins, cfg, &mut rng).dn
}

/// One deposit of the dispersion plan with everything pixel-independent
/// folded in.
#[derive(Debug, Clone, Copy)]
struct Term {
    mu1: f64,
    mu2: f64,
    /// Expected absorbed X-ray photons without object.
    absorbed: f64,
    /// DN per unattenuated deposit (absorbed · DN per photon).
    dn: f64,
    energy_kev: f64,
    group: u32,
}

/// Precomputed, pixel-independent part of the forward model.
///
/// For the noisy chain the first Poisson stage is drawn per group of bins
/// (about [`NOISE_GROUP_KEV`] wide within a row) instead of per 10 eV bin.
/// The group draw is the exact Poisson of the summed expectation; only the
/// conversion to optical photons uses the group's photon-weighted mean
/// energy, which keeps the mean exact and perturbs the variance by the
/// relative energy spread inside a group (about 1e-5).
#[derive(Debug, Clone)]
pub struct SimulationSetup {
    cfg: DetectorConfig,
    geom: PrismGeometry,
    n_rows: usize,
    terms: Vec<Term>,
    row_starts: Vec<usize>,
    /// Row of each group.
    group_rows: Vec<usize>,
    flat_field: Vec<f64>,
    row_energies: Vec<RowEnergy>,
    pub preset: Option<String>,
}

impl SimulationSetup {
    /// `spectrum` is the incident spectrum at [`REFERENCE_EXPOSURE_S`];
    /// `geom` should already be calibrated.
    pub fn new(
        spectrum: &EnergySpectrum,
        geom: &PrismGeometry,
        cfg: &DetectorConfig,
        si: &MaterialTable,
        luag: &MaterialTable,
        material1: &MaterialTable,
        material2: &MaterialTable,
    ) -> Result<Self> {
        cfg.validate()?;
        geom.validate()?;
        let grid: &EnergyGrid = spectrum.grid();
        let plan = DispersionPlan::new(grid, geom)?;
        let prism = prism_transmission_factors(grid, geom, si)?;
        let scale = cfg.exposure / REFERENCE_EXPOSURE_S;
        let n_rows = geom.n_rows;

        let mut terms = Vec::with_capacity(plan.deposits().len());
        let mut row_starts = vec![0usize; n_rows + 1];
        let mut group_rows = Vec::new();
        let mut row_energies = Vec::with_capacity(n_rows);
        for row in 0..n_rows {
            let deps = plan.row_deposits(row);
            let mut group_start_e = f64::NAN;
            let mut weighted_e = 0.0;
            let mut weight = 0.0;
            for d in deps {
                let e = grid.center(d.bin);
                if !(e - group_start_e < NOISE_GROUP_KEV) {
                    group_start_e = e;
                    group_rows.push(row);
                }
                let incident = spectrum.photons()[d.bin] * scale * d.fraction * prism[d.bin];
                let absorbed = incident * scintillator_absorbed_fraction(e, cfg, luag)?;
                terms.push(Term {
                    mu1: material1.linear_attenuation(e)?,
                    mu2: material2.linear_attenuation(e)?,
                    absorbed,
                    dn: absorbed * cfg.dn_per_photon(e),
                    energy_kev: e,
                    group: (group_rows.len() - 1) as u32,
                });
                weighted_e += incident * e;
                weight += incident;
            }
            row_starts[row + 1] = terms.len();
            let (lo, hi) = match row_energy_range(row, geom) {
                Ok((lo, hi)) => (lo.max(grid.e_min()), hi.min(grid.e_max())),
                Err(_) => (grid.e_min(), grid.e_max()),
            };
            let mean = if weight > 0.0 { weighted_e / weight } else { 0.5 * (lo + hi) };
            row_energies.push(RowEnergy { min: lo, max: hi, mean });
        }

        let mut setup = Self {
            cfg: *cfg,
            geom: *geom,
            n_rows,
            terms,
            row_starts,
            group_rows,
            flat_field: Vec::new(),
            row_energies,
            preset: None,
        };
        setup.flat_field = setup.expected_pixel(0.0, 0.0);
        if let Some((row, v)) = setup.flat_field.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::FlatFieldTooSmall { row, value: *v });
        }
        Ok(setup)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &PrismGeometry {
        &self.geom
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn row_energies(&self) -> &[RowEnergy] {
        &self.row_energies
    }

    pub fn flat_field(&self) -> &[f64] {
        &self.flat_field
    }

    /// Rows whose flat field is below 1 DN; kept but worth flagging.
    pub fn dim_rows(&self) -> Vec<usize> {
        (0..self.n_rows).filter(|r| self.flat_field[*r] < 1.0).collect()
    }

    /// Deterministic gray value per row for path lengths `l1`, `l2` (m).
    pub fn expected_pixel(&self, l1: f64, l2: f64) -> Vec<f64> {
        (0..self.n_rows)
            .map(|row| {
                self.terms[self.row_starts[row]..self.row_starts[row + 1]]
                    .iter()
                    .map(|t| t.dn * (-(t.mu1 * l1 + t.mu2 * l2)).exp())
                    .sum()
            })
            .collect()
    }

    /// Row-resolved photons reaching the scintillator for one pixel, in the
    /// form the standalone chain functions take.
    pub fn row_bins(&self, row: usize, l1: f64, l2: f64, luag_absorbed: impl Fn(f64) -> f64) -> Vec<BinPhotons> {
        self.terms[self.row_starts[row]..self.row_starts[row + 1]]
            .iter()
            .map(|t| {
                let absorbed = luag_absorbed(t.energy_kev);
                BinPhotons {
                    energy_kev: t.energy_kev,
                    photons: if absorbed > 0.0 { t.absorbed / absorbed } else { 0.0 } * (-(t.mu1 * l1 + t.mu2 * l2)).exp(),
                    absorbed,
                }
            })
            .collect()
    }

    /// Expected gray values per row plus per-group expected absorbed photons
    /// and photon-weighted energy, in one pass over the terms.
    fn pixel_eval(&self, l1: f64, l2: f64, gt: &mut [f64], lambda: &mut [f64], lambda_e: &mut [f64]) {
        lambda.iter_mut().for_each(|v| *v = 0.0);
        lambda_e.iter_mut().for_each(|v| *v = 0.0);
        for (row, g) in gt.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in &self.terms[self.row_starts[row]..self.row_starts[row + 1]] {
                let att = (-(t.mu1 * l1 + t.mu2 * l2)).exp();
                acc += t.dn * att;
                let a = t.absorbed * att;
                lambda[t.group as usize] += a;
                lambda_e[t.group as usize] += a * t.energy_kev;
            }
            *g = acc;
        }
    }

    /// Noisy gray values per row for one pixel.
    fn noisy_pixel(&self, lambda: &[f64], lambda_e: &[f64], rng: &mut impl Rng, out: &mut [u16]) {
        let mut optical = vec![0.0; self.n_rows];
        for (g, (&lam, &lam_e)) in lambda.iter().zip(lambda_e).enumerate() {
            if lam > 0.0 {
                let n = poisson_draw(lam, rng);
                optical[self.group_rows[g]] += n * self.cfg.optical_per_photon(lam_e / lam);
            }
        }
        let mut trace = NoiseTrace::default();
        for (row, o) in optical.iter().enumerate() {
            out[row] = finish_chain(*o, &self.cfg, rng, &mut trace);
        }
    }

    fn n_groups(&self) -> usize {
        self.group_rows.len()
    }

    /// Stack metadata shared by every stack this setup produces.
    pub fn stack_meta(&self, angles: &[f64], seed: u64) -> StackMeta {
        StackMeta {
            row_energies: self.row_energies.clone(),
            flat_field: self.flat_field.clone(),
            angles: angles.to_vec(),
            preset: self.preset.clone(),
            seed: Some(seed),
            extra: Default::default(),
        }
    }
}

/// Projection angles `a·π/K`, uniform over [0, π).
pub fn projection_angles(n_angles: usize) -> Vec<f64> {
    (0..n_angles)
        .map(|a| a as f64 * std::f64::consts::PI / n_angles as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionSpec {
    pub width: usize,
    /// Horizontal detector pitch (m).
    pub pixel_pitch: f64,
    pub n_angles: usize,
}

/// Ground truth plus noisy realizations of one slice.
#[derive(Debug, Clone)]
pub struct SliceAcquisition {
    pub phantom_index: usize,
    pub slice: usize,
    pub gt: SinogramStack,
    pub noisy: Vec<SinogramStack>,
}

/// Simulates one slice: the GT stack and `realizations` noisy stacks.
/// Realization `r` uses seed `derive_seed(seed, [r])` and each pixel draws
/// from its own generator keyed by (phantom, slice, angle, pixel).
pub fn simulate_slice(
    setup: &SimulationSetup,
    phantom: &VoxelPhantom,
    phantom_index: usize,
    slice: usize,
    acq: &AcquisitionSpec,
    seed: u64,
    realizations: usize,
) -> Result<SliceAcquisition> {
    if acq.n_angles == 0 || acq.width == 0 {
        return Err(Error::InvalidParameter("acquisition needs width > 0 and angles > 0".into()));
    }
    let angles = projection_angles(acq.n_angles);
    let (w, r, k) = (acq.width, setup.n_rows, acq.n_angles);
    let flat = &setup.flat_field;
    let n_groups = setup.n_groups();

    type AngleOut = (Vec<f32>, Vec<Vec<u16>>);
    let per_angle: Vec<Result<AngleOut>> = angles
        .par_iter()
        .enumerate()
        .map(|(a, &theta)| {
            let proj = longitudinal_projection(phantom, slice, theta, w, acq.pixel_pitch)?;
            let mut gt = vec![0f32; w * r];
            let mut noisy = vec![vec![0u16; w * r]; realizations];
            let mut lambda = vec![0.0; n_groups];
            let mut lambda_e = vec![0.0; n_groups];
            let mut expected = vec![0.0; r];
            let mut flat_groups: Option<(Vec<f64>, Vec<f64>)> = None;
            let mut col = vec![0u16; r];
            for px in 0..w {
                let (l1, l2) = (proj.l1[px], proj.l2[px]);
                let empty = l1 == 0.0 && l2 == 0.0;
                let (lam, lam_e): (&[f64], &[f64]) = if empty {
                    expected.copy_from_slice(flat);
                    let fg = flat_groups.get_or_insert_with(|| {
                        let mut a = vec![0.0; n_groups];
                        let mut b = vec![0.0; n_groups];
                        setup.pixel_eval(0.0, 0.0, &mut vec![0.0; r], &mut a, &mut b);
                        (a, b)
                    });
                    (&fg.0, &fg.1)
                } else if realizations == 0 {
                    expected = setup.expected_pixel(l1, l2);
                    (&[], &[])
                } else {
                    setup.pixel_eval(l1, l2, &mut expected, &mut lambda, &mut lambda_e);
                    (&lambda, &lambda_e)
                };
                for row in 0..r {
                    gt[px + w * row] = expected[row] as f32;
                }
                for (ri, out) in noisy.iter_mut().enumerate() {
                    let s = derive_seed(
                        derive_seed(seed, &[ri as u64]),
                        &[phantom_index as u64, slice as u64, a as u64, px as u64],
                    );
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    setup.noisy_pixel(lam, lam_e, &mut rng, &mut col);
                    for row in 0..r {
                        out[px + w * row] = col[row];
                    }
                }
            }
            Ok((gt, noisy))
        })
        .collect();

    let mut gt = Vec::with_capacity(w * r * k);
    let mut noisy: Vec<Vec<u16>> = vec![Vec::with_capacity(w * r * k); realizations];
    for res in per_angle {
        let (g, n) = res?;
        gt.extend_from_slice(&g);
        for (dst, src) in noisy.iter_mut().zip(n) {
            dst.extend_from_slice(&src);
        }
    }

    let stamp = |mut meta: StackMeta, kind: &str| {
        meta.extra.insert("kind".into(), kind.into());
        meta.extra.insert("phantom_index".into(), phantom_index.to_string());
        meta.extra.insert("slice".into(), slice.to_string());
        meta.extra.insert("pixel_pitch".into(), acq.pixel_pitch.to_string());
        meta
    };
    let gt = SinogramStack::new(w, r, k, StackData::F32(gt), stamp(setup.stack_meta(&angles, seed), "gt"))?;
    let noisy = noisy
        .into_iter()
        .enumerate()
        .map(|(ri, data)| {
            let mut meta = stamp(setup.stack_meta(&angles, seed), "noisy");
            meta.extra.insert("realization".into(), ri.to_string());
            SinogramStack::new(w, r, k, StackData::U16(data), meta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SliceAcquisition {
        phantom_index,
        slice,
        gt,
        noisy,
    })
}

/// Simulates every `slice_stride`-th slice of every phantom, one noisy
/// realization each.
pub fn simulate_dataset(
    setup: &SimulationSetup,
    phantoms: &[VoxelPhantom],
    slice_stride: usize,
    acq: &AcquisitionSpec,
    seed: u64,
) -> Result<Vec<SliceAcquisition>> {
    let mut out = Vec::new();
    for (pi, ph) in phantoms.iter().enumerate() {
        for z in ph.slice_indices(slice_stride) {
            out.push(simulate_slice(setup, ph, pi, z, acq, seed, 1)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::materials::bundled;
    use crate::optics::{calibrated, GeometryPreset};

    fn bins1(n: f64, e: f64, absorbed: f64) -> Vec<BinPhotons> {
        vec![BinPhotons {
            energy_kev: e,
            photons: n,
            absorbed,
        }]
    }

    #[test]
    fn absorbed_fraction_limits() {
        let luag = bundled::luag();
        let mut cfg = DetectorConfig::default();
        cfg.scint_thickness = 0.0;
        assert_eq!(scintillator_absorbed_fraction(50.0, &cfg, &luag).unwrap(), 0.0);
        let mu = luag.linear_attenuation(50.0).unwrap();
        cfg.scint_thickness = std::f64::consts::LN_2 / mu;
        assert!((scintillator_absorbed_fraction(50.0, &cfg, &luag).unwrap() - 0.5).abs() < 1e-14);
        assert!(scintillator_absorbed_fraction(5.0, &cfg, &luag).is_err());
    }

    #[test]
    fn absorbed_fraction_decreases_between_edges() {
        // The Lu K edge at 63.3 keV is the only upward jump in 30–300 keV.
        let luag = bundled::luag();
        let cfg = DetectorConfig::default();
        let mut prev = f64::INFINITY;
        let mut e = 30.0;
        while e <= 300.0 {
            let f = scintillator_absorbed_fraction(e, &cfg, &luag).unwrap();
            if !(63.0..64.0).contains(&e) {
                assert!(f <= prev + 1e-12, "{e}: {f} > {prev}");
            }
            prev = f;
            e += 0.5;
        }
    }

    #[test]
    fn gray_value_oracle() {
        let cfg = DetectorConfig::default();
        assert_eq!(expected_gray_value(&[], &cfg), 0.0);
        let v = expected_gray_value(&bins1(1e6, 100.0, 0.5), &cfg);
        assert!((v - 557_065.217_391_304_3).abs() < 1e-6, "{v}");
        let v2 = expected_gray_value(&bins1(2e6, 100.0, 0.5), &cfg);
        assert_eq!(v2, 2.0 * v);
    }

    #[test]
    fn quantization() {
        let cfg = DetectorConfig::default();
        assert_eq!(quantize(2.5, &cfg), 2);
        assert_eq!(quantize(3.5, &cfg), 4);
        assert_eq!(quantize(-4.0, &cfg), 0);
        assert_eq!(quantize(1e9, &cfg), 65535);
        let c12 = DetectorConfig { bit_depth: 12, ..cfg };
        assert_eq!(quantize(1e9, &c12), 4095);
    }

    #[test]
    fn silent_chain_is_zero() {
        let cfg = DetectorConfig {
            dark_current: 0.0,
            prnu_sigma: 0.0,
            readout_sigma_sq: 0.0,
            ..Default::default()
        };
        for seed in 0..20 {
            assert_eq!(apply_noise(&bins1(0.0, 40.0, 0.5), &cfg, seed), 0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::default().validate().is_ok());
        assert!(DetectorConfig { qe: 1.2, ..Default::default() }.validate().is_err());
        assert!(DetectorConfig { prnu_sigma: 0.1, ..Default::default() }.validate().is_err());
        assert!(DetectorConfig { optical_loss: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn noise_mean_matches_chain() {
        let cfg = DetectorConfig::default();
        let bins = bins1(3000.0, 40.0, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|_| apply_noise_traced(&bins, &cfg, &mut rng).dn as f64)
            .sum::<f64>()
            / n as f64;
        let expect = expected_gray_value(&bins, &cfg) + cfg.dark_current / cfg.electrons_per_dn;
        assert!((mean / expect - 1.0).abs() < 0.01, "{mean} vs {expect}");
    }

    fn small_setup(n_rows: usize) -> SimulationSetup {
        let grid = bundled::default_grid();
        let spectrum = bundled::spectrum(grid).unwrap();
        let mut geom = GeometryPreset::Bm18Sim.geometry();
        geom.n_rows = n_rows;
        let geom = calibrated(geom).unwrap();
        SimulationSetup::new(
            &spectrum,
            &geom,
            &DetectorConfig::default(),
            &bundled::silicon(),
            &bundled::luag(),
            &bundled::aluminium(),
            &bundled::silica(),
        )
        .unwrap()
    }

    #[test]
    fn flat_field_shape() {
        let s = small_setup(101);
        let f = s.flat_field();
        assert!(f[10] > f[1] && f[50] > f[100]);
        let max = f.iter().cloned().fold(0.0, f64::max);
        let min = f.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max / min > 100.0);
        assert!(max < DetectorConfig::default().max_dn());
    }

    #[test]
    fn flat_field_scales_with_spectrum() {
        let grid = bundled::default_grid();
        let spectrum = bundled::spectrum(grid).unwrap();
        let mut geom = GeometryPreset::Bm18Sim.geometry();
        geom.n_rows = 12;
        let geom = calibrated(geom).unwrap();
        let build = |sp: &EnergySpectrum| {
            SimulationSetup::new(
                sp,
                &geom,
                &DetectorConfig::default(),
                &bundled::silicon(),
                &bundled::luag(),
                &bundled::aluminium(),
                &bundled::silica(),
            )
            .unwrap()
        };
        let a = build(&spectrum);
        let b = build(&spectrum.scaled(2.0).unwrap());
        for (x, y) in a.flat_field().iter().zip(b.flat_field()) {
            assert!((y / x - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn row_bins_agree_with_expected_pixel() {
        let s = small_setup(20);
        let luag = bundled::luag();
        let cfg = *s.config();
        let absorbed = |e: f64| scintillator_absorbed_fraction(e, &cfg, &luag).unwrap();
        let direct = s.expected_pixel(1e-3, 5e-4);
        for row in [0, 7, 19] {
            let v = expected_gray_value(&s.row_bins(row, 1e-3, 5e-4, absorbed), &cfg);
            assert!((v / direct[row] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_phantom_gives_flat_field() {
        let s = small_setup(16);
        let ph = VoxelPhantom::empty([16, 16, 2], 1e-5).unwrap();
        let acq = AcquisitionSpec {
            width: 20,
            pixel_pitch: 1e-5,
            n_angles: 3,
        };
        let out = simulate_slice(&s, &ph, 0, 1, &acq, 4, 1).unwrap();
        for a in 0..3 {
            for row in 0..16 {
                for w in 0..20 {
                    assert_eq!(out.gt.get(w, row, a), s.flat_field()[row] as f32 as f64);
                }
            }
        }
        assert_ne!(out.gt.data.to_f64(), out.noisy[0].data.to_f64());
    }

    #[test]
    fn opaque_column_goes_dark() {
        let s = small_setup(16);
        let mut ph = VoxelPhantom::empty([16, 16, 1], 1e-5).unwrap();
        // A 1 m voxel column of aluminium is opaque at every energy.
        let mut v1 = vec![false; 256];
        v1[8 + 16 * 8] = true;
        ph = VoxelPhantom::new(ph.dims(), 1.0, v1, vec![false; 256]).unwrap();
        let acq = AcquisitionSpec {
            width: 16,
            pixel_pitch: 1.0,
            n_angles: 1,
        };
        let out = simulate_slice(&s, &ph, 0, 0, &acq, 0, 0).unwrap();
        for row in 0..16 {
            assert!(out.gt.get(8, row, 0) < 1e-6 * s.flat_field()[row]);
            assert_eq!(out.gt.get(0, row, 0), s.flat_field()[row] as f32 as f64);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let s = small_setup(8);
        let ph = crate::phantom::generate_procedural_phantom(1, [16, 16, 4], 1e-5).unwrap();
        let acq = AcquisitionSpec {
            width: 24,
            pixel_pitch: 1e-5,
            n_angles: 4,
        };
        let a = simulate_slice(&s, &ph, 0, 2, &acq, 7, 2).unwrap();
        let b = simulate_slice(&s, &ph, 0, 2, &acq, 7, 2).unwrap();
        let c = simulate_slice(&s, &ph, 0, 2, &acq, 8, 1).unwrap();
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.noisy, b.noisy);
        assert_eq!(a.gt.data, c.gt.data);
        assert_ne!(a.noisy[0], c.noisy[0]);
        assert_ne!(a.noisy[0].data, a.noisy[1].data);
    }
}
