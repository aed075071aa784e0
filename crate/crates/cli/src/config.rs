//! Pipeline configuration. One TOML document with nested sections; unknown
//! keys are rejected and every section falls back to the desk-scale defaults.

use std::path::{Path, PathBuf};

use msct_core::classical::ClassicalParams;
use msct_core::detector::{AcquisitionSpec, DetectorConfig};
use msct_core::materials::{bundled, load_material_table, EnergySpectrum, MaterialTable};
use msct_core::metrics::{MetricSelection, Roi};
use msct_core::optics::{calibrate_delta, GeometryPreset, PrismGeometry, ANCHOR_ENERGY_KEV, ANCHOR_ROW};
use msct_core::phantom::{generate_insert_phantom, generate_procedural_phantom, import_voxel_volume, VoxelPhantom};
use msct_core::recon::RampFilter;
use msct_neural::models::ArchConfig;
use msct_neural::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed of the noise realizations.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub geometry: GeometryConfig,
    pub detector: DetectorConfig,
    pub materials: MaterialsConfig,
    pub phantom: PhantomConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub denoise: DenoiseConfig,
    pub recon: ReconConfig,
    pub metrics: MetricsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("msct-out"),
            geometry: GeometryConfig::default(),
            detector: DetectorConfig::default(),
            materials: MaterialsConfig::default(),
            phantom: PhantomConfig::default(),
            dataset: DatasetConfig::default(),
            train: desk_train(),
            arch: desk_arch(),
            denoise: DenoiseConfig::default(),
            recon: ReconConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// Training overrides for the desk-scale dataset. The remaining fields keep
/// the [`TrainConfig`] defaults.
pub fn desk_train() -> TrainConfig {
    TrainConfig {
        lr_videonet: 5e-4,
        lr_hsinet: 5e-4,
        lr_combiner: Some(5e-5),
        n_denoise_blocks: 3,
        n_octave_blocks: 3,
        max_epochs: 6,
        samples_per_epoch: 3072,
        val_samples: 256,
        ..TrainConfig::default()
    }
}

pub fn desk_arch() -> ArchConfig {
    ArchConfig {
        hsinet_channels: 16,
        extractor_channels: 16,
        videonet_channels: 8,
        tail_channels: 8,
        ..ArchConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub preset: GeometryPreset,
    pub n_rows: Option<usize>,
    pub alpha_p_deg: Option<f64>,
    pub n_pa: Option<u32>,
    pub y: Option<f64>,
    pub d: Option<f64>,
    pub h_pixel: Option<f64>,
    /// Fit δ so that `anchor_energy_kev` lands on `anchor_row`; otherwise the
    /// free-electron δ of silicon is used.
    pub calibrate: bool,
    pub anchor_energy_kev: f64,
    pub anchor_row: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            preset: GeometryPreset::Bm18Sim,
            n_rows: Some(64),
            alpha_p_deg: None,
            n_pa: None,
            y: None,
            d: None,
            h_pixel: None,
            calibrate: true,
            anchor_energy_kev: ANCHOR_ENERGY_KEV,
            anchor_row: ANCHOR_ROW,
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<PrismGeometry> {
        let mut g = self.preset.geometry();
        if let Some(v) = self.n_rows {
            g.n_rows = v;
        }
        if let Some(v) = self.alpha_p_deg {
            g.alpha_p = v.to_radians();
        }
        if let Some(v) = self.n_pa {
            g.n_pa = v;
        }
        if let Some(v) = self.y {
            g.y = v;
        }
        if let Some(v) = self.d {
            g.d = v;
        }
        if let Some(v) = self.h_pixel {
            g.h_pixel = v;
        }
        g.validate()?;
        if self.calibrate {
            let delta = calibrate_delta(&g, self.anchor_energy_kev, self.anchor_row)?;
            g = g.with_delta(delta);
        }
        Ok(g)
    }
}

/// Each material is a bundled identifier (`si`, `al`, `sio2`, `luag`) or a
/// path to a two-column table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialsConfig {
    /// Two-column spectrum file; the bundled approximation when absent.
    pub spectrum: Option<PathBuf>,
    pub prism: String,
    pub scintillator: String,
    pub material1: String,
    pub material2: String,
}

impl Default for MaterialsConfig {
    fn default() -> Self {
        Self {
            spectrum: None,
            prism: "si".into(),
            scintillator: "luag".into(),
            material1: "al".into(),
            material2: "sio2".into(),
        }
    }
}

pub fn resolve_material(source: &str) -> Result<MaterialTable> {
    match bundled::by_name(source) {
        Some(t) => Ok(t),
        None => Ok(load_material_table(source)?),
    }
}

impl MaterialsConfig {
    pub fn spectrum(&self) -> Result<EnergySpectrum> {
        let grid = bundled::default_grid();
        Ok(match &self.spectrum {
            Some(p) => EnergySpectrum::load(p, grid)?,
            None => bundled::spectrum(grid)?,
        })
    }

    /// Files read from disk, for the provenance manifest.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut out: Vec<PathBuf> = self.spectrum.iter().cloned().collect();
        for m in [&self.prism, &self.scintillator, &self.material1, &self.material2] {
            if bundled::by_name(m).is_none() {
                out.push(PathBuf::from(m));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Procedural,
    Insert,
    Empty,
    Import,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsertSpec {
    /// Offset from the volume axis, voxels.
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub kind: PhantomKind,
    pub seed: u64,
    pub dims: [usize; 3],
    /// Voxel edge (m).
    pub voxel_size: f64,
    /// Body radius of the insert phantom, voxels.
    pub body_radius: f64,
    pub inserts: Vec<InsertSpec>,
    /// Raw masks for `kind = "import"`.
    pub volume1: Option<PathBuf>,
    pub volume2: Option<PathBuf>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            kind: PhantomKind::Procedural,
            seed: 1,
            dims: [200, 200, 8],
            voxel_size: 1.5e-5,
            body_radius: 80.0,
            inserts: vec![
                InsertSpec {
                    center: [-30.0, 0.0],
                    radius: 20.0,
                },
                InsertSpec {
                    center: [30.0, 10.0],
                    radius: 15.0,
                },
            ],
            volume1: None,
            volume2: None,
        }
    }
}

impl PhantomConfig {
    pub fn build(&self, materials: &MaterialsConfig) -> Result<VoxelPhantom> {
        let mut p = match self.kind {
            PhantomKind::Procedural => generate_procedural_phantom(self.seed, self.dims, self.voxel_size)?,
            PhantomKind::Insert => {
                let inserts: Vec<([f64; 2], f64)> = self.inserts.iter().map(|i| (i.center, i.radius)).collect();
                generate_insert_phantom(self.dims, self.voxel_size, self.body_radius, &inserts)?
            }
            PhantomKind::Empty => VoxelPhantom::empty(self.dims, self.voxel_size)?,
            PhantomKind::Import => {
                let (Some(a), Some(b)) = (&self.volume1, &self.volume2) else {
                    return Err(CliError::Config("phantom kind \"import\" needs volume1 and volume2 paths".into()));
                };
                let v1 = import_voxel_volume(a, self.dims)?;
                let v2 = import_voxel_volume(b, self.dims)?;
                VoxelPhantom::new(self.dims, self.voxel_size, v1, v2)?
            }
        };
        p.material1 = materials.material1.clone();
        p.material2 = materials.material2.clone();
        Ok(p)
    }

    pub fn input_files(&self) -> Vec<PathBuf> {
        match self.kind {
            PhantomKind::Import => self.volume1.iter().chain(&self.volume2).cloned().collect(),
            _ => Vec::new(),
        }
    }
}

/// Slices are z indices into the phantom; `train`, `val` and `test` index
/// into `slices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub width: usize,
    pub n_angles: usize,
    /// Horizontal detector pitch (m); the voxel size when absent.
    pub pixel_pitch: Option<f64>,
    pub slices: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Noisy realizations simulated per slice.
    pub realizations: usize,
    /// Rows whose flat field is below this are left out of training.
    pub train_min_flat_dn: f64,
    /// Inclusive row range used for training and validation lines; rows past
    /// the last detector row are ignored.
    pub train_rows: [usize; 2],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            width: 256,
            n_angles: 90,
            pixel_pitch: None,
            slices: vec![0, 2, 4, 6],
            train: vec![0, 1],
            val: vec![2],
            test: vec![3],
            realizations: 1,
            train_min_flat_dn: 500.0,
            train_rows: [1, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    /// Lines per neural forward pass.
    pub batch_size: usize,
    pub classical: ClassicalParams,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            classical: ClassicalParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub filter: RampFilter,
    /// Inclusive band range; every band when absent.
    pub bands: Option<[usize; 2]>,
    pub pgm: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            filter: RampFilter::RamLak,
            bands: None,
            pgm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub selection: MetricSelection,
    /// Inclusive row range of the sinogram metrics.
    pub rows: [usize; 2],
    /// Homogeneous regions of reconstructed slices; enables the SNR curve.
    pub rois: Vec<Roi>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            selection: MetricSelection::default(),
            rows: [1, 50],
            rois: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization; comments and key order in the
    /// source file do not matter.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn n_rows(&self) -> usize {
        self.geometry.n_rows.unwrap_or_else(|| self.geometry.preset.geometry().n_rows)
    }

    pub fn acquisition(&self) -> AcquisitionSpec {
        AcquisitionSpec {
            width: self.dataset.width,
            pixel_pitch: self.dataset.pixel_pitch.unwrap_or(self.phantom.voxel_size),
            n_angles: self.dataset.n_angles,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.detector.validate()?;
        self.train.validate()?;
        let d = &self.dataset;
        if d.width == 0 || d.n_angles == 0 || d.realizations == 0 {
            return bad("dataset width, angles and realizations must be positive".into());
        }
        if d.slices.is_empty() {
            return bad("dataset.slices is empty".into());
        }
        if let Some(z) = d.slices.iter().find(|z| **z >= self.phantom.dims[2]) {
            return bad(format!("slice {z} outside phantom depth {}", self.phantom.dims[2]));
        }
        for (name, split) in [("train", &d.train), ("val", &d.val), ("test", &d.test)] {
            if let Some(i) = split.iter().find(|i| **i >= d.slices.len()) {
                return bad(format!("dataset.{name} index {i} outside {} slices", d.slices.len()));
            }
        }
        if d.train.iter().any(|i| d.val.contains(i) || d.test.contains(i)) || d.val.iter().any(|i| d.test.contains(i)) {
            return bad("train, val and test slices must be disjoint".into());
        }
        if d.train_rows[0] > d.train_rows[1] || d.train_rows[0] >= self.n_rows() {
            return bad(format!("dataset.train_rows {:?} selects no row of 0..{}", d.train_rows, self.n_rows()));
        }
        let [lo, hi] = self.metrics.rows;
        if lo > hi || hi >= self.n_rows() {
            return bad(format!("metrics.rows [{lo}, {hi}] outside 0..{}", self.n_rows()));
        }
        if let Some([lo, hi]) = self.recon.bands {
            if lo > hi || hi >= self.n_rows() {
                return bad(format!("recon.bands [{lo}, {hi}] outside 0..{}", self.n_rows()));
            }
        }
        if self.denoise.batch_size == 0 {
            return bad("denoise.batch_size must be positive".into());
        }
        if !(self.phantom.voxel_size > 0.0) {
            return bad("phantom.voxel_size must be positive".into());
        }
        Ok(())
    }
}
