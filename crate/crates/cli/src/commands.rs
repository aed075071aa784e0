//! The pipeline commands. Each one reads its inputs from the output
//! directory, writes its results there and records them in the manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msct_core::classical::{denoise_stack as classical_denoise, denormalize, normalize_per_line, ClassicalMethod, NormalizedStack};
use msct_core::detector::{simulate_slice, SimulationSetup};
use msct_core::metrics::{evaluate_method, reports_csv, reports_table, roi_snr, snr_curve_csv, MetricsReport};
use msct_core::numeric::derive_seed;
use msct_core::recon::{average_stacks, reconstruct_band, write_pgm, write_slice_raw, SliceImage};
use msct_core::stack::{read_stack, sidecar_path, write_stack, SinogramStack};
use msct_neural::models::{denoise_stack as neural_denoise, lines, Combiner, LineRef, ModelKind, Network};
use msct_neural::params::ParamStore;
use msct_neural::train::{train, Dataset, TrainOutcome};

use crate::config::{resolve_material, PipelineConfig};
use crate::error::{CliError, Result};
use crate::manifest::Recorder;

/// File names inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn gt(&self, slice: usize) -> PathBuf {
        self.root.join(format!("data/gt_s{slice}.stk"))
    }

    pub fn noisy(&self, slice: usize, realization: usize) -> PathBuf {
        self.root.join(format!("data/noisy_s{slice}_r{realization}.stk"))
    }

    pub fn weights(&self, kind: ModelKind) -> PathBuf {
        self.root.join(format!("models/{}.wts", kind.name()))
    }

    pub fn history(&self, kind: ModelKind) -> PathBuf {
        self.root.join(format!("models/{}_history.csv", kind.name()))
    }

    pub fn denoised(&self, method: Method, slice: usize) -> PathBuf {
        self.root.join(format!("denoised/{}_s{slice}.stk", method.name()))
    }

    pub fn reference(&self, slice: usize, n: usize) -> PathBuf {
        self.root.join(format!("reference/s{slice}_n{n}.stk"))
    }

    pub fn recon_dir(&self) -> PathBuf {
        self.root.join("recon")
    }

    pub fn metrics_csv(&self, slice: usize) -> PathBuf {
        self.root.join(format!("reports/metrics_s{slice}.csv"))
    }

    pub fn metrics_table(&self, slice: usize) -> PathBuf {
        self.root.join(format!("reports/metrics_s{slice}.txt"))
    }

    pub fn snr_curve(&self, candidate: &Candidate, slice: usize) -> PathBuf {
        self.root.join(format!("reports/snr_{candidate}_s{slice}.csv"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Nlm,
    Tv,
    HsiNet,
    VideoNet,
    Combined,
    DnCnn,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Nlm, Method::Tv, Method::HsiNet, Method::VideoNet, Method::Combined, Method::DnCnn];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nlm => "nlm",
            Method::Tv => "tv",
            Method::HsiNet => "hsinet",
            Method::VideoNet => "videonet",
            Method::Combined => "combined",
            Method::DnCnn => "dncnn",
        }
    }

    /// The network whose weights this method runs, if any.
    pub fn model(self) -> Option<ModelKind> {
        match self {
            Method::Nlm | Method::Tv => None,
            Method::HsiNet => Some(ModelKind::HsiNet),
            Method::VideoNet => Some(ModelKind::VideoNet),
            Method::Combined => Some(ModelKind::Combiner),
            Method::DnCnn => Some(ModelKind::DnCnn),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown method {s:?}")))
    }
}

/// A stack compared against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Candidate {
    Noisy,
    Gt,
    Denoised(Method),
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Candidate::Noisy => f.write_str("noisy"),
            Candidate::Gt => f.write_str("gt"),
            Candidate::Denoised(m) => f.write_str(m.name()),
        }
    }
}

impl FromStr for Candidate {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noisy" => Ok(Candidate::Noisy),
            "gt" => Ok(Candidate::Gt),
            other => Ok(Candidate::Denoised(other.parse()?)),
        }
    }
}

/// A validated configuration plus the paths it implies.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub layout: Layout,
    config_hash: String,
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| CliError::io(p, e))?;
    }
    Ok(())
}

fn write_text(rec: &mut Recorder, path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    rec.output(path);
    Ok(())
}

fn save_stack(rec: &mut Recorder, path: &Path, stack: &SinogramStack) -> Result<()> {
    create_parent(path)?;
    write_stack(path, stack)?;
    rec.output(path);
    rec.output(&sidecar_path(path));
    Ok(())
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout {
            root: config.output_dir.clone(),
        };
        let config_hash = config.hash();
        Ok(Self {
            config,
            layout,
            config_hash,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(PipelineConfig::load(path)?)
    }

    fn recorder(&self, command: &str, seed: u64) -> Result<Recorder> {
        fs::create_dir_all(&self.layout.root).map_err(|e| CliError::io(&self.layout.root, e))?;
        Ok(Recorder::new(&self.layout.root, command, &self.config_hash, seed))
    }

    fn check_slice(&self, slice: usize) -> Result<()> {
        let n = self.config.dataset.slices.len();
        if slice >= n {
            return Err(CliError::Config(format!("slice index {slice} outside the {n} configured slices")));
        }
        Ok(())
    }

    fn load(&self, rec: &mut Recorder, path: &Path, what: &str) -> Result<SinogramStack> {
        if !path.exists() {
            return Err(CliError::missing(what, path));
        }
        rec.input(path)?;
        rec.input(&sidecar_path(path))?;
        Ok(read_stack(path)?)
    }

    fn load_normalized(&self, rec: &mut Recorder, path: &Path) -> Result<NormalizedStack> {
        Ok(normalize_per_line(&self.load(rec, path, "missing simulated stack (run simulate first)")?)?)
    }

    pub fn setup(&self) -> Result<SimulationSetup> {
        let c = &self.config;
        let geom = c.geometry.build()?;
        let m = &c.materials;
        Ok(SimulationSetup::new(
            &m.spectrum()?,
            &geom,
            &c.detector,
            &resolve_material(&m.prism)?,
            &resolve_material(&m.scintillator)?,
            &resolve_material(&m.material1)?,
            &resolve_material(&m.material2)?,
        )?)
    }

    /// Writes the GT stack and every noisy realization of each slice.
    pub fn simulate(&self) -> Result<Vec<PathBuf>> {
        let c = &self.config;
        let mut rec = self.recorder("simulate", c.seed)?;
        for f in c.materials.input_files().iter().chain(&c.phantom.input_files()) {
            rec.input(f)?;
        }
        let setup = self.setup()?;
        let phantom = c.phantom.build(&c.materials)?;
        let acq = c.acquisition();
        let mut written = Vec::new();
        for (i, &z) in c.dataset.slices.iter().enumerate() {
            let s = simulate_slice(&setup, &phantom, 0, z, &acq, c.seed, c.dataset.realizations)?;
            let mut gt = s.gt;
            gt.meta.extra.insert("slice".into(), z.to_string());
            save_stack(&mut rec, &self.layout.gt(i), &gt)?;
            written.push(self.layout.gt(i));
            for (r, mut n) in s.noisy.into_iter().enumerate() {
                n.meta.extra.insert("slice".into(), z.to_string());
                n.meta.extra.insert("realization".into(), r.to_string());
                save_stack(&mut rec, &self.layout.noisy(i, r), &n)?;
                written.push(self.layout.noisy(i, r));
            }
        }
        rec.finish()?;
        Ok(written)
    }

    /// The untrained network of `kind`. The combiner loads the frozen
    /// subnet weights, which must exist.
    pub fn network(&self, kind: ModelKind, rec: &mut Recorder) -> Result<Box<dyn Network>> {
        let (t, a) = (&self.config.train, &self.config.arch);
        Ok(match kind {
            ModelKind::HsiNet => Box::new(t.hsinet(a)?),
            ModelKind::VideoNet => Box::new(t.videonet(a)),
            ModelKind::DnCnn => Box::new(t.dncnn(a)),
            ModelKind::Combiner => {
                let hsinet = t.hsinet(a)?;
                let videonet = t.videonet(a);
                let hsinet_params = self.weights_for(&hsinet, "missing frozen weights", rec)?;
                let videonet_params = self.weights_for(&videonet, "missing frozen weights", rec)?;
                Box::new(Combiner {
                    hsinet,
                    hsinet_params,
                    videonet,
                    videonet_params,
                })
            }
        })
    }

    fn weights_for(&self, net: &dyn Network, what: &str, rec: &mut Recorder) -> Result<ParamStore> {
        let path = self.layout.weights(net.kind());
        if !path.exists() {
            return Err(CliError::missing(&format!("{what} for {}", net.kind().name()), path));
        }
        rec.input(&path)?;
        Ok(ParamStore::load_for(&path, net.fingerprint()?)?)
    }

    /// Lines of the given dataset slices within the training rows that are
    /// bright enough to train on.
    pub fn training_lines(&self, data: &Dataset, slices: &[usize]) -> Vec<LineRef> {
        let d = &self.config.dataset;
        let min = d.train_min_flat_dn;
        let flat = data.noisy[0].flat_field();
        lines(&data.noisy, slices, d.train_rows[0]..d.train_rows[1] + 1)
            .into_iter()
            .filter(|l| flat[l.row] >= min)
            .collect()
    }

    fn dataset_recorded(&self, slices: &[usize], rec: &mut Recorder) -> Result<Dataset> {
        let mut noisy = Vec::new();
        let mut gt = Vec::new();
        for &i in slices {
            self.check_slice(i)?;
            noisy.push(self.load_normalized(rec, &self.layout.noisy(i, 0))?);
            gt.push(self.load_normalized(rec, &self.layout.gt(i))?);
        }
        Ok(Dataset::new(noisy, gt)?)
    }

    /// Normalized noisy (first realization) and GT stacks of the given slices.
    pub fn dataset(&self, slices: &[usize]) -> Result<Dataset> {
        let mut scratch = Recorder::new(&self.layout.root, "read", &self.config_hash, self.config.seed);
        self.dataset_recorded(slices, &mut scratch)
    }

    /// A network with its trained weights.
    pub fn trained(&self, kind: ModelKind) -> Result<(Box<dyn Network>, ParamStore)> {
        let mut scratch = Recorder::new(&self.layout.root, "read", &self.config_hash, self.config.seed);
        let net = self.network(kind, &mut scratch)?;
        let store = self.weights_for(net.as_ref(), "missing trained weights", &mut scratch)?;
        Ok((net, store))
    }

    /// Trains `kind` on the train slices, selects on the val slices and
    /// writes the best weights plus the loss history.
    pub fn train(&self, kind: ModelKind) -> Result<TrainOutcome> {
        let c = &self.config;
        let mut rec = self.recorder(&format!("train {}", kind.name()), c.train.seed)?;
        let net = self.network(kind, &mut rec)?;
        let d = &c.dataset;
        let order: Vec<usize> = d.train.iter().chain(&d.val).copied().collect();
        let data = self.dataset_recorded(&order, &mut rec)?;
        let n_train = d.train.len();
        let train_idx: Vec<usize> = (0..n_train).collect();
        let val_idx: Vec<usize> = (n_train..order.len()).collect();
        let tr = self.training_lines(&data, &train_idx);
        let va = self.training_lines(&data, &val_idx);
        let mut store = net.init_params(derive_seed(c.train.seed, &[kind as u64]))?;
        let outcome = train(net.as_ref(), &mut store, &data, &tr, &va, &c.train)?;
        let wp = self.layout.weights(kind);
        create_parent(&wp)?;
        store.save(&wp)?;
        rec.output(&wp);
        write_text(&mut rec, &self.layout.history(kind), &outcome.csv())?;
        rec.finish()?;
        Ok(outcome)
    }

    /// Denoises the first noisy realization of each slice and writes the
    /// result in DN.
    pub fn denoise(&self, method: Method, slices: &[usize]) -> Result<Vec<PathBuf>> {
        let c = &self.config;
        for &s in slices {
            self.check_slice(s)?;
        }
        let mut rec = self.recorder(&format!("denoise {}", method.name()), c.seed)?;
        let model = match method.model() {
            None => None,
            Some(kind) => {
                let net = self.network(kind, &mut rec)?;
                let store = self.weights_for(net.as_ref(), "missing trained weights", &mut rec)?;
                Some((net, store))
            }
        };
        let mut written = Vec::new();
        for &s in slices {
            let noisy = self.load_normalized(&mut rec, &self.layout.noisy(s, 0))?;
            let out = match (&model, method) {
                (Some((net, store)), _) => neural_denoise(net.as_ref(), store, &noisy, c.denoise.batch_size)?,
                (None, Method::Nlm) => classical_denoise(&noisy, ClassicalMethod::Nlm, &c.denoise.classical)?,
                (None, _) => classical_denoise(&noisy, ClassicalMethod::Tv, &c.denoise.classical)?,
            };
            let mut dn = denormalize(&out)?;
            dn.meta.extra.insert("method".into(), method.name().into());
            let path = self.layout.denoised(method, s);
            save_stack(&mut rec, &path, &dn)?;
            written.push(path);
        }
        rec.finish()?;
        Ok(written)
    }

    fn band_range(&self, stack: &SinogramStack, bands: Option<[usize; 2]>) -> Result<std::ops::RangeInclusive<usize>> {
        let n = stack.n_rows();
        match bands.or(self.config.recon.bands) {
            Some([lo, hi]) if lo <= hi && hi < n => Ok(lo..=hi),
            Some([lo, hi]) => Err(CliError::Config(format!("band range [{lo}, {hi}] outside 0..{n}"))),
            None => Ok(0..=n - 1),
        }
    }

    fn write_slices(&self, rec: &mut Recorder, stack: &SinogramStack, stem: &str, dir: &Path, bands: Option<[usize; 2]>) -> Result<Vec<SliceImage>> {
        let pitch = self.config.acquisition().pixel_pitch;
        let mut out = Vec::new();
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        for band in self.band_range(stack, bands)? {
            let img = reconstruct_band(stack, band, pitch, self.config.recon.filter)?;
            let raw = dir.join(format!("{stem}_b{band:03}.raw"));
            write_slice_raw(&raw, &img)?;
            rec.output(&raw);
            if self.config.recon.pgm && img.values.iter().any(|v| *v != img.values[0]) {
                let pgm = dir.join(format!("{stem}_b{band:03}.pgm"));
                write_pgm(&pgm, &img, None)?;
                rec.output(&pgm);
                rec.output(&sidecar_path(&pgm));
            }
            out.push(img);
        }
        Ok(out)
    }

    /// Filtered backprojection of the given bands of any stack file.
    pub fn reconstruct(&self, input: &Path, bands: Option<[usize; 2]>) -> Result<Vec<SliceImage>> {
        let mut rec = self.recorder("reconstruct", self.config.seed)?;
        let stack = self.load(&mut rec, input, "missing input stack")?;
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "stack".into());
        let out = self.write_slices(&mut rec, &stack, &stem, &self.layout.recon_dir(), bands)?;
        rec.finish()?;
        Ok(out)
    }

    /// Averages the first `n` noisy realizations of a slice in the projection
    /// domain, writes the averaged stack and reconstructs it.
    pub fn average_reference(&self, slice: usize, n: usize, bands: Option<[usize; 2]>) -> Result<(SinogramStack, Vec<SliceImage>)> {
        self.check_slice(slice)?;
        if n == 0 || n > self.config.dataset.realizations {
            return Err(CliError::Config(format!(
                "reference needs 1..={} realizations, got {n}",
                self.config.dataset.realizations
            )));
        }
        let mut rec = self.recorder("average-reference", self.config.seed)?;
        let mut stacks = Vec::with_capacity(n);
        for r in 0..n {
            stacks.push(self.load(&mut rec, &self.layout.noisy(slice, r), "missing noisy realization")?);
        }
        let avg = average_stacks(&stacks)?;
        let path = self.layout.reference(slice, n);
        save_stack(&mut rec, &path, &avg)?;
        let stem = format!("s{slice}_n{n}");
        let dir = path.parent().expect("reference path has a parent").to_path_buf();
        let images = self.write_slices(&mut rec, &avg, &stem, &dir, bands)?;
        rec.finish()?;
        Ok((avg, images))
    }

    fn candidate_path(&self, c: Candidate, slice: usize) -> PathBuf {
        match c {
            Candidate::Noisy => self.layout.noisy(slice, 0),
            Candidate::Gt => self.layout.gt(slice),
            Candidate::Denoised(m) => self.layout.denoised(m, slice),
        }
    }

    /// Sinogram metrics of each candidate against the GT on the configured
    /// rows; with ROIs configured, also the composite ROI SNR per band of the
    /// reconstructed candidates.
    pub fn evaluate(&self, slice: usize, candidates: &[Candidate]) -> Result<Vec<MetricsReport>> {
        self.check_slice(slice)?;
        let c = &self.config;
        let mut rec = self.recorder("evaluate", c.seed)?;
        let gt = self.load_normalized(&mut rec, &self.layout.gt(slice))?;
        let [lo, hi] = c.metrics.rows;
        let rows: Vec<usize> = (lo..=hi).collect();
        let mut reports = Vec::new();
        for &cand in candidates {
            let path = self.candidate_path(cand, slice);
            let stack = self.load(&mut rec, &path, &format!("missing {cand} stack"))?;
            let norm = normalize_per_line(&stack)?;
            reports.push(evaluate_method(&cand.to_string(), &gt, &norm, &rows, &c.metrics.selection)?);
            if !c.metrics.rois.is_empty() {
                let pitch = c.acquisition().pixel_pitch;
                let mut points = Vec::new();
                for &band in &rows {
                    let img = reconstruct_band(&stack, band, pitch, c.recon.filter)?;
                    let snr = roi_snr(&img.values, img.side, &c.metrics.rois)?;
                    points.push((band, stack.meta.row_energies.get(band).map_or(f64::NAN, |e| e.mean), snr.composite));
                }
                write_text(&mut rec, &self.layout.snr_curve(&cand, slice), &snr_curve_csv(&points))?;
            }
        }
        write_text(&mut rec, &self.layout.metrics_csv(slice), &reports_csv(&reports))?;
        write_text(&mut rec, &self.layout.metrics_table(slice), &reports_table(&reports))?;
        rec.finish()?;
        Ok(reports)
    }
}
