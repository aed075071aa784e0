//! The spectral (HSINet), angular (VideoNet), combiner and DnCNN denoisers.
//!
//! Every network predicts a noise map that is subtracted from the noisy
//! target line; final layers start at zero, so a fresh network is the
//! identity.

use msct_core::classical::NormalizedStack;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::layers::{batch_norm, cbam, conv, conv_relu, octave, octave_split, sepconv, Builder, WeightInit};
use crate::params::ParamStore;
use crate::patchcraft::{patch_craft_frames, PatchCraftConfig};
use crate::tape::{ConvSpec, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    HsiNet,
    VideoNet,
    Combiner,
    DnCnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::HsiNet => "hsinet",
            ModelKind::VideoNet => "videonet",
            ModelKind::Combiner => "combiner",
            ModelKind::DnCnn => "dncnn",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = NeuralError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hsinet" => Ok(ModelKind::HsiNet),
            "videonet" => Ok(ModelKind::VideoNet),
            "combiner" => Ok(ModelKind::Combiner),
            "dncnn" => Ok(ModelKind::DnCnn),
            _ => Err(NeuralError::Config(format!("unknown model {s:?}"))),
        }
    }
}

/// One detector line: slice index into the dataset, energy row, angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LineRef {
    pub slice: usize,
    pub row: usize,
    pub angle: usize,
}

/// Every line of `rows` in every angle of the given slices.
pub fn lines(stacks: &[NormalizedStack], slices: &[usize], rows: std::ops::Range<usize>) -> Vec<LineRef> {
    let mut out = Vec::new();
    for &slice in slices {
        let s = &stacks[slice];
        for row in rows.clone().filter(|&r| r < s.n_rows()) {
            for angle in 0..s.n_angles() {
                out.push(LineRef { slice, row, angle });
            }
        }
    }
    out
}

/// `[N, 1, W]` lines of `stacks` at `items`.
pub fn line_batch(stacks: &[NormalizedStack], items: &[LineRef]) -> Result<Tensor> {
    let w = stacks[items[0].slice].width();
    let mut data = Vec::with_capacity(items.len() * w);
    for it in items {
        let s = &stacks[it.slice];
        if s.width() != w {
            return Err(NeuralError::shape("line batch", format!("width {w}"), s.width()));
        }
        data.extend_from_slice(s.line(it.row, it.angle));
    }
    Tensor::new(vec![items.len(), 1, w], data)
}

/// Node ids of the denoised line `[N, 1, W]` and the features feeding the
/// final layer `[N, C, W]`.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub out: NodeId,
    pub penultimate: NodeId,
}

pub trait Network: Sync {
    fn kind(&self) -> ModelKind;

    /// Model inputs for `items`, built from the noisy stacks only.
    fn inputs(&self, noisy: &[NormalizedStack], items: &[LineRef]) -> Result<Vec<Tensor>>;

    fn forward(&self, b: &mut Builder, inputs: &[NodeId]) -> Result<Outputs>;

    /// Small inputs used to create the parameter blocks.
    fn probe_inputs(&self) -> Vec<Tensor>;

    fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::init(&mut store, &mut rng);
        let ids: Vec<NodeId> = self.probe_inputs().into_iter().map(|t| b.tape.input(t)).collect();
        self.forward(&mut b, &ids)?;
        drop(b);
        Ok(store)
    }

    /// Hash of the parameter layout; stored in weights files.
    fn fingerprint(&self) -> Result<u64> {
        Ok(self.init_params(0)?.fingerprint())
    }
}

/// Evaluation-mode forward pass; returns the denoised lines and the
/// penultimate features.
pub fn predict(net: &dyn Network, store: &ParamStore, inputs: Vec<Tensor>) -> Result<(Tensor, Tensor)> {
    let mut b = Builder::new(store, false, false);
    let ids: Vec<NodeId> = inputs.into_iter().map(|t| b.tape.input(t)).collect();
    let o = net.forward(&mut b, &ids)?;
    Ok((b.tape.value(o.out).clone(), b.tape.value(o.penultimate).clone()))
}

/// Denoises every line of a normalized stack, `batch` lines at a time.
pub fn denoise_stack(net: &dyn Network, store: &ParamStore, noisy: &NormalizedStack, batch: usize) -> Result<NormalizedStack> {
    let stacks = std::slice::from_ref(noisy);
    let items = lines(stacks, &[0], 0..noisy.n_rows());
    let mut data = noisy.data.clone();
    let w = noisy.width();
    for chunk in items.chunks(batch.max(1)) {
        let (out, _) = predict(net, store, net.inputs(stacks, chunk)?)?;
        for (k, it) in chunk.iter().enumerate() {
            let dst = noisy.index(0, it.row, it.angle);
            data[dst..dst + w].copy_from_slice(&out.data[k * w..(k + 1) * w]);
        }
    }
    Ok(noisy.with_data(data)?)
}

/// Layer widths and sizes not fixed by the training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hsinet_channels: usize,
    pub extractor_channels: usize,
    pub cbam_reduction: usize,
    pub videonet_channels: usize,
    pub n_sepconv: usize,
    pub tail_channels: usize,
    pub n_tail_convs: usize,
    /// Angles on each side of the target fed to the angular tail.
    pub angular_neighbors: usize,
    pub patch: PatchCraftConfig,
    pub dncnn_channels: usize,
    pub dncnn_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hsinet_channels: 32,
            extractor_channels: 8,
            cbam_reduction: 8,
            videonet_channels: 16,
            n_sepconv: 2,
            tail_channels: 16,
            n_tail_convs: 17,
            angular_neighbors: 2,
            patch: PatchCraftConfig::default(),
            dncnn_channels: 32,
            dncnn_hidden: 18,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HsiNet {
    pub k_bands: usize,
    pub channels: usize,
    pub extractor_channels: usize,
    pub n_blocks: usize,
    pub n_octave_blocks: usize,
    pub alpha: f64,
    pub cbam_reduction: usize,
}

/// Shifts normalized values so that open beam reads zero. The residual
/// paths still use the raw target.
fn center(b: &mut Builder, x: NodeId) -> Result<NodeId> {
    center_channels(b, x, &[1.0])
}

/// Subtracts `shift[c]` from channel `c`; a single entry applies to all.
fn center_channels(b: &mut Builder, x: NodeId, shift: &[f64]) -> Result<NodeId> {
    let mut shape = vec![1; b.tape.shape(x).len()];
    shape[1] = shift.len();
    let s = b.tape.input(Tensor::new(shape, shift.to_vec())?);
    b.tape.sub(x, s)
}

/// Band indices of the k-band window around `row`, clamped to the stack.
pub fn band_window(row: usize, k: usize, n_rows: usize) -> impl Iterator<Item = usize> {
    let start = row as isize - (k / 2) as isize;
    (0..k).map(move |i| (start + i as isize).clamp(0, n_rows as isize - 1) as usize)
}

impl HsiNet {
    pub fn validate(&self) -> Result<()> {
        let (_, low) = octave_split(self.channels, self.alpha);
        if self.n_octave_blocks > 0 && (low == 0 || low >= self.channels) {
            return Err(NeuralError::Config(format!(
                "alpha {} leaves no low or high channels out of {}",
                self.alpha, self.channels
            )));
        }
        if self.k_bands == 0 || self.channels == 0 || self.extractor_channels == 0 {
            return Err(NeuralError::Config("HSINet sizes must be positive".into()));
        }
        Ok(())
    }
}

impl Network for HsiNet {
    fn kind(&self) -> ModelKind {
        ModelKind::HsiNet
    }

    /// `[window [N, 1, k, W], target [N, 1, W]]`.
    fn inputs(&self, noisy: &[NormalizedStack], items: &[LineRef]) -> Result<Vec<Tensor>> {
        let w = noisy[items[0].slice].width();
        let mut window = Vec::with_capacity(items.len() * self.k_bands * w);
        for it in items {
            let s = &noisy[it.slice];
            for band in band_window(it.row, self.k_bands, s.n_rows()) {
                window.extend_from_slice(s.line(band, it.angle));
            }
        }
        Ok(vec![
            Tensor::new(vec![items.len(), 1, self.k_bands, w], window)?,
            line_batch(noisy, items)?,
        ])
    }

    fn forward(&self, b: &mut Builder, inputs: &[NodeId]) -> Result<Outputs> {
        let (window, target) = (inputs[0], inputs[1]);
        let ts = b.tape.shape(target).to_vec();
        let (n, w) = (ts[0], ts[2]);
        let ce = self.extractor_channels;
        let ch = self.channels;

        let (window_c, target_c) = (center(b, window)?, center(b, target)?);
        let mut spatial = Vec::new();
        for k in [3, 5, 7] {
            spatial.push(conv(b, &format!("hsinet.spatial.k{k}"), target_c, ce, &[k], None, true, WeightInit::He)?);
        }
        let spatial = b.tape.concat(&spatial)?;
        let spatial = b.tape.relu(spatial);

        let bands = conv(b, "hsinet.spectral.bands", window_c, ce, &[self.k_bands, 1], Some(ConvSpec::valid(2)), true, WeightInit::He)?;
        let bands = b.tape.reshape(bands, &[n, ce, w])?;
        let bands = b.tape.relu(bands);
        let mut spectral = Vec::new();
        for k in [3, 5, 7] {
            spectral.push(conv(b, &format!("hsinet.spectral.k{k}"), bands, ce, &[k], None, true, WeightInit::He)?);
        }
        let spectral = b.tape.concat(&spectral)?;
        let spectral = b.tape.relu(spectral);

        let joined = b.tape.concat(&[spatial, spectral])?;
        let mut h = conv_relu(b, "hsinet.fuse", joined, ch, &[3])?;
        let (c_high, c_low) = octave_split(ch, self.alpha);
        for i in 0..self.n_blocks {
            let name = format!("hsinet.block{i}");
            let y = if i < self.n_octave_blocks {
                let hi = b.tape.slice_channels(h, 0, c_high)?;
                let lo = b.tape.slice_channels(h, c_high, c_low)?;
                let lo = b.tape.avg_pool2(lo);
                let (hi, lo) = octave(b, &format!("{name}.oct"), hi, lo, (c_high, c_low), 3)?;
                let hi = b.tape.relu(hi);
                let lo = b.tape.relu(lo);
                let lo = b.tape.upsample2(lo, w)?;
                let merged = b.tape.concat(&[hi, lo])?;
                conv(b, &format!("{name}.mix"), merged, ch, &[3], None, true, WeightInit::He)?
            } else {
                let y = conv_relu(b, &format!("{name}.conv1"), h, ch, &[3])?;
                conv(b, &format!("{name}.conv2"), y, ch, &[3], None, true, WeightInit::He)?
            };
            let y = cbam(b, &format!("{name}.cbam"), y, self.cbam_reduction)?;
            h = b.tape.add(h, y)?;
        }
        let penultimate = cbam(b, "hsinet.cbam_out", h, self.cbam_reduction)?;
        let noise = conv(b, "hsinet.out", penultimate, 1, &[3], None, true, WeightInit::Zero)?;
        let out = b.tape.sub(target, noise)?;
        Ok(Outputs { out, penultimate })
    }

    fn probe_inputs(&self) -> Vec<Tensor> {
        vec![Tensor::zeros(&[2, 1, self.k_bands, 16]), Tensor::zeros(&[2, 1, 16])]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoNet {
    pub patch: PatchCraftConfig,
    pub angular_neighbors: usize,
    pub channels: usize,
    pub n_sepconv: usize,
    pub tail_channels: usize,
    pub n_tail_convs: usize,
}

impl Network for VideoNet {
    fn kind(&self) -> ModelKind {
        ModelKind::VideoNet
    }

    /// `[frames [N, 2, O, R, W], target [N, 1, W], angular [N, 2m + 1, W]]`;
    /// the frame channels are values and patch distances.
    fn inputs(&self, noisy: &[NormalizedStack], items: &[LineRef]) -> Result<Vec<Tensor>> {
        let (o, r) = (self.patch.n_offsets, self.patch.n_neighbors);
        let m = self.angular_neighbors;
        let w = noisy[items[0].slice].width();
        let mut frames = Vec::with_capacity(items.len() * 2 * o * r * w);
        let mut angular = Vec::with_capacity(items.len() * (2 * m + 1) * w);
        let mut window = Vec::new();
        for it in items {
            let s = &noisy[it.slice];
            let k = s.n_angles();
            let lo = it.angle.saturating_sub(self.patch.search_angles);
            let hi = (it.angle + self.patch.search_angles).min(k - 1);
            window.clear();
            for a in lo..=hi {
                window.extend_from_slice(s.line(it.row, a));
            }
            let f = patch_craft_frames(&window, w, hi - lo + 1, it.angle - lo, &self.patch)?;
            frames.extend_from_slice(&f.frames);
            frames.extend_from_slice(&f.distances);
            for d in 0..=2 * m {
                let a = (it.angle as isize + d as isize - m as isize).clamp(0, k as isize - 1) as usize;
                angular.extend_from_slice(s.line(it.row, a));
            }
        }
        Ok(vec![
            Tensor::new(vec![items.len(), 2, o, r, w], frames)?,
            line_batch(noisy, items)?,
            Tensor::new(vec![items.len(), 2 * m + 1, w], angular)?,
        ])
    }

    fn forward(&self, b: &mut Builder, inputs: &[NodeId]) -> Result<Outputs> {
        let (frames, target, angular) = (inputs[0], inputs[1], inputs[2]);
        let ts = b.tape.shape(target).to_vec();
        let (n, w) = (ts[0], ts[2]);
        let a = b.tape.shape(angular)[1];

        // Channel 0 holds values, channel 1 match distances.
        let mut x = center_channels(b, frames, &[1.0, 0.0])?;
        for j in 0..self.n_sepconv {
            x = sepconv(b, &format!("videonet.sep{j}"), x, self.channels, 3)?;
            x = batch_norm(b, &format!("videonet.bn{j}"), x)?;
            x = b.tape.relu(x);
        }
        let x = b.tape.mean_axis(x, 2);
        let x = b.tape.mean_axis(x, 3);
        let x = b.tape.reshape(x, &[n, self.channels, w])?;
        let noise = conv(b, "videonet.spatial_out", x, 1, &[3], None, true, WeightInit::Zero)?;
        let spatial = b.tape.sub(target, noise)?;

        let stacked = b.tape.concat(&[spatial, angular])?;
        let stacked = center(b, stacked)?;
        let mut g = b.tape.reshape(stacked, &[n, 1, a + 1, w])?;
        for j in 0..3 {
            g = conv_relu(b, &format!("videonet.angular{j}"), g, self.tail_channels, &[3, 3])?;
        }
        let g = conv(b, "videonet.collapse", g, self.tail_channels, &[a + 1, 1], Some(ConvSpec::valid(2)), true, WeightInit::He)?;
        let g = b.tape.reshape(g, &[n, self.tail_channels, w])?;
        let skip = b.tape.relu(g);
        let mut g = skip;
        for j in 0..self.n_tail_convs {
            g = conv_relu(b, &format!("videonet.tail{j}"), g, self.tail_channels, &[3])?;
        }
        let penultimate = b.tape.add(g, skip)?;
        let noise = conv(b, "videonet.out", penultimate, 1, &[3], None, true, WeightInit::Zero)?;
        let out = b.tape.sub(spatial, noise)?;
        Ok(Outputs { out, penultimate })
    }

    fn probe_inputs(&self) -> Vec<Tensor> {
        let (o, r, w) = (self.patch.n_offsets, self.patch.n_neighbors, 16);
        vec![
            Tensor::zeros(&[2, 2, o, r, w]),
            Tensor::zeros(&[2, 1, w]),
            Tensor::zeros(&[2, 2 * self.angular_neighbors + 1, w]),
        ]
    }
}

/// Single-line residual baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct DnCnn {
    pub channels: usize,
    pub hidden: usize,
}

impl Network for DnCnn {
    fn kind(&self) -> ModelKind {
        ModelKind::DnCnn
    }

    fn inputs(&self, noisy: &[NormalizedStack], items: &[LineRef]) -> Result<Vec<Tensor>> {
        Ok(vec![line_batch(noisy, items)?])
    }

    fn forward(&self, b: &mut Builder, inputs: &[NodeId]) -> Result<Outputs> {
        let target = inputs[0];
        let centered = center(b, target)?;
        let mut h = conv_relu(b, "dncnn.in", centered, self.channels, &[3])?;
        for i in 0..self.hidden {
            let y = conv(b, &format!("dncnn.hidden{i}"), h, self.channels, &[3], None, false, WeightInit::He)?;
            let y = batch_norm(b, &format!("dncnn.bn{i}"), y)?;
            h = b.tape.relu(y);
        }
        let noise = conv(b, "dncnn.out", h, 1, &[3], None, true, WeightInit::Zero)?;
        let out = b.tape.sub(target, noise)?;
        Ok(Outputs { out, penultimate: h })
    }

    fn probe_inputs(&self) -> Vec<Tensor> {
        vec![Tensor::zeros(&[2, 1, 16])]
    }
}

/// One convolution over the concatenated penultimate features of frozen
/// HSINet and VideoNet instances.
#[derive(Debug, Clone)]
pub struct Combiner {
    pub hsinet: HsiNet,
    pub hsinet_params: ParamStore,
    pub videonet: VideoNet,
    pub videonet_params: ParamStore,
}

impl Combiner {
    fn feature_channels(&self) -> (usize, usize) {
        (self.hsinet.channels, self.videonet.tail_channels)
    }
}

impl Network for Combiner {
    fn kind(&self) -> ModelKind {
        ModelKind::Combiner
    }

    /// `[hsinet features, videonet features, target]`, computed with the
    /// frozen upstream weights.
    fn inputs(&self, noisy: &[NormalizedStack], items: &[LineRef]) -> Result<Vec<Tensor>> {
        let (_, hf) = predict(&self.hsinet, &self.hsinet_params, self.hsinet.inputs(noisy, items)?)?;
        let (_, vf) = predict(&self.videonet, &self.videonet_params, self.videonet.inputs(noisy, items)?)?;
        Ok(vec![hf, vf, line_batch(noisy, items)?])
    }

    fn forward(&self, b: &mut Builder, inputs: &[NodeId]) -> Result<Outputs> {
        let (hf, vf, target) = (inputs[0], inputs[1], inputs[2]);
        if b.tape.shape(hf)[2] != b.tape.shape(vf)[2] {
            return Err(NeuralError::shape("combiner", format!("feature width {}", b.tape.shape(hf)[2]), b.tape.shape(vf)));
        }
        let joined = b.tape.concat(&[hf, vf])?;
        let noise = conv(b, "combiner.out", joined, 1, &[3], None, true, WeightInit::Zero)?;
        let out = b.tape.sub(target, noise)?;
        Ok(Outputs { out, penultimate: joined })
    }

    fn probe_inputs(&self) -> Vec<Tensor> {
        let (ch, cv) = self.feature_channels();
        vec![Tensor::zeros(&[2, ch, 16]), Tensor::zeros(&[2, cv, 16]), Tensor::zeros(&[2, 1, 16])]
    }

    /// Starts as a copy of HSINet's final layer, so the combined output
    /// equals HSINet's output before training.
    fn init_params(&self, _seed: u64) -> Result<ParamStore> {
        let (ch, cv) = self.feature_channels();
        let hw = self
            .hsinet_params
            .get("hsinet.out.w")
            .ok_or_else(|| NeuralError::MissingParameter("hsinet.out.w".into()))?;
        let hb = self
            .hsinet_params
            .get("hsinet.out.b")
            .ok_or_else(|| NeuralError::MissingParameter("hsinet.out.b".into()))?;
        let mut w = vec![0.0; (ch + cv) * 3];
        w[..ch * 3].copy_from_slice(&hw.data);
        let mut store = ParamStore::new();
        store.insert("combiner.out.w", Tensor::new(vec![1, ch + cv, 3], w)?, true);
        store.insert("combiner.out.b", hb.clone(), true);
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use msct_core::stack::{SinogramStack, StackData, StackMeta};

    pub(crate) fn toy_hsinet() -> HsiNet {
        HsiNet {
            k_bands: 4,
            channels: 6,
            extractor_channels: 2,
            n_blocks: 2,
            n_octave_blocks: 1,
            alpha: 0.34,
            cbam_reduction: 2,
        }
    }

    pub(crate) fn toy_videonet() -> VideoNet {
        VideoNet {
            patch: PatchCraftConfig {
                patch_len: 3,
                n_neighbors: 2,
                n_offsets: 2,
                search_angles: 1,
            },
            angular_neighbors: 1,
            channels: 3,
            n_sepconv: 1,
            tail_channels: 3,
            n_tail_convs: 2,
        }
    }

    fn toy_stack(width: usize, rows: usize, angles: usize) -> NormalizedStack {
        let data: Vec<f32> = (0..width * rows * angles).map(|i| 50.0 + ((i * 31) % 17) as f32).collect();
        let meta = StackMeta {
            flat_field: vec![100.0; rows],
            ..Default::default()
        };
        let s = SinogramStack::new(width, rows, angles, StackData::F32(data), meta).unwrap();
        msct_core::classical::normalize_per_line(&s).unwrap()
    }

    #[test]
    fn fresh_networks_are_the_identity() {
        let stacks = vec![toy_stack(16, 5, 4)];
        let items = lines(&stacks, &[0], 0..5);
        let nets: Vec<Box<dyn Network>> = vec![
            Box::new(toy_hsinet()),
            Box::new(toy_videonet()),
            Box::new(DnCnn { channels: 4, hidden: 2 }),
        ];
        for net in nets {
            let store = net.init_params(3).unwrap();
            let (out, _) = predict(net.as_ref(), &store, net.inputs(&stacks, &items).unwrap()).unwrap();
            assert_eq!(out.data, line_batch(&stacks, &items).unwrap().data, "{:?}", net.kind());
        }
    }

    #[test]
    fn output_and_feature_shapes() {
        let net = toy_hsinet();
        let store = net.init_params(1).unwrap();
        for w in [64, 256] {
            let stacks = vec![toy_stack(w, 5, 2)];
            let items = lines(&stacks, &[0], 2..3);
            let (out, feat) = predict(&net, &store, net.inputs(&stacks, &items).unwrap()).unwrap();
            assert_eq!(out.shape, vec![2, 1, w]);
            assert_eq!(feat.shape, vec![2, net.channels, w]);
        }
    }

    #[test]
    fn band_window_replicates_edges() {
        assert_eq!(band_window(0, 4, 10).collect::<Vec<_>>(), vec![0, 0, 0, 1]);
        assert_eq!(band_window(9, 4, 10).collect::<Vec<_>>(), vec![7, 8, 9, 9]);
        assert_eq!(band_window(5, 3, 10).collect::<Vec<_>>(), vec![4, 5, 6]);
    }

    #[test]
    fn combiner_starts_as_hsinet() {
        let stacks = vec![toy_stack(16, 5, 4)];
        let items = lines(&stacks, &[0], 1..3);
        let h = toy_hsinet();
        let mut hp = h.init_params(5).unwrap();
        // Give HSINet a non-trivial final layer.
        for (k, v) in hp.block_mut(hp.find("hsinet.out.w").unwrap()).value.data.iter_mut().enumerate() {
            *v = 0.01 * (k as f64 - 8.0);
        }
        let v = toy_videonet();
        let vp = v.init_params(6).unwrap();
        let c = Combiner {
            hsinet: h.clone(),
            hsinet_params: hp.clone(),
            videonet: v,
            videonet_params: vp,
        };
        let cp = c.init_params(0).unwrap();
        let (co, _) = predict(&c, &cp, c.inputs(&stacks, &items).unwrap()).unwrap();
        let (ho, _) = predict(&h, &hp, h.inputs(&stacks, &items).unwrap()).unwrap();
        for (a, b) in co.data.iter().zip(&ho.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fingerprints_distinguish_architectures() {
        let a = toy_hsinet();
        let mut b = a.clone();
        b.n_blocks = 3;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert_eq!(a.fingerprint().unwrap(), a.clone().fingerprint().unwrap());
    }

    #[test]
    fn alpha_split() {
        assert_eq!(octave_split(20, 0.1), (18, 2));
        assert_eq!(octave_split(32, 0.1), (29, 3));
    }
}
