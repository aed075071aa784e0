//! Image-quality metrics and method reports.

use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::NormalizedStack;
use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, fnv1a64};

/// PSNR value; identical images saturate instead of reporting infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Saturated,
}

impl Psnr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(*v),
            Psnr::Saturated => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.3}"),
            Psnr::Saturated => write!(f, "saturated"),
        }
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

pub fn mse(x: &[f64], reference: &[f64]) -> Result<f64> {
    same_len(x, reference)?;
    Ok(compensated_sum(x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b))) / x.len() as f64)
}

pub fn psnr(x: &[f64], reference: &[f64], peak: f64) -> Result<Psnr> {
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("PSNR peak must be > 0, got {peak}")));
    }
    let m = mse(x, reference)?;
    if m == 0.0 {
        return Ok(Psnr::Saturated);
    }
    Ok(Psnr::Db(10.0 * (peak * peak / m).log10()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range L of the data.
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

/// Level weights of the standard five-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gauss_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().enumerate().map(|(t, kv)| kv * img[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(t, kv)| kv * tmp[(y + t) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term.
fn ssim_components(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams) -> Result<(f64, f64)> {
    same_len(x, y)?;
    if x.len() != h * w {
        return Err(Error::ShapeMismatch(format!("{} values for {h}x{w}", x.len())));
    }
    if h < p.window || w < p.window {
        return Err(Error::InvalidParameter(format!(
            "image {h}x{w} smaller than the {} SSIM window",
            p.window
        )));
    }
    let k = gauss_window(p.window, p.sigma);
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, oh, ow) = filter_valid(x, h, w, &k);
    let (my, _, _) = filter_valid(y, h, w, &k);
    let (sxx, _, _) = filter_valid(&xx, h, w, &k);
    let (syy, _, _) = filter_valid(&yy, h, w, &k);
    let (sxy, _, _) = filter_valid(&xy, h, w, &k);
    let n = oh * ow;
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..n {
        let vx = sxx[i] - mx[i] * mx[i];
        let vy = syy[i] - my[i] * my[i];
        let cov = sxy[i] - mx[i] * my[i];
        let cs = (2.0 * cov + c2) / (vx + vy + c2);
        let l = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        ssim_sum += l * cs;
        cs_sum += cs;
    }
    Ok((ssim_sum / n as f64, cs_sum / n as f64))
}

pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams) -> Result<f64> {
    Ok(ssim_components(x, y, h, w, p)?.0)
}

/// 2×2 mean pooling (the low-pass and decimation step of the pyramid).
fn downsample(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out.push(0.25 * (img[i] + img[i + 1] + img[i + w] + img[i + w + 1]));
        }
    }
    (out, oh, ow)
}

/// Largest level count (≤ 5) whose coarsest scale still holds the window.
pub fn ms_ssim_max_levels(h: usize, w: usize, window: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len())
        .rev()
        .find(|l| (h >> (l - 1)) >= window && (w >> (l - 1)) >= window)
        .unwrap_or(0)
}

/// Multi-scale SSIM with `levels` scales. The first `levels` standard weights
/// are renormalized to sum to one when fewer than five scales are used.
/// Negative contrast-structure terms are clamped to zero before the
/// weighted geometric product.
pub fn ms_ssim(x: &[f64], y: &[f64], h: usize, w: usize, levels: usize, p: &SsimParams) -> Result<f64> {
    if levels == 0 || levels > MS_SSIM_WEIGHTS.len() {
        return Err(Error::InvalidParameter(format!("MS-SSIM levels must be 1..=5, got {levels}")));
    }
    if (h >> (levels - 1)) < p.window || (w >> (levels - 1)) < p.window {
        return Err(Error::InvalidParameter(format!(
            "image {h}x{w} too small for {levels} MS-SSIM levels with window {}",
            p.window
        )));
    }
    let total: f64 = MS_SSIM_WEIGHTS[..levels].iter().sum();
    let (mut a, mut b) = (x.to_vec(), y.to_vec());
    let (mut ch, mut cw) = (h, w);
    let mut value = 1.0;
    for (l, weight) in MS_SSIM_WEIGHTS[..levels].iter().enumerate() {
        let (s, cs) = ssim_components(&a, &b, ch, cw, p)?;
        let term = if l + 1 == levels { s } else { cs };
        value *= term.max(0.0).powf(weight / total);
        if l + 1 < levels {
            let (na, nh, nw) = downsample(&a, ch, cw);
            let (nb, _, _) = downsample(&b, ch, cw);
            a = na;
            b = nb;
            ch = nh;
            cw = nw;
        }
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NrmseNorm {
    /// Divide by max(ref) − min(ref).
    #[default]
    Range,
    /// Divide by mean(ref).
    Mean,
}

pub fn nrmse(x: &[f64], reference: &[f64], norm: NrmseNorm) -> Result<f64> {
    let rmse = mse(x, reference)?.sqrt();
    let denom = match norm {
        NrmseNorm::Range => {
            let lo = reference.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        }
        NrmseNorm::Mean => compensated_sum(reference.iter().copied()) / reference.len() as f64,
    };
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Numeric(format!("NRMSE reference has degenerate normalization {denom}")));
    }
    Ok(rmse / denom.abs())
}

/// Rectangular region of a slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub name: String,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

pub const MIN_ROI_PIXELS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RoiSnr {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    /// `None` when the region has zero spread.
    pub snr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiSnrReport {
    pub rois: Vec<RoiSnr>,
    /// Root mean square of the finite per-ROI SNR values.
    pub composite: Option<f64>,
    pub warnings: Vec<String>,
}

/// Mean over population standard deviation per ROI of a `side × side` image.
pub fn roi_snr(image: &[f64], side: usize, rois: &[Roi]) -> Result<RoiSnrReport> {
    if image.len() != side * side {
        return Err(Error::ShapeMismatch(format!("{} values for a {side}² slice", image.len())));
    }
    if rois.is_empty() {
        return Err(Error::InvalidParameter("no ROIs given".into()));
    }
    let mut out = Vec::with_capacity(rois.len());
    let mut warnings = Vec::new();
    for r in rois {
        if r.x + r.w > side || r.y + r.h > side {
            return Err(Error::InvalidParameter(format!("ROI {} exceeds the {side}² slice", r.name)));
        }
        if r.w * r.h < MIN_ROI_PIXELS {
            return Err(Error::InvalidParameter(format!("ROI {} has fewer than {MIN_ROI_PIXELS} pixels", r.name)));
        }
        let vals: Vec<f64> = (r.y..r.y + r.h)
            .flat_map(|y| (r.x..r.x + r.w).map(move |x| y * side + x))
            .map(|i| image[i])
            .collect();
        let (mean, var) = crate::numeric::mean_var(&vals);
        let std = var.max(0.0).sqrt();
        let snr = if std > 0.0 {
            Some(mean / std)
        } else {
            warnings.push(format!("ROI {} has zero spread; excluded from the composite", r.name));
            None
        };
        out.push(RoiSnr {
            name: r.name.clone(),
            mean,
            std,
            snr,
        });
    }
    let finite: Vec<f64> = out.iter().filter_map(|r| r.snr).collect();
    let composite = if finite.is_empty() {
        None
    } else {
        Some((finite.iter().map(|s| s * s).sum::<f64>() / finite.len() as f64).sqrt())
    };
    Ok(RoiSnrReport {
        rois: out,
        composite,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSelection {
    pub psnr: bool,
    pub ssim: bool,
    pub ms_ssim: bool,
    pub nrmse: bool,
    pub nrmse_norm: NrmseNorm,
    /// PSNR peak in the normalized domain.
    pub peak: f64,
}

impl Default for MetricSelection {
    fn default() -> Self {
        Self {
            psnr: true,
            ssim: true,
            ms_ssim: true,
            nrmse: true,
            nrmse_norm: NrmseNorm::Range,
            peak: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BandMetrics {
    pub band: usize,
    pub psnr: Option<Psnr>,
    pub ssim: Option<f64>,
    pub ms_ssim: Option<f64>,
    pub nrmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    /// FNV-1a hash of the reference data.
    pub fingerprint: u64,
    pub selection: MetricSelection,
    /// Scales used by MS-SSIM (depends on the band image size).
    pub ms_ssim_levels: usize,
    pub bands: Vec<BandMetrics>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl MetricsReport {
    /// Mean PSNR over bands; saturated bands are skipped, and an all-saturated
    /// report returns `Saturated`.
    pub fn mean_psnr(&self) -> Option<Psnr> {
        let vals: Vec<Psnr> = self.bands.iter().filter_map(|b| b.psnr).collect();
        if vals.is_empty() {
            return None;
        }
        match mean_of(vals.iter().filter_map(|p| p.db())) {
            Some(m) => Some(Psnr::Db(m)),
            None => Some(Psnr::Saturated),
        }
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        mean_of(self.bands.iter().filter_map(|b| b.ssim))
    }

    pub fn mean_ms_ssim(&self) -> Option<f64> {
        mean_of(self.bands.iter().filter_map(|b| b.ms_ssim))
    }

    pub fn mean_nrmse(&self) -> Option<f64> {
        mean_of(self.bands.iter().filter_map(|b| b.nrmse))
    }
}

pub fn fingerprint(values: &[f64]) -> u64 {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fnv1a64(&bytes)
}

/// Metrics of `candidate` against `reference` on the given rows, in the
/// normalized domain. Band images are `n_angles × width`.
pub fn evaluate_method(
    method: &str,
    reference: &NormalizedStack,
    candidate: &NormalizedStack,
    rows: &[usize],
    selection: &MetricSelection,
) -> Result<MetricsReport> {
    if reference.dims() != candidate.dims() {
        return Err(Error::ShapeMismatch(format!(
            "reference {:?} vs candidate {:?}",
            reference.dims(),
            candidate.dims()
        )));
    }
    let (w, n_rows, k) = reference.dims();
    if let Some(r) = rows.iter().find(|r| **r >= n_rows) {
        return Err(Error::InvalidParameter(format!("row {r} outside 0..{n_rows}")));
    }
    let params = SsimParams {
        data_range: selection.peak,
        ..Default::default()
    };
    let levels = ms_ssim_max_levels(k, w, params.window);
    let bands: Vec<Result<BandMetrics>> = rows
        .par_iter()
        .map(|&row| {
            let r = reference.band(row);
            let c = candidate.band(row);
            let mut m = BandMetrics {
                band: row,
                ..Default::default()
            };
            if selection.psnr {
                m.psnr = Some(psnr(&c, &r, selection.peak)?);
            }
            if selection.ssim {
                m.ssim = Some(ssim(&c, &r, k, w, &params)?);
            }
            if selection.ms_ssim && levels > 0 {
                m.ms_ssim = Some(ms_ssim(&c, &r, k, w, levels, &params)?);
            }
            if selection.nrmse {
                m.nrmse = Some(nrmse(&c, &r, selection.nrmse_norm)?);
            }
            Ok(m)
        })
        .collect();
    Ok(MetricsReport {
        method: method.to_string(),
        fingerprint: fingerprint(&reference.data),
        selection: *selection,
        ms_ssim_levels: levels,
        bands: bands.into_iter().collect::<Result<_>>()?,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn opt_psnr(v: Option<Psnr>) -> String {
    v.map(|p| p.to_string()).unwrap_or_default()
}

/// Per-band rows for every report, then one `mean` row per method.
/// The `lpips` column is reserved for externally computed values.
pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("method,band,psnr_db,ssim,ms_ssim,nrmse,lpips,nrmse_norm,ms_ssim_levels,fingerprint\n");
    for r in reports {
        let norm = match r.selection.nrmse_norm {
            NrmseNorm::Range => "range",
            NrmseNorm::Mean => "mean",
        };
        let tail = format!("{norm},{},{:016x}", r.ms_ssim_levels, r.fingerprint);
        for b in &r.bands {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},,{tail}",
                r.method,
                b.band,
                opt_psnr(b.psnr),
                opt(b.ssim),
                opt(b.ms_ssim),
                opt(b.nrmse)
            );
        }
        let _ = writeln!(
            out,
            "{},mean,{},{},{},{},,{tail}",
            r.method,
            opt_psnr(r.mean_psnr()),
            opt(r.mean_ssim()),
            opt(r.mean_ms_ssim()),
            opt(r.mean_nrmse())
        );
    }
    out
}

/// Aligned console table of per-method means.
pub fn reports_table(reports: &[MetricsReport]) -> String {
    let mut out = format!("{:<12} {:>10} {:>8} {:>8} {:>8}\n", "method", "PSNR dB", "SSIM", "MS-SSIM", "NRMSE");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:>8} {:>8} {:>8}",
            r.method,
            r.mean_psnr().map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
            r.mean_ssim().map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.mean_ms_ssim().map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.mean_nrmse().map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        );
    }
    out
}

/// One line per band: band, mean energy, composite SNR.
pub fn snr_curve_csv(points: &[(usize, f64, Option<f64>)]) -> String {
    let mut out = String::from("band,mean_energy_kev,composite_snr\n");
    for (b, e, s) in points {
        let _ = writeln!(out, "{b},{e},{}", opt(*s));
    }
    out
}
