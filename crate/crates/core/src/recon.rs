//! Parallel-beam filtered backprojection of single-band sinograms.
//!
//! A sinogram is an `n_angles × width` image (width fastest). Detector pixel
//! `k` sits at `s_k = (k − (W−1)/2)·pitch`, the reconstruction grid has the
//! same pitch and side `W`, and image pixel `(i, j)` (column, row) is centered
//! at `x = (i − (W−1)/2)·pitch`, `y = (j − (W−1)/2)·pitch`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::classical::NormalizedStack;
use crate::detector::projection_angles;
use crate::error::{Error, Result};
use crate::stack::{sidecar_path, write_raw, RawArray, SinogramStack, StackData};

/// Floor applied before the log transform (DN).
pub const LOG_FLOOR_DN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub width: usize,
    pub n_angles: usize,
    pub data: Vec<f64>,
}

impl Sinogram {
    pub fn new(width: usize, n_angles: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * n_angles {
            return Err(Error::ShapeMismatch(format!("{} values for {width}x{n_angles} sinogram", data.len())));
        }
        Ok(Self { width, n_angles, data })
    }

    pub fn projection(&self, a: usize) -> &[f64] {
        &self.data[a * self.width..(a + 1) * self.width]
    }
}

fn check_band(band: usize, n_rows: usize) -> Result<()> {
    if band >= n_rows {
        return Err(Error::InvalidParameter(format!("band {band} outside 0..{n_rows}")));
    }
    Ok(())
}

/// Extracts one band; with `log` the values become −ln(max(v, ε)/flat).
pub fn sinogram_from_stack(stack: &SinogramStack, band: usize, log: bool) -> Result<Sinogram> {
    check_band(band, stack.n_rows())?;
    let mut data = stack.band(band);
    if log {
        let flat = *stack
            .meta
            .flat_field
            .get(band)
            .ok_or_else(|| Error::Format("stack has no flat field for the log transform".into()))?;
        if !(flat > 0.0) {
            return Err(Error::FlatFieldTooSmall { row: band, value: flat });
        }
        data.iter_mut().for_each(|v| *v = -(v.max(LOG_FLOOR_DN) / flat).ln());
    }
    Sinogram::new(stack.width(), stack.n_angles(), data)
}

/// As [`sinogram_from_stack`] for normalized data; the floor is ε/flat.
pub fn sinogram_from_normalized(stack: &NormalizedStack, band: usize, log: bool) -> Result<Sinogram> {
    check_band(band, stack.n_rows())?;
    let mut data = stack.band(band);
    if log {
        let flat = stack.flat_field()[band];
        let floor = LOG_FLOOR_DN / flat;
        data.iter_mut().for_each(|v| *v = -v.max(floor).ln());
    }
    Sinogram::new(stack.width(), stack.n_angles(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RampFilter {
    #[default]
    RamLak,
    Hann,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub side: usize,
    /// Row-major, `side × side`.
    pub values: Vec<f64>,
    pub pixel_pitch: f64,
    pub band: usize,
}

impl SliceImage {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.side + col]
    }
}

/// Frequency response of the band-limited spatial ramp kernel, for
/// zero-padded length `n` (a power of two ≥ 2·width).
fn ramp_response(width: usize, n: usize, pitch: f64, filter: RampFilter) -> Vec<Complex<f64>> {
    let mut h = vec![Complex::new(0.0, 0.0); n];
    let tau2 = pitch * pitch;
    h[0].re = 1.0 / (4.0 * tau2);
    for k in 1..width {
        if k % 2 == 1 {
            let v = -1.0 / ((k * k) as f64 * std::f64::consts::PI * std::f64::consts::PI * tau2);
            h[k].re = v;
            h[n - k].re = v;
        }
    }
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut h);
    if filter == RampFilter::Hann {
        for (k, v) in h.iter_mut().enumerate() {
            let f = if k <= n / 2 { k } else { n - k } as f64 / n as f64;
            *v *= 0.5 * (1.0 + (2.0 * std::f64::consts::PI * f).cos());
        }
    }
    h
}

/// Ramp-filters every projection: q = τ·(p ⊛ h).
pub fn filter_sinogram(sino: &Sinogram, pitch: f64, filter: RampFilter) -> Vec<f64> {
    let w = sino.width;
    let n = (2 * w).next_power_of_two();
    let response = ramp_response(w, n, pitch, filter);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let scale = pitch / n as f64;
    let rows: Vec<Vec<f64>> = (0..sino.n_angles)
        .into_par_iter()
        .map(|a| {
            let mut buf: Vec<Complex<f64>> = sino
                .projection(a)
                .iter()
                .map(|v| Complex::new(*v, 0.0))
                .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
                .take(n)
                .collect();
            fwd.process(&mut buf);
            buf.iter_mut().zip(&response).for_each(|(b, r)| *b *= r);
            inv.process(&mut buf);
            buf[..w].iter().map(|c| c.re * scale).collect()
        })
        .collect();
    rows.concat()
}

/// Linear-interpolation backprojection of filtered projections, scaled by
/// π/K so that the result is in the units of the line integrals per meter.
pub fn backproject(filtered: &[f64], width: usize, angles: &[f64]) -> Vec<f64> {
    let k = angles.len();
    let c = (width as f64 - 1.0) / 2.0;
    let trig: Vec<(f64, f64)> = angles.iter().map(|t| t.sin_cos()).collect();
    let scale = std::f64::consts::PI / k as f64;
    let rows: Vec<Vec<f64>> = (0..width)
        .into_par_iter()
        .map(|j| {
            let y = j as f64 - c;
            let mut row = vec![0.0; width];
            for (a, (sin, cos)) in trig.iter().enumerate() {
                let proj = &filtered[a * width..(a + 1) * width];
                let base = y * sin + c;
                for (i, out) in row.iter_mut().enumerate() {
                    let t = (i as f64 - c) * cos + base;
                    // Samples beyond the detector are zero; interpolating
                    // towards them keeps the result continuous in t.
                    if t <= -1.0 || t >= width as f64 {
                        continue;
                    }
                    let tf = t.floor();
                    let fr = t - tf;
                    let i0 = tf as isize;
                    let at = |k: isize| if k >= 0 && (k as usize) < width { proj[k as usize] } else { 0.0 };
                    let v = at(i0) * (1.0 - fr) + at(i0 + 1) * fr;
                    *out += v;
                }
            }
            row.iter_mut().for_each(|v| *v *= scale);
            row
        })
        .collect();
    rows.concat()
}

pub fn fbp_with_filter(sino: &Sinogram, angles: &[f64], pixel_pitch: f64, filter: RampFilter) -> Result<SliceImage> {
    if angles.len() < 2 {
        return Err(Error::InvalidParameter(format!("FBP needs at least 2 angles, got {}", angles.len())));
    }
    if angles.len() != sino.n_angles {
        return Err(Error::ShapeMismatch(format!("{} angles for {} projections", angles.len(), sino.n_angles)));
    }
    if sino.width < 4 {
        return Err(Error::InvalidParameter(format!("FBP needs width >= 4, got {}", sino.width)));
    }
    if !(pixel_pitch > 0.0) {
        return Err(Error::InvalidParameter("pixel pitch must be > 0".into()));
    }
    let filtered = filter_sinogram(sino, pixel_pitch, filter);
    let values = backproject(&filtered, sino.width, angles);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("FBP produced non-finite values".into()));
    }
    Ok(SliceImage {
        side: sino.width,
        values,
        pixel_pitch,
        band: 0,
    })
}

/// Ram-Lak filtered backprojection.
pub fn fbp(sino: &Sinogram, angles: &[f64], pixel_pitch: f64) -> Result<SliceImage> {
    fbp_with_filter(sino, angles, pixel_pitch, RampFilter::RamLak)
}

/// Angles recorded in the stack, or the uniform default.
pub fn stack_angles(stack: &SinogramStack) -> Vec<f64> {
    if stack.meta.angles.len() == stack.n_angles() {
        stack.meta.angles.clone()
    } else {
        projection_angles(stack.n_angles())
    }
}

/// Log-transforms and reconstructs one band of a stack.
pub fn reconstruct_band(stack: &SinogramStack, band: usize, pixel_pitch: f64, filter: RampFilter) -> Result<SliceImage> {
    let sino = sinogram_from_stack(stack, band, true)?;
    let mut img = fbp_with_filter(&sino, &stack_angles(stack), pixel_pitch, filter)?;
    img.band = band;
    Ok(img)
}

/// Pixel-wise mean of stacks with identical dims; f32 result.
pub fn average_stacks(stacks: &[SinogramStack]) -> Result<SinogramStack> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::InvalidParameter("nothing to average".into()))?;
    if let Some(s) = stacks.iter().find(|s| !s.same_dims(first)) {
        return Err(Error::ShapeMismatch(format!("stack dims {:?} vs {:?}", s.dims(), first.dims())));
    }
    let n = first.data.len();
    let inv = 1.0 / stacks.len() as f64;
    let data: Vec<f32> = (0..n)
        .map(|i| (stacks.iter().map(|s| s.data.get(i)).sum::<f64>() * inv) as f32)
        .collect();
    let mut meta = first.meta.clone();
    meta.extra.insert("averaged_realizations".into(), stacks.len().to_string());
    SinogramStack::new(first.width(), first.n_rows(), first.n_angles(), StackData::F32(data), meta)
}

/// Averages N realizations in the projection domain, then reconstructs once.
pub fn averaged_reference(stacks: &[SinogramStack], band: usize, pixel_pitch: f64, filter: RampFilter) -> Result<SliceImage> {
    if stacks.len() < 2 {
        if stacks.len() == 1 {
            return reconstruct_band(&stacks[0], band, pixel_pitch, filter);
        }
        return Err(Error::InvalidParameter("averaged reference needs at least one stack".into()));
    }
    let avg = average_stacks(stacks)?;
    reconstruct_band(&avg, band, pixel_pitch, filter)
}

/// 16-bit binary PGM of the window `[lo, hi]`, plus a sidecar recording it.
pub fn write_pgm(path: impl AsRef<Path>, img: &SliceImage, window: Option<(f64, f64)>) -> Result<(f64, f64)> {
    let path = path.as_ref();
    let (lo, hi) = window.unwrap_or_else(|| {
        let lo = img.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = img.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    });
    if !(hi > lo) {
        return Err(Error::InvalidParameter(format!("empty display window [{lo}, {hi}]")));
    }
    let mut bytes = format!("P5\n{} {}\n65535\n", img.side, img.side).into_bytes();
    for v in &img.values {
        let q = ((v - lo) / (hi - lo) * 65535.0).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mut side = String::new();
    let _ = writeln!(side, "side={}", img.side);
    let _ = writeln!(side, "band={}", img.band);
    let _ = writeln!(side, "pixel_pitch={}", img.pixel_pitch);
    let _ = writeln!(side, "window_lo={lo}");
    let _ = writeln!(side, "window_hi={hi}");
    let sp = sidecar_path(path);
    fs::write(&sp, side).map_err(|e| Error::io(&sp, e))?;
    Ok((lo, hi))
}

/// Raw f32 slice in the MSCTSTK1 container (ndim 2).
pub fn write_slice_raw(path: impl AsRef<Path>, img: &SliceImage) -> Result<()> {
    write_raw(
        path,
        &RawArray {
            dims: vec![img.side as u64, img.side as u64],
            data: StackData::F32(img.values.iter().map(|v| *v as f32).collect()),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::StackMeta;

    /// Analytic chord lengths of a centered disk of radius `r` pixels.
    pub(crate) fn disk_sinogram(width: usize, n_angles: usize, r: f64, pitch: f64) -> Sinogram {
        let c = (width as f64 - 1.0) / 2.0;
        let row: Vec<f64> = (0..width)
            .map(|k| {
                let s = k as f64 - c;
                if s.abs() < r {
                    2.0 * (r * r - s * s).sqrt() * pitch
                } else {
                    0.0
                }
            })
            .collect();
        Sinogram::new(width, n_angles, row.repeat(n_angles)).unwrap()
    }

    fn region_means(img: &SliceImage, r: f64) -> (f64, f64) {
        let c = (img.side as f64 - 1.0) / 2.0;
        let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
        for j in 0..img.side {
            for i in 0..img.side {
                let d = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
                if d < r - 2.0 {
                    si += img.get(i, j);
                    ni += 1;
                } else if d > r + 2.0 && d < c {
                    so += img.get(i, j);
                    no += 1;
                }
            }
        }
        (si / ni as f64, so / no as f64)
    }

    #[test]
    fn disk_reconstruction() {
        let pitch = 1e-4;
        let sino = disk_sinogram(128, 180, 40.0, pitch);
        let img = fbp(&sino, &projection_angles(180), pitch).unwrap();
        let (inside, outside) = region_means(&img, 40.0);
        // Unit attenuation is 1 per meter here since chords are in meters.
        assert!((inside - 1.0).abs() < 0.02, "{inside}");
        assert!(outside.abs() < 0.02, "{outside}");
    }

    #[test]
    fn zero_and_linearity() {
        let angles = projection_angles(12);
        let z = Sinogram::new(16, 12, vec![0.0; 192]).unwrap();
        assert!(fbp(&z, &angles, 1.0).unwrap().values.iter().all(|v| *v == 0.0));
        let p = disk_sinogram(16, 12, 5.0, 1.0);
        let q = Sinogram::new(16, 12, (0..192).map(|i| ((i * 7919) % 13) as f64).collect()).unwrap();
        let comb = Sinogram::new(16, 12, p.data.iter().zip(&q.data).map(|(a, b)| 2.0 * a - 0.5 * b).collect()).unwrap();
        let (fp, fq, fc) = (
            fbp(&p, &angles, 1.0).unwrap(),
            fbp(&q, &angles, 1.0).unwrap(),
            fbp(&comb, &angles, 1.0).unwrap(),
        );
        for i in 0..fc.values.len() {
            let e = 2.0 * fp.values[i] - 0.5 * fq.values[i];
            assert!((fc.values[i] - e).abs() <= 1e-9 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn rotating_angle_labels_rotates_image() {
        let w = 24;
        let k = 16;
        let data: Vec<f64> = (0..w * k).map(|i| ((i * 31) % 17) as f64 / 17.0).collect();
        let sino = Sinogram::new(w, k, data).unwrap();
        let angles = projection_angles(k);
        let shifted: Vec<f64> = angles.iter().map(|t| t + std::f64::consts::FRAC_PI_2).collect();
        let a = fbp(&sino, &angles, 1.0).unwrap();
        let b = fbp(&sino, &shifted, 1.0).unwrap();
        for j in 0..w {
            for i in 0..w {
                let expect = a.get(j, w - 1 - i);
                assert!((b.get(i, j) - expect).abs() < 1e-9, "({i},{j})");
            }
        }
    }

    #[test]
    fn too_few_angles() {
        let s = Sinogram::new(8, 1, vec![0.0; 8]).unwrap();
        assert!(fbp(&s, &[0.0], 1.0).is_err());
    }

    fn tiny_stack(value: f64) -> SinogramStack {
        let meta = StackMeta {
            flat_field: vec![100.0, 50.0],
            ..Default::default()
        };
        SinogramStack::new(4, 2, 3, StackData::F32(vec![value as f32; 24]), meta).unwrap()
    }

    #[test]
    fn log_transform() {
        let s = tiny_stack(50.0);
        let a = sinogram_from_stack(&s, 0, true).unwrap();
        assert!(a.data.iter().all(|v| (v - std::f64::consts::LN_2).abs() < 1e-12));
        let b = sinogram_from_stack(&s, 1, true).unwrap();
        assert!(b.data.iter().all(|v| *v == 0.0));
        let z = sinogram_from_stack(&tiny_stack(0.0), 0, true).unwrap();
        assert!(z.data.iter().all(|v| (v - (100.0f64 / 0.5).ln()).abs() < 1e-12));
        assert!(sinogram_from_stack(&s, 2, true).is_err());
    }

    #[test]
    fn averaging_identical_stacks() {
        let base = tiny_stack(30.0);
        let avg = average_stacks(&[base.clone(), base.clone(), base.clone()]).unwrap();
        assert_eq!(avg.data, base.data);
        let other = SinogramStack::new(8, 2, 3, StackData::F32(vec![0.0; 48]), base.meta.clone());
        assert!(other.is_err() || average_stacks(&[base.clone(), other.unwrap()]).is_err());
    }

    #[test]
    fn pgm_export() {
        let dir = tempfile::tempdir().unwrap();
        let img = SliceImage {
            side: 2,
            values: vec![0.0, 1.0, 0.5, 2.0],
            pixel_pitch: 1.0,
            band: 3,
        };
        let p = dir.path().join("s.pgm");
        let win = write_pgm(&p, &img, Some((0.0, 1.0))).unwrap();
        assert_eq!(win, (0.0, 1.0));
        let bytes = fs::read(&p).unwrap();
        let header = b"P5\n2 2\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 0, 255, 255, 128, 0, 255, 255]);
        let side = fs::read_to_string(dir.path().join("s.meta")).unwrap();
        assert!(side.contains("window_hi=1"));
    }
}
