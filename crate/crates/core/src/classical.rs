//! Per-row normalization and the classical baselines: non-local means and
//! total-variation denoising.
//!
//! Images are row-major `h × w` slices of `f64`; for a sinogram band the rows
//! are projection angles and the columns detector pixels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stack::{SinogramStack, StackData, StackMeta};

/// Smallest flat-field value normalization accepts (DN).
pub const MIN_FLAT_FIELD: f64 = 1e-6;

/// A stack divided row-wise by its flat field.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedStack {
    width: usize,
    n_rows: usize,
    n_angles: usize,
    /// Same layout as [`SinogramStack`]: width fastest, then row, then angle.
    pub data: Vec<f64>,
    pub meta: StackMeta,
    /// Whether the source stack stored u16 gray values.
    pub source_u16: bool,
}

impl NormalizedStack {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.n_rows, self.n_angles)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn flat_field(&self) -> &[f64] {
        &self.meta.flat_field
    }

    pub fn index(&self, w: usize, row: usize, angle: usize) -> usize {
        w + self.width * (row + self.n_rows * angle)
    }

    /// One row's sinogram as an `n_angles × width` image.
    pub fn band(&self, row: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width * self.n_angles);
        for a in 0..self.n_angles {
            let s = self.index(0, row, a);
            out.extend_from_slice(&self.data[s..s + self.width]);
        }
        out
    }

    pub fn set_band(&mut self, row: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.width * self.n_angles {
            return Err(Error::ShapeMismatch(format!("band of {} values", values.len())));
        }
        for a in 0..self.n_angles {
            let s = self.index(0, row, a);
            self.data[s..s + self.width].copy_from_slice(&values[a * self.width..(a + 1) * self.width]);
        }
        Ok(())
    }

    /// Detector line (one row at one angle).
    pub fn line(&self, row: usize, angle: usize) -> &[f64] {
        let s = self.index(0, row, angle);
        &self.data[s..s + self.width]
    }

    /// Copy with the data replaced, e.g. by a denoiser's output.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!("{} values for {:?}", data.len(), self.dims())));
        }
        Ok(Self { data, ..self.clone() })
    }
}

pub fn normalize_per_line(stack: &SinogramStack) -> Result<NormalizedStack> {
    let (width, n_rows, n_angles) = stack.dims();
    let flat = &stack.meta.flat_field;
    if flat.len() != n_rows {
        return Err(Error::ShapeMismatch(format!("stack has {} flat-field entries for {n_rows} rows", flat.len())));
    }
    if let Some((row, v)) = flat.iter().enumerate().find(|(_, v)| !(**v > MIN_FLAT_FIELD)) {
        return Err(Error::FlatFieldTooSmall { row, value: *v });
    }
    let mut data = stack.data.to_f64();
    for a in 0..n_angles {
        for (row, f) in flat.iter().enumerate() {
            let s = width * (row + n_rows * a);
            data[s..s + width].iter_mut().for_each(|v| *v /= f);
        }
    }
    Ok(NormalizedStack {
        width,
        n_rows,
        n_angles,
        data,
        meta: stack.meta.clone(),
        source_u16: matches!(stack.data, StackData::U16(_)),
    })
}

/// Multiplies back by the flat field. The result is f32 so that denoised
/// values are not re-quantized.
pub fn denormalize(n: &NormalizedStack) -> Result<SinogramStack> {
    let mut data = n.data.clone();
    for a in 0..n.n_angles {
        for (row, f) in n.meta.flat_field.iter().enumerate() {
            let s = n.width * (row + n.n_rows * a);
            data[s..s + n.width].iter_mut().for_each(|v| *v *= f);
        }
    }
    SinogramStack::new(
        n.width,
        n.n_rows,
        n.n_angles,
        StackData::F32(data.into_iter().map(|v| v as f32).collect()),
        n.meta.clone(),
    )
}

/// Index into `0..n` with mirror reflection at both ends (edge not repeated).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable correlation with a symmetric kernel, reflect padding.
fn blur_separable(img: &[f64], h: usize, w: usize, k: &[f64], tmp: &mut [f64], out: &mut [f64]) {
    let r = (k.len() / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * img[y * w + reflect(x as isize + t as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + t as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
}

/// Non-local means with Gaussian-weighted patch distances.
///
/// For each pixel the output is Σ w·I(q) / Σ w over the search window, with
/// `w = exp(−d²/h²)` and `d²` the Gaussian-weighted mean squared difference
/// between the patches around p and q (σ = patch_radius / 2, minimum 0.5).
pub fn nlm_denoise(image: &[f64], h: usize, w: usize, patch_radius: usize, search_radius: usize, strength: f64) -> Result<Vec<f64>> {
    if image.len() != h * w || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch(format!("{} values for {h}x{w}", image.len())));
    }
    if patch_radius == 0 || search_radius == 0 {
        return Err(Error::InvalidParameter("NLM radii must be >= 1".into()));
    }
    if !(strength > 0.0) {
        return Err(Error::InvalidParameter(format!("NLM strength must be > 0, got {strength}")));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("NLM input is not finite".into()));
    }
    let kernel = gaussian_kernel(patch_radius, (patch_radius as f64 / 2.0).max(0.5));
    let inv_h2 = 1.0 / (strength * strength);
    let n = h * w;
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut dist = vec![0.0; n];
    let sr = search_radius as isize;
    for dy in -sr..=sr {
        for dx in -sr..=sr {
            if dy == 0 && dx == 0 {
                // Self weight exp(0) = 1.
                den.iter_mut().for_each(|d| *d += 1.0);
                continue;
            }
            for y in 0..h {
                let yq = reflect(y as isize + dy, h);
                for x in 0..w {
                    let xq = reflect(x as isize + dx, w);
                    let d = image[y * w + x] - image[yq * w + xq];
                    diff[y * w + x] = d * d;
                }
            }
            blur_separable(&diff, h, w, &kernel, &mut tmp, &mut dist);
            for y in 0..h {
                let yq = reflect(y as isize + dy, h);
                for x in 0..w {
                    let xq = reflect(x as isize + dx, w);
                    let i = y * w + x;
                    let wt = (-dist[i] * inv_h2).exp();
                    num[i] += wt * (image[yq * w + xq] - image[i]);
                    den[i] += wt;
                }
            }
        }
    }
    // Accumulating differences keeps constant regions exact.
    Ok(image.iter().zip(num.iter().zip(&den)).map(|(v, (a, b))| v + a / b).collect())
}

/// Chambolle dual step size; below the 1/4 bound of the discrete gradient.
pub const TV_STEP: f64 = 0.248;

/// Forward differences with Neumann boundary.
fn gradient(u: &[f64], h: usize, w: usize, gx: &mut [f64], gy: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gx[i] = if x + 1 < w { u[i + 1] - u[i] } else { 0.0 };
            gy[i] = if y + 1 < h { u[i + w] - u[i] } else { 0.0 };
        }
    }
}

/// Negative adjoint of [`gradient`].
fn divergence(px: &[f64], py: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut d = 0.0;
            if x + 1 < w {
                d += px[i];
            }
            if x > 0 {
                d -= px[i - 1];
            }
            if y + 1 < h {
                d += py[i];
            }
            if y > 0 {
                d -= py[i - w];
            }
            out[i] = d;
        }
    }
}

/// Isotropic discrete total variation.
pub fn total_variation(u: &[f64], h: usize, w: usize) -> f64 {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    gradient(u, h, w, &mut gx, &mut gy);
    gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvResult {
    pub image: Vec<f64>,
    pub iterations: usize,
    /// Dual objective ‖div p − f/θ‖² after each iteration.
    pub dual_objective: Vec<f64>,
}

/// Minimizes TV(u) + (λ/2)‖u − f‖² by Chambolle's projection algorithm.
/// Stops after `n_iters` or when the relative change of the dual objective
/// drops below 1e-8.
pub fn tv_denoise_traced(image: &[f64], h: usize, w: usize, lambda: f64, n_iters: usize) -> Result<TvResult> {
    if image.len() != h * w || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch(format!("{} values for {h}x{w}", image.len())));
    }
    if n_iters == 0 {
        return Err(Error::InvalidParameter("TV needs at least one iteration".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("TV lambda must be > 0, got {lambda}")));
    }
    let theta = 1.0 / lambda;
    let n = h * w;
    let f_scaled: Vec<f64> = image.iter().map(|v| v / theta).collect();
    let mut px = vec![0.0; n];
    let mut py = vec![0.0; n];
    let mut div = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let mut history = Vec::new();
    let mut prev = f_scaled.iter().map(|v| v * v).sum::<f64>();
    let mut iterations = 0;
    for _ in 0..n_iters {
        iterations += 1;
        divergence(&px, &py, h, w, &mut div);
        for i in 0..n {
            r[i] = div[i] - f_scaled[i];
        }
        gradient(&r, h, w, &mut gx, &mut gy);
        for i in 0..n {
            let norm = (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
            let d = 1.0 + TV_STEP * norm;
            px[i] = (px[i] + TV_STEP * gx[i]) / d;
            py[i] = (py[i] + TV_STEP * gy[i]) / d;
        }
        divergence(&px, &py, h, w, &mut div);
        let obj: f64 = div.iter().zip(&f_scaled).map(|(d, f)| (d - f) * (d - f)).sum();
        history.push(obj);
        let stalled = (prev - obj).abs() <= 1e-8 * prev.max(f64::MIN_POSITIVE);
        prev = obj;
        if stalled {
            break;
        }
    }
    divergence(&px, &py, h, w, &mut div);
    let out: Vec<f64> = image.iter().zip(&div).map(|(f, d)| f - theta * d).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("TV produced non-finite values".into()));
    }
    Ok(TvResult {
        image: out,
        iterations,
        dual_objective: history,
    })
}

pub fn tv_denoise(image: &[f64], h: usize, w: usize, lambda: f64, n_iters: usize) -> Result<Vec<f64>> {
    Ok(tv_denoise_traced(image, h, w, lambda, n_iters)?.image)
}

/// Noise standard deviation from the median absolute diagonal Haar detail
/// coefficient; robust to edges for piecewise-smooth images.
pub fn estimate_noise_sigma(image: &[f64], h: usize, w: usize) -> f64 {
    let mut d = Vec::with_capacity((h / 2) * (w / 2));
    for y in (0..h.saturating_sub(1)).step_by(2) {
        for x in (0..w.saturating_sub(1)).step_by(2) {
            let i = y * w + x;
            d.push(((image[i] - image[i + 1] - image[i + w] + image[i + w + 1]) / 2.0).abs());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m / 0.674_489_750_196_081_7
}

/// Baseline parameters. Strengths scale with the noise level estimated per
/// band: `h = nlm_h_factor·σ` and `λ = tv_lambda_factor / σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicalParams {
    pub nlm_patch_radius: usize,
    pub nlm_search_radius: usize,
    pub nlm_h_factor: f64,
    pub tv_lambda_factor: f64,
    pub tv_iters: usize,
}

impl Default for ClassicalParams {
    fn default() -> Self {
        // Chosen by the grid search in examples/baseline_grid.rs.
        Self {
            nlm_patch_radius: 2,
            nlm_search_radius: 5,
            nlm_h_factor: 2.0,
            tv_lambda_factor: 1.0,
            tv_iters: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassicalMethod {
    Nlm,
    Tv,
}

/// Floor for the noise estimate so that noise-free bands pass through.
const MIN_SIGMA: f64 = 1e-9;

/// Denoises one band image with noise-adaptive strength.
pub fn denoise_band(image: &[f64], h: usize, w: usize, method: ClassicalMethod, p: &ClassicalParams) -> Result<Vec<f64>> {
    let sigma = estimate_noise_sigma(image, h, w);
    if sigma < MIN_SIGMA {
        return Ok(image.to_vec());
    }
    match method {
        ClassicalMethod::Nlm => nlm_denoise(image, h, w, p.nlm_patch_radius, p.nlm_search_radius, p.nlm_h_factor * sigma),
        ClassicalMethod::Tv => tv_denoise(image, h, w, p.tv_lambda_factor / sigma, p.tv_iters),
    }
}

/// Applies a baseline to every band of a normalized stack, in parallel.
pub fn denoise_stack(stack: &NormalizedStack, method: ClassicalMethod, p: &ClassicalParams) -> Result<NormalizedStack> {
    let (w, r, k) = stack.dims();
    let bands: Vec<Result<Vec<f64>>> = (0..r)
        .into_par_iter()
        .map(|row| denoise_band(&stack.band(row), k, w, method, p))
        .collect();
    let mut out = stack.clone();
    for (row, band) in bands.into_iter().enumerate() {
        out.set_band(row, &band?)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::RowEnergy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn stack_u16() -> SinogramStack {
        let (w, r, k) = (5, 3, 4);
        let flat = vec![100.0, 2000.0, 3.0];
        let data: Vec<u16> = (0..w * r * k).map(|i| (i * 37 % 3000) as u16).collect();
        let meta = StackMeta {
            flat_field: flat,
            row_energies: vec![RowEnergy { min: 1.0, max: 2.0, mean: 1.5 }; 3],
            ..Default::default()
        };
        SinogramStack::new(w, r, k, StackData::U16(data), meta).unwrap()
    }

    fn piecewise(seed: u64, sigma: f64) -> (Vec<f64>, Vec<f64>) {
        let n = 64;
        let clean: Vec<f64> = (0..n * n)
            .map(|i| {
                let (y, x) = (i / n, i % n);
                if (x as isize - 32).pow(2) + (y as isize - 30).pow(2) < 200 {
                    0.8
                } else if x < 20 {
                    0.2
                } else {
                    0.5
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, sigma).unwrap();
        let noisy = clean.iter().map(|v| v + nd.sample(&mut rng)).collect();
        (clean, noisy)
    }

    fn mse(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn normalization_round_trip() {
        let s = stack_u16();
        let n = normalize_per_line(&s).unwrap();
        assert_eq!(n.data[s.index(2, 1, 3)], s.get(2, 1, 3) / 2000.0);
        let back = denormalize(&n).unwrap();
        for i in 0..s.data.len() {
            let (a, b) = (s.data.get(i), back.data.get(i));
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn flat_stack_normalizes_to_one_and_keeps_excursions() {
        let mut s = stack_u16();
        let flat = s.meta.flat_field.clone();
        for row in 0..3 {
            s.set_band(row, &vec![flat[row]; 20]).unwrap();
        }
        let n = normalize_per_line(&s).unwrap();
        assert!(n.data.iter().all(|v| *v == 1.0));
        s.set_band(0, &vec![150.0; 20]).unwrap();
        assert_eq!(normalize_per_line(&s).unwrap().data[0], 1.5);
    }

    #[test]
    fn tiny_flat_field_rejected() {
        let mut s = stack_u16();
        s.meta.flat_field[2] = 1e-7;
        match normalize_per_line(&s) {
            Err(Error::FlatFieldTooSmall { row: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(4, 1), 0);
    }

    #[test]
    fn nlm_constant_and_limit() {
        let c = vec![0.37; 12 * 9];
        assert_eq!(nlm_denoise(&c, 12, 9, 2, 3, 0.1).unwrap(), c);
        let (_, noisy) = piecewise(1, 0.05);
        let out = nlm_denoise(&noisy, 64, 64, 1, 2, 1e-6).unwrap();
        let worst = out.iter().zip(&noisy).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn nlm_improves_psnr() {
        let (clean, noisy) = piecewise(2, 0.05);
        let out = nlm_denoise(&noisy, 64, 64, 2, 5, 2.0 * 0.05).unwrap();
        let gain = 10.0 * (mse(&noisy, &clean) / mse(&out, &clean)).log10();
        assert!(gain >= 3.0, "{gain}");
    }

    #[test]
    fn tv_constant_fixed_point() {
        let c = vec![-2.5; 10 * 7];
        let out = tv_denoise(&c, 10, 7, 3.0, 50).unwrap();
        assert!(out.iter().all(|v| (v + 2.5).abs() < 1e-9));
    }

    #[test]
    fn tv_dual_objective_non_increasing_and_lowers_tv() {
        let (clean, noisy) = piecewise(3, 0.08);
        let r = tv_denoise_traced(&noisy, 64, 64, 1.0 / 0.08, 300).unwrap();
        for pair in r.dual_objective.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "{pair:?}");
        }
        assert!(total_variation(&r.image, 64, 64) < total_variation(&noisy, 64, 64));
        assert!(mse(&r.image, &clean) < mse(&noisy, &clean));
    }

    #[test]
    fn tv_stops_on_stagnation() {
        let (_, noisy) = piecewise(4, 0.01);
        let r = tv_denoise_traced(&noisy, 64, 64, 100.0, 100_000).unwrap();
        assert!(r.iterations < 100_000);
    }

    #[test]
    fn noise_estimate_on_white_noise() {
        let (_, noisy) = piecewise(5, 0.05);
        let s = estimate_noise_sigma(&noisy, 64, 64);
        assert!((s / 0.05 - 1.0).abs() < 0.15, "{s}");
    }

    #[test]
    fn shift_equivariance() {
        let (_, noisy) = piecewise(6, 0.05);
        let shifted: Vec<f64> = noisy.iter().map(|v| v + 3.0).collect();
        let a = nlm_denoise(&noisy, 64, 64, 1, 3, 0.04).unwrap();
        let b = nlm_denoise(&shifted, 64, 64, 1, 3, 0.04).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x + 3.0 - y).abs() < 1e-6));
        let a = tv_denoise(&noisy, 64, 64, 20.0, 40).unwrap();
        let b = tv_denoise(&shifted, 64, 64, 20.0, 40).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x + 3.0 - y).abs() < 1e-6));
    }
}
