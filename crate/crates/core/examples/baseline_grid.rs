//! Grid search over the strength factors of the classical baselines on a
//! desk-sized procedural slice. Prints the mean PSNR over rows 1 to 50 for
//! each setting.
//!
//! `cargo run --release -p msct-core --example baseline_grid`

use msct_core::classical::{denoise_stack, normalize_per_line, ClassicalMethod, ClassicalParams, NormalizedStack};
use msct_core::detector::{simulate_slice, AcquisitionSpec, DetectorConfig, SimulationSetup};
use msct_core::materials::bundled;
use msct_core::metrics::{evaluate_method, MetricSelection};
use msct_core::optics::{calibrated, GeometryPreset};
use msct_core::phantom::generate_procedural_phantom;

fn main() -> msct_core::Result<()> {
    let mut geom = GeometryPreset::Bm18Sim.geometry();
    geom.n_rows = 64;
    let setup = SimulationSetup::new(
        &bundled::spectrum(bundled::default_grid())?,
        &calibrated(geom)?,
        &DetectorConfig::default(),
        &bundled::silicon(),
        &bundled::luag(),
        &bundled::aluminium(),
        &bundled::silica(),
    )?;
    let voxel = 1.5e-5;
    let phantom = generate_procedural_phantom(1, [160, 160, 4], voxel)?;
    let acq = AcquisitionSpec {
        width: 192,
        pixel_pitch: voxel,
        n_angles: 90,
    };
    let s = simulate_slice(&setup, &phantom, 0, 2, &acq, 5, 1)?;
    let gt = normalize_per_line(&s.gt)?;
    let noisy = normalize_per_line(&s.noisy[0])?;
    let rows: Vec<usize> = (1..=50).collect();
    let selection = MetricSelection {
        ssim: false,
        ms_ssim: false,
        nrmse: false,
        ..Default::default()
    };
    let score = |stack: &NormalizedStack| -> msct_core::Result<f64> {
        let r = evaluate_method("", &gt, stack, &rows, &selection)?;
        Ok(r.mean_psnr().and_then(|p| p.db()).unwrap_or(f64::INFINITY))
    };
    println!("noisy {:.2} dB", score(&noisy)?);
    for h in [1.0, 1.5, 2.0, 3.0] {
        let p = ClassicalParams {
            nlm_h_factor: h,
            ..Default::default()
        };
        println!("nlm h_factor {h}: {:.2} dB", score(&denoise_stack(&noisy, ClassicalMethod::Nlm, &p)?)?);
    }
    for lambda in [0.5, 1.0, 2.0, 4.0] {
        let p = ClassicalParams {
            tv_lambda_factor: lambda,
            ..Default::default()
        };
        println!("tv lambda_factor {lambda}: {:.2} dB", score(&denoise_stack(&noisy, ClassicalMethod::Tv, &p)?)?);
    }
    Ok(())
}
