use msct_core::classical::{denoise_stack, normalize_per_line, ClassicalMethod, ClassicalParams};
use msct_core::detector::{simulate_dataset, simulate_slice, AcquisitionSpec, DetectorConfig, SimulationSetup};
use msct_core::materials::{bundled, MaterialTable};
use msct_core::metrics::{psnr, Psnr};
use msct_core::optics::{calibrated, GeometryPreset};
use msct_core::phantom::{generate_insert_phantom, generate_procedural_phantom, longitudinal_projection};
use msct_core::recon::{average_stacks, reconstruct_band, sinogram_from_stack, RampFilter};
use std::time::Instant;

const VOXEL: f64 = 1.5e-5;

fn desk_setup(n_rows: usize) -> (SimulationSetup, MaterialTable, MaterialTable) {
    let mut geom = GeometryPreset::Bm18Sim.geometry();
    geom.n_rows = n_rows;
    let geom = calibrated(geom).unwrap();
    let spectrum = bundled::spectrum(bundled::default_grid()).unwrap();
    let (al, sio2) = (bundled::aluminium(), bundled::silica());
    let setup = SimulationSetup::new(
        &spectrum,
        &geom,
        &DetectorConfig::default(),
        &bundled::silicon(),
        &bundled::luag(),
        &al,
        &sio2,
    )
    .unwrap();
    (setup, al, sio2)
}

#[test]
fn desk_dataset_shapes_and_flat_regions() {
    let (setup, _, _) = desk_setup(64);
    let phantom = generate_procedural_phantom(11, [32, 32, 4], VOXEL).unwrap();
    let acq = AcquisitionSpec { width: 48, pixel_pitch: VOXEL, n_angles: 24 };
    let t = Instant::now();
    let data = simulate_dataset(&setup, std::slice::from_ref(&phantom), 2, &acq, 5).unwrap();
    eprintln!("desk dataset: {:?}", t.elapsed());
    assert_eq!(data.len(), 2);
    let cfg = setup.config();
    for s in &data {
        assert_eq!(s.gt.dims(), (48, 64, 24));
        assert_eq!(s.noisy.len(), 1);
        let noisy = &s.noisy[0];
        for a in [0, 11] {
            let proj = longitudinal_projection(&phantom, s.slice, a as f64 * std::f64::consts::PI / 24.0, 48, VOXEL).unwrap();
            let free: Vec<usize> = (0..48).filter(|&p| proj.l1[p] == 0.0 && proj.l2[p] == 0.0).collect();
            assert!(!free.is_empty());
            for row in [10, 32, 50] {
                let flat = setup.flat_field()[row];
                for &p in &free {
                    assert_eq!(s.gt.get(p, row, a), flat as f32 as f64);
                }
                let offset = cfg.dark_current / cfg.electrons_per_dn;
                let mean = free.iter().map(|&p| noisy.get(p, row, a)).sum::<f64>() / free.len() as f64 - offset;
                let sd = (flat * 4.0).sqrt() / (free.len() as f64).sqrt();
                assert!((mean - flat).abs() < 6.0 * sd + 1.0, "row {row}: {mean} vs {flat}");
            }
        }
    }
}

#[test]
fn reconstructed_disk_recovers_attenuation() {
    let (setup, al, _) = desk_setup(64);
    let phantom = generate_insert_phantom([48, 48, 1], VOXEL, 18.0, &[]).unwrap();
    let acq = AcquisitionSpec { width: 64, pixel_pitch: VOXEL, n_angles: 90 };
    let s = simulate_slice(&setup, &phantom, 0, 0, &acq, 1, 0).unwrap();
    let row = 50;
    let img = reconstruct_band(&s.gt, row, VOXEL, RampFilter::RamLak).unwrap();
    let e = setup.row_energies()[row];
    let (mu_lo, mu_hi) = (al.linear_attenuation(e.max).unwrap(), al.linear_attenuation(e.min).unwrap());
    let c = img.side as f64 / 2.0;
    let mut interior = Vec::new();
    for j in 0..img.side {
        for i in 0..img.side {
            let r = ((i as f64 + 0.5 - c).powi(2) + (j as f64 + 0.5 - c).powi(2)).sqrt();
            if r < 12.0 {
                interior.push(img.get(i, j));
            }
        }
    }
    let mean = interior.iter().sum::<f64>() / interior.len() as f64;
    assert!(mean > 0.97 * mu_lo && mean < 1.03 * mu_hi, "{mean} outside [{mu_lo}, {mu_hi}]");
}

#[test]
fn averaging_reduces_variance_as_one_over_n() {
    let (setup, _, _) = desk_setup(16);
    let phantom = generate_insert_phantom([24, 24, 1], VOXEL, 9.0, &[([0.0, 0.0], 4.0)]).unwrap();
    let acq = AcquisitionSpec { width: 32, pixel_pitch: VOXEL, n_angles: 8 };
    let s = simulate_slice(&setup, &phantom, 0, 0, &acq, 3, 16).unwrap();
    let cfg = setup.config();
    let offset = cfg.dark_current / cfg.electrons_per_dn;
    let err_var = |stack: &msct_core::stack::SinogramStack| {
        let n = stack.data.len();
        let d: Vec<f64> = (0..n).map(|i| stack.data.get(i) - offset - s.gt.data.get(i)).collect();
        let m = d.iter().sum::<f64>() / n as f64;
        d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64
    };
    let single = s.noisy.iter().map(err_var).sum::<f64>() / 16.0;
    let avg = average_stacks(&s.noisy).unwrap();
    let ratio = single / err_var(&avg);
    assert!((ratio / 16.0 - 1.0).abs() < 0.2, "variance ratio {ratio}");
}

#[test]
fn projection_averaging_is_consistent_with_log_domain() {
    let (setup, _, _) = desk_setup(16);
    let phantom = generate_insert_phantom([24, 24, 1], VOXEL, 9.0, &[]).unwrap();
    let acq = AcquisitionSpec { width: 32, pixel_pitch: VOXEL, n_angles: 8 };
    let s = simulate_slice(&setup, &phantom, 0, 0, &acq, 9, 4).unwrap();
    let avg = average_stacks(&s.noisy).unwrap();
    let a = sinogram_from_stack(&avg, 8, true).unwrap();
    let g = sinogram_from_stack(&s.gt, 8, true).unwrap();
    let dc = |v: &[f64]| v.iter().sum::<f64>();
    let (da, dg) = (dc(&a.data), dc(&g.data));
    assert!((da - dg).abs() <= 0.02 * dg.abs(), "{da} vs {dg}");
}

#[test]
fn classical_baselines_improve_noisy_projections() {
    let (setup, _, _) = desk_setup(16);
    let phantom = generate_procedural_phantom(4, [32, 32, 2], VOXEL).unwrap();
    let acq = AcquisitionSpec { width: 48, pixel_pitch: VOXEL, n_angles: 48 };
    let s = simulate_slice(&setup, &phantom, 0, 0, &acq, 2, 1).unwrap();
    let noisy = normalize_per_line(&s.noisy[0]).unwrap();
    let gt = normalize_per_line(&s.gt).unwrap();
    let params = ClassicalParams::default();
    for method in [ClassicalMethod::Nlm, ClassicalMethod::Tv] {
        let den = denoise_stack(&noisy, method, &params).unwrap();
        let mut gain = 0.0;
        for row in 4..12 {
            let r = gt.band(row);
            let before = psnr(&noisy.band(row), &r, 1.0).unwrap();
            let after = psnr(&den.band(row), &r, 1.0).unwrap();
            if let (Psnr::Db(b), Psnr::Db(a)) = (before, after) {
                gain += (a - b) / 8.0;
            }
        }
        assert!(gain > 1.0, "{method:?} gain {gain} dB");
    }
}
