use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msct_cli::manifest::{sha256_file, Manifest};
use msct_core::recon::reconstruct_band;
use msct_core::stack::{read_raw, read_stack};

/// A configuration small enough to run every command in seconds.
fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"output_dir = "{out}"
seed = 3

[geometry]
n_rows = 12

[phantom]
dims = [24, 24, 8]
voxel_size = 1e-4

[dataset]
width = 32
n_angles = 12
realizations = 2
train_min_flat_dn = 0.0

[train]
k_adjacent_bands = 4
n_denoise_blocks = 1
n_octave_blocks = 1
batch_size = 8
max_epochs = 2
samples_per_epoch = 32
val_samples = 16

[arch]
hsinet_channels = 8
extractor_channels = 2
cbam_reduction = 4
videonet_channels = 2
tail_channels = 2
n_tail_convs = 2
dncnn_channels = 4
dncnn_hidden = 1

[metrics]
rows = [1, 10]
{extra}
"#,
        out = dir.join("out").display()
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn msct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msct")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = msct(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn every_command_runs_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("out");

    ok(&["simulate", "--config", c]);
    let gt = read_stack(out.join("data/gt_s0.stk")).unwrap();
    assert_eq!(gt.dims(), (32, 12, 12));
    assert!(out.join("data/noisy_s3_r1.stk").exists());

    for model in ["hsinet", "videonet", "combiner", "dncnn"] {
        let log = ok(&["--threads", "1", "train", "--config", c, "--model", model]);
        assert!(log.starts_with("epoch,train_mse,val_mse\n0,"), "{log}");
    }
    for method in ["nlm", "tv", "hsinet", "videonet", "combined", "dncnn"] {
        ok(&["denoise", "--config", c, "--method", method]);
        let d = read_stack(out.join(format!("denoised/{method}_s3.stk"))).unwrap();
        assert_eq!(d.dims(), gt.dims());
    }
    let table = ok(&["evaluate", "--config", c, "--candidates", "noisy,gt,tv,combined"]);
    assert!(table.contains("combined"), "{table}");
    let csv = fs::read_to_string(out.join("reports/metrics_s3.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("gt,1,saturated")), "{csv}");

    ok(&["reconstruct", "--config", c, "--input", out.join("data/gt_s3.stk").to_str().unwrap(), "--bands", "2", "3"]);
    assert!(out.join("recon/gt_s3_b003.raw").exists());
    ok(&["average-reference", "--config", c, "--slice", "3", "--n", "2", "--bands", "5", "5"]);
    assert!(out.join("reference/s3_n2.stk").exists());

    let m = Manifest::load(&out).unwrap();
    for (rel, entry) in &m.outputs {
        assert_eq!(sha256_file(&out.join(rel)).unwrap(), entry.sha256, "{rel}");
        assert_eq!(entry.tool_version, env!("CARGO_PKG_VERSION"));
    }
    let combined = &m.outputs["denoised/combined_s3.stk"];
    for input in ["models/combiner.wts", "models/hsinet.wts", "models/videonet.wts", "data/noisy_s3_r0.stk"] {
        assert!(combined.inputs.contains_key(input), "{input}");
    }
    assert!(m.outputs.contains_key("data/gt_s0.meta"));
}

#[test]
fn combiner_needs_frozen_subnets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    ok(&["simulate", "--config", c]);
    let o = msct(&["train", "--config", c, "--model", "combiner"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing frozen weights"));
    let o = msct(&["denoise", "--config", c, "--method", "combined"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "[recon]\nfilter = \"ram-lak\"\nbogus = 1");
    let o = msct(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    let cfg = tiny_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    ok(&["simulate", "--config", c]);
    let gt = dir.path().join("out/data/gt_s0.stk");
    let o = msct(&["reconstruct", "--config", c, "--input", gt.to_str().unwrap(), "--bands", "3", "12"]);
    assert_eq!(o.status.code(), Some(2));
    let o = msct(&["denoise", "--config", c, "--method", "bm3d"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_is_bit_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = tiny_config(d.path(), "");
        ok(&["simulate", "--config", cfg.to_str().unwrap()]);
    }
    for f in ["data/gt_s2.stk", "data/noisy_s2_r0.stk", "data/noisy_s2_r1.stk"] {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn empty_phantom_gives_flat_field_gt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("[phantom]\n", "[phantom]\nkind = \"empty\"\n");
    fs::write(&cfg, text).unwrap();
    ok(&["simulate", "--config", cfg.to_str().unwrap()]);
    let gt = read_stack(dir.path().join("out/data/gt_s1.stk")).unwrap();
    let (w, r, k) = gt.dims();
    for a in 0..k {
        for row in 0..r {
            for x in 0..w {
                let f = gt.meta.flat_field[row];
                assert!((gt.get(x, row, a) - f).abs() <= 1e-6 * f, "({x}, {row}, {a})");
            }
        }
    }
}

#[test]
fn single_realization_reference_is_the_single_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    ok(&["simulate", "--config", c]);
    ok(&["average-reference", "--config", c, "--slice", "1", "--n", "1", "--bands", "4", "4"]);
    let noisy = read_stack(dir.path().join("out/data/noisy_s1_r0.stk")).unwrap();
    let single = reconstruct_band(&noisy, 4, 1e-4, Default::default()).unwrap();
    let avg = read_raw(dir.path().join("out/reference/s1_n1_b004.raw")).unwrap();
    let expect: Vec<f64> = single.values.iter().map(|v| *v as f32 as f64).collect();
    assert_eq!(avg.data.to_f64(), expect);
}
