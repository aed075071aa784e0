use msct_neural::gradcheck::random_tensor;
use msct_neural::layers::{cbam, octave, Builder};
use msct_neural::params::ParamStore;
use msct_neural::patchcraft::{patch_craft_frames, tiles, PatchCraftConfig};
use msct_neural::tape::{NodeId, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn init<F: Fn(&mut Builder, &[NodeId]) -> NodeId>(inputs: &[Tensor], f: F) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut b = Builder::init(&mut store, &mut rng);
    let ids: Vec<NodeId> = inputs.iter().map(|t| b.tape.input(t.clone())).collect();
    f(&mut b, &ids);
    drop(b);
    store
}

fn run<F: Fn(&mut Builder, &[NodeId]) -> NodeId>(store: &ParamStore, inputs: &[Tensor], f: F) -> Tensor {
    let mut b = Builder::new(store, false, false);
    let ids: Vec<NodeId> = inputs.iter().map(|t| b.tape.input(t.clone())).collect();
    let out = f(&mut b, &ids);
    b.tape.value(out).clone()
}

#[test]
fn cbam_with_zero_weights_quarters_the_input() {
    let x = random_tensor(&[2, 4, 10], 1, 2.0);
    let f = |b: &mut Builder, i: &[NodeId]| cbam(b, "att", i[0], 2).unwrap();
    let mut store = init(std::slice::from_ref(&x), f);
    for i in 0..store.len() {
        store.block_mut(i).value.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let y = run(&store, std::slice::from_ref(&x), f);
    for (a, b) in y.data.iter().zip(&x.data) {
        assert!((a - b / 4.0).abs() < 1e-15);
    }
}

#[test]
fn cbam_is_channel_permutation_equivariant() {
    let c = 4;
    let x = random_tensor(&[1, c, 9], 2, 1.0);
    let f = |b: &mut Builder, i: &[NodeId]| cbam(b, "att", i[0], 2).unwrap();
    let store = init(std::slice::from_ref(&x), f);
    let perm = [2usize, 0, 3, 1];
    let permute_x = |t: &Tensor| {
        let l = t.shape[2];
        let mut d = vec![0.0; t.len()];
        for (new, &old) in perm.iter().enumerate() {
            d[new * l..(new + 1) * l].copy_from_slice(&t.data[old * l..(old + 1) * l]);
        }
        Tensor::new(t.shape.clone(), d).unwrap()
    };
    // The first MLP layer reads channels, the second writes them.
    let mut ps = store.clone();
    let w1 = store.get("att.mlp1.w").unwrap();
    let hidden = w1.shape[0];
    let i1 = ps.find("att.mlp1.w").unwrap();
    for h in 0..hidden {
        for (new, &old) in perm.iter().enumerate() {
            ps.block_mut(i1).value.data[h * c + new] = w1.data[h * c + old];
        }
    }
    let w2 = store.get("att.mlp2.w").unwrap();
    let b2 = store.get("att.mlp2.b").unwrap();
    let (i2, ib) = (ps.find("att.mlp2.w").unwrap(), ps.find("att.mlp2.b").unwrap());
    for (new, &old) in perm.iter().enumerate() {
        for h in 0..hidden {
            ps.block_mut(i2).value.data[new * hidden + h] = w2.data[old * hidden + h];
        }
        ps.block_mut(ib).value.data[new] = b2.data[old];
    }
    let y = run(&store, std::slice::from_ref(&x), f);
    let yp = run(&ps, &[permute_x(&x)], f);
    let expect = permute_x(&y);
    for (a, b) in yp.data.iter().zip(&expect.data) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn octave_without_cross_paths_decouples() {
    let hi = random_tensor(&[1, 3, 8], 3, 1.0);
    let lo = random_tensor(&[1, 2, 4], 4, 1.0);
    let f = |b: &mut Builder, i: &[NodeId]| {
        let (h, l) = octave(b, "oct", i[0], i[1], (3, 2), 3).unwrap();
        let lu = b.tape.upsample2(l, 8).unwrap();
        b.tape.concat(&[h, lu]).unwrap()
    };
    let mut store = init(&[hi.clone(), lo.clone()], f);
    for name in ["oct.hl.w", "oct.lh.w"] {
        let i = store.find(name).unwrap();
        store.block_mut(i).value.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let base = run(&store, &[hi.clone(), lo.clone()], f);
    let lo2 = random_tensor(&[1, 2, 4], 5, 1.0);
    let moved_low = run(&store, &[hi.clone(), lo2], f);
    // High outputs (first 3 channels × 8) ignore the low input.
    assert_eq!(base.data[..24], moved_low.data[..24]);
    assert_ne!(base.data[24..], moved_low.data[24..]);
    let hi2 = random_tensor(&[1, 3, 8], 6, 1.0);
    let moved_high = run(&store, &[hi2, lo], f);
    assert_eq!(base.data[24..], moved_high.data[24..]);
}

/// Exhaustive oracle: every candidate segment, fully sorted.
fn brute_force(sino: &[f64], w: usize, k: usize, t: usize, cfg: &PatchCraftConfig) -> (Vec<f64>, Vec<f64>) {
    let (o, r) = (cfg.n_offsets, cfg.n_neighbors);
    let mut frames = vec![0.0; o * r * w];
    let mut dist = vec![0.0; o * r * w];
    let lo = t.saturating_sub(cfg.search_angles);
    let hi = (t + cfg.search_angles).min(k - 1);
    for j in 0..o {
        for (s, e) in tiles(w, cfg.patch_len, cfg.offset(j)) {
            let len = e - s;
            let mut all = Vec::new();
            for a in lo..=hi {
                for p in 0..=w - len {
                    let d: f64 = (0..len).map(|i| (sino[a * w + p + i] - sino[t * w + s + i]).powi(2)).sum::<f64>() / len as f64;
                    all.push((d, a, p));
                }
            }
            all.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (rank, &(d, a, p)) in all.iter().take(r).enumerate() {
                for i in 0..len {
                    frames[(j * r + rank) * w + s + i] = sino[a * w + p + i];
                    dist[(j * r + rank) * w + s + i] = d;
                }
            }
        }
    }
    (frames, dist)
}

#[test]
fn patch_craft_matches_brute_force_on_toy_sinogram() {
    let (w, k) = (16, 5);
    let cfg = PatchCraftConfig {
        patch_len: 3,
        n_neighbors: 4,
        n_offsets: 3,
        search_angles: 2,
    };
    let noise = random_tensor(&[w * k], 8, 1.0);
    for t in 0..k {
        let f = patch_craft_frames(&noise.data, w, k, t, &cfg).unwrap();
        let (bf, bd) = brute_force(&noise.data, w, k, t, &cfg);
        assert_eq!(f.frames, bf, "target {t}");
        assert_eq!(f.distances, bd, "target {t}");
    }
}

#[test]
fn patch_craft_ties_resolve_to_lowest_angle_then_position() {
    // Quantized values create many exact ties.
    let (w, k) = (16, 5);
    let cfg = PatchCraftConfig {
        patch_len: 3,
        n_neighbors: 5,
        n_offsets: 2,
        search_angles: 2,
    };
    let sino: Vec<f64> = (0..w * k).map(|i| ((i * 7) % 3) as f64).collect();
    let f = patch_craft_frames(&sino, w, k, 2, &cfg).unwrap();
    let (bf, _) = brute_force(&sino, w, k, 2, &cfg);
    assert_eq!(f.frames, bf);
    assert_eq!(f, patch_craft_frames(&sino, w, k, 2, &cfg).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weights_round_trip_exactly(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..5),
        seed in 0u64..10_000,
    ) {
        let mut store = ParamStore::new();
        for (i, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), random_tensor(&[n], seed + i as u64, 3.0).data).unwrap();
            store.insert(&format!("block{i}"), t, i % 2 == 0);
        }
        let bytes = store.encode();
        let back = ParamStore::decode(&bytes).unwrap();
        prop_assert_eq!(back.fingerprint(), store.fingerprint());
        prop_assert!(back.encode() == bytes);
        let mut cut = bytes.clone();
        cut.pop();
        prop_assert!(ParamStore::decode(&cut).is_err());
    }

    /// Per-row positive scaling preserves which of two candidates is closer to GT.
    #[test]
    fn mse_ranking_survives_row_scaling(seed in 0u64..10_000, scale in 1e-3f64..1e3) {
        let gt = random_tensor(&[32], seed, 1.0).data;
        let a = random_tensor(&[32], seed + 1, 0.1).data;
        let b = random_tensor(&[32], seed + 2, 0.2).data;
        let mse = |x: &[f64], s: f64| -> f64 {
            x.iter().zip(&gt).map(|(x, g)| (s * (g + x) - s * g).powi(2)).sum::<f64>() / 32.0
        };
        prop_assert_eq!(mse(&a, 1.0) < mse(&b, 1.0), mse(&a, scale) < mse(&b, scale));
    }
}
