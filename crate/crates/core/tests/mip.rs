use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcnet_autodiff::{grad_check, Graph, Tensor};
use vcnet_core::mip::*;
use vcnet_core::{VesselMask, Volume3D};

/// Windows by direct enumeration: start at 0, step t, keep while in range.
fn brute_windows(k3: usize, s: usize, t: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + s <= k3 {
        out.push((start, start + s));
        start += t;
    }
    out
}

/// Slice selected at `(x, y)` by window `[a, b)`, lowest index on ties.
fn brute_argmax(vol: &Volume3D, x: usize, y: usize, a: usize, b: usize) -> usize {
    let mut best = a;
    for z in a + 1..b {
        if vol.get(x, y, z) > vol.get(x, y, best) {
            best = z;
        }
    }
    best
}

fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume3D::from_fn(dims, |_, _, _| rng.random::<f32>())
}

#[test]
fn window_count_matches_enumeration() {
    assert_eq!(mip_count(16, 5, 2).unwrap(), 6);
    assert_eq!(mip_count(5, 5, 2).unwrap(), 1);
    assert_eq!(mip_count(96, 5, 2).unwrap(), 46);
    for k3 in 1..=32 {
        for s in 1..=k3 {
            for t in 1..=4 {
                let brute = brute_windows(k3, s, t);
                assert_eq!(mip_count(k3, s, t).unwrap(), brute.len(), "({k3},{s},{t})");
                let w: Vec<(usize, usize)> =
                    windows(k3, s, t).unwrap().iter().map(|w| (w.start, w.start + w.len)).collect();
                assert_eq!(w, brute);
            }
        }
    }
    assert!(mip_count(4, 5, 2).is_err());
    assert!(mip_count(16, 0, 2).is_err());
    assert!(mip_count(16, 5, 0).is_err());
}

#[test]
fn zero_patch_records_window_starts() {
    let st = compute_mip_stack(&Volume3D::zeros([4, 3, 16]), 5, 2, MipKind::Max).unwrap();
    assert_eq!(st.m(), 6);
    for (k, w) in st.windows.iter().enumerate() {
        assert!(st.images[k].iter().all(|&v| v == 0.0));
        assert!(st.index_maps[k].iter().all(|&z| z == w.start));
    }
}

#[test]
fn hot_voxel_at_slice_eight_hits_windows_two_to_four() {
    let mut v = Volume3D::zeros([3, 3, 16]);
    v.set(1, 2, 8, 5.0);
    let st = compute_mip_stack(&v, 5, 2, MipKind::Max).unwrap();
    let hit: Vec<usize> = (0..st.m()).filter(|&k| st.images[k][1 * 3 + 2] == 5.0).collect();
    assert_eq!(hit, vec![2, 3, 4]);
    for &k in &hit {
        assert_eq!(st.index_maps[k][1 * 3 + 2], 8);
    }
    let up = Unproject::from_stack(&st).unwrap();
    assert_eq!(up.contributors(1, 2, 8), vec![2, 3, 4]);
}

#[test]
fn min_projection_uses_minimum() {
    let v = Volume3D::from_fn([2, 2, 5], |x, y, z| ((z as f32) - 2.0).abs() + (x + y) as f32);
    let st = compute_mip_stack(&v, 5, 1, MipKind::Min).unwrap();
    assert_eq!(st.index_maps[0], vec![2; 4]);
    assert_eq!(st.images[0], vec![0.0, 1.0, 1.0, 2.0]);
}

#[test]
fn last_slice_is_uncovered_for_16_slices() {
    let ws = windows(16, 5, 2).unwrap();
    for z in 0..15 {
        assert!(ws.iter().any(|w| w.contains(z)), "slice {z}");
    }
    assert!(!ws.iter().any(|w| w.contains(15)));
    let v = random_volume([4, 4, 16], 3);
    let st = compute_mip_stack(&v, 5, 2, MipKind::Max).unwrap();
    let up = Unproject::from_stack(&st).unwrap();
    let feats = Tensor::<f64>::from_vec(&[6, 4, 4, 3], (0..288).map(|i| 1.0 + i as f64).collect()).unwrap();
    let out = up.apply(&feats).unwrap();
    let row = 4 * 4 * 3;
    assert!(out.data()[15 * row..].iter().all(|&v| v == 0.0));
}

#[test]
fn unprojection_round_trip_against_brute_force() {
    for seed in 0..200 {
        let v = random_volume([8, 8, 16], seed);
        let st = compute_mip_stack(&v, 5, 2, MipKind::Max).unwrap();
        let up = Unproject::from_stack(&st).unwrap();
        let out = up.apply(&st.image_tensor::<f32>()).unwrap();
        let ws = brute_windows(16, 5, 2);
        for z in 0..16 {
            for x in 0..8 {
                for y in 0..8 {
                    let selected = ws.iter().any(|&(a, b)| brute_argmax(&v, x, y, a, b) == z);
                    let want = if selected { v.get(x, y, z) } else { 0.0 };
                    assert_eq!(out.data()[(z * 8 + x) * 8 + y], want, "seed {seed} voxel ({x},{y},{z})");
                }
            }
        }
    }
}

#[test]
fn sole_negative_contributor_is_kept() {
    let maps = vec![vec![1usize; 4]];
    let up = Unproject::new(maps, 2, 2, 3).unwrap();
    let f = Tensor::<f64>::from_vec(&[1, 2, 2, 1], vec![-1.0, -2.0, 3.0, -4.0]).unwrap();
    let out = up.apply(&f).unwrap();
    assert_eq!(&out.data()[4..8], &[-1.0, -2.0, 3.0, -4.0]);
    assert!(out.data()[..4].iter().chain(&out.data()[8..]).all(|&v| v == 0.0));
    assert!(Unproject::new(vec![vec![3usize; 4]], 2, 2, 3).is_err());
}

#[test]
fn tiling_layout_and_padding() {
    let l = TileLayout::new(5, 3, 4);
    assert_eq!((l.rows(), l.cols(), l.tile_count()), (9, 8, 6));
    assert!(l.is_padding(5) && !l.is_padding(4));
    assert_eq!(l.origin(3), (3, 4));
    let valid = l.valid_mask::<f64>();
    assert_eq!(valid.sum_f64(), (5 * 12) as f64);
    let stack = Tensor::<f64>::from_vec(&[5, 3, 4, 2], (0..120).map(|i| i as f64).collect()).unwrap();
    let plane = l.compose(&stack).unwrap();
    assert_eq!(plane.shape(), &[9, 8, 2]);
    // Tile 3, pixel (1, 2), channel 1 sits at plane (3 + 1, 4 + 2).
    assert_eq!(plane.data()[(4 * 8 + 6) * 2 + 1], stack.data()[((3 * 3 + 1) * 4 + 2) * 2 + 1]);
    assert_eq!(l.decompose(&plane).unwrap(), stack);
    assert!(l.compose(&Tensor::<f64>::zeros(&[4, 3, 4, 2])).is_err());
}

#[test]
fn ground_truth_projection_rules() {
    let dims = [3, 3, 16];
    let v = random_volume(dims, 9);
    let st = compute_mip_stack(&v, 5, 2, MipKind::Max).unwrap();
    let empty = mip_ground_truth(&VesselMask::empty(dims), &st, MipLabelRule::Union).unwrap();
    assert!(empty.iter().flatten().all(|&l| l == 0));
    let full = mip_ground_truth(&VesselMask::full(dims), &st, MipLabelRule::Union).unwrap();
    assert!(full.iter().flatten().all(|&l| l == 1));
    let one = VesselMask::from_fn(dims, |x, y, z| (x, y, z) == (0, 1, 8));
    let labels = mip_ground_truth(&one, &st, MipLabelRule::Union).unwrap();
    let lit: Vec<usize> = (0..6).filter(|&k| labels[k][1] == 1).collect();
    assert_eq!(lit, vec![2, 3, 4]);
    assert_eq!(labels.iter().flatten().filter(|&&l| l == 1).count(), 3);
    let tiled = tiled_labels::<f32>(&labels, st.layout()).unwrap();
    assert_eq!(tiled.sum_f64(), 3.0);
}

#[test]
fn compose_decompose_unproject_gradient() {
    let layout = TileLayout::new(3, 3, 4);
    let vol = random_volume([3, 4, 9], 17);
    let st = compute_mip_stack(&vol, 5, 2, MipKind::Max).unwrap();
    assert_eq!(st.m(), 3);
    let up = Unproject::from_stack(&st).unwrap();
    // Distinct values so every max is tie-free.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut vals: Vec<f64> = (0..3 * 3 * 4 * 2).map(|i| i as f64 * 0.37 + rng.random::<f64>() * 0.1).collect();
    vals.reverse();
    let stack = Tensor::from_vec(&[3, 3, 4, 2], vals).unwrap();
    let target = Tensor::from_vec(&[9, 3, 4, 2], (0..216).map(|i| ((i * 7919) % 3 == 0) as u8 as f64).collect()).unwrap();
    let report = grad_check(
        |g: &mut Graph<f64>, v| {
            let plane = g.apply(ComposeTiled(layout), &[v[0]])?;
            let back = g.apply(DecomposeTiled(layout), &[plane])?;
            let vol = g.apply(up.clone(), &[back])?;
            g.dice_loss(vol, target.clone(), None, 1e-5)
        },
        &[stack],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn images_match_source_at_recorded_index(seed in any::<u64>(), k1 in 1usize..5, k2 in 1usize..5, k3 in 5usize..20, s in 1usize..6, t in 1usize..4, min in any::<bool>()) {
        prop_assume!(s <= k3);
        let v = random_volume([k1, k2, k3], seed);
        let kind = if min { MipKind::Min } else { MipKind::Max };
        let st = compute_mip_stack(&v, s, t, kind).unwrap();
        for (k, w) in st.windows.iter().enumerate() {
            for x in 0..k1 {
                for y in 0..k2 {
                    let z = st.index_maps[k][x * k2 + y];
                    prop_assert!(w.contains(z));
                    prop_assert_eq!(st.images[k][x * k2 + y], v.get(x, y, z));
                    let ext = (w.start..w.start + w.len).map(|z| v.get(x, y, z));
                    let want = if min { ext.fold(f32::INFINITY, f32::min) } else { ext.fold(f32::NEG_INFINITY, f32::max) };
                    prop_assert_eq!(st.images[k][x * k2 + y], want);
                }
            }
        }
    }

    #[test]
    fn tiling_round_trips(m in 1usize..8, k1 in 1usize..5, k2 in 1usize..5, c in 1usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = TileLayout::new(m, k1, k2);
        let stack = Tensor::<f64>::from_vec(&[m, k1, k2, c], (0..m * k1 * k2 * c).map(|_| rng.random_range(-99..100) as f64).collect()).unwrap();
        let plane = l.compose(&stack).unwrap();
        prop_assert_eq!(plane.shape(), &[l.rows(), l.cols(), c][..]);
        prop_assert_eq!(plane.sum_f64(), stack.sum_f64());
        prop_assert_eq!(l.decompose(&plane).unwrap(), stack);
    }

    #[test]
    fn single_map_scatter_conserves_sum(k1 in 1usize..6, k2 in 1usize..6, k3 in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map: Vec<usize> = (0..k1 * k2).map(|_| rng.random_range(0..k3)).collect();
        let up = Unproject::new(vec![map], k1, k2, k3).unwrap();
        let f = Tensor::<f64>::from_vec(&[1, k1, k2, 2], (0..k1 * k2 * 2).map(|_| rng.random_range(-99..100) as f64).collect()).unwrap();
        let out = up.apply(&f).unwrap();
        prop_assert_eq!(out.sum_f64(), f.sum_f64());
    }

    #[test]
    fn fusion_is_contributor_max_and_monotone(seed in any::<u64>(), m in 1usize..5, k3 in 1usize..6) {
        let (k1, k2, c) = (3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<Vec<usize>> = (0..m).map(|_| (0..k1 * k2).map(|_| rng.random_range(0..k3)).collect()).collect();
        let feats: Vec<f64> = (0..m * k1 * k2 * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let f = Tensor::from_vec(&[m, k1, k2, c], feats.clone()).unwrap();
        let up = Unproject::new(maps.clone(), k1, k2, k3).unwrap();
        let out = up.apply(&f).unwrap();
        for z in 0..k3 {
            for x in 0..k1 {
                for y in 0..k2 {
                    let p = x * k2 + y;
                    let contrib: Vec<usize> = (0..m).filter(|&k| maps[k][p] == z).collect();
                    prop_assert_eq!(&up.contributors(x, y, z), &contrib);
                    for ch in 0..c {
                        let want = contrib.iter().map(|&k| feats[(k * k1 * k2 + p) * c + ch]).fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))));
                        prop_assert_eq!(out.data()[((z * k1 + x) * k2 + y) * c + ch], want.unwrap_or(0.0));
                    }
                }
            }
        }
        // One more map only adds contributors: no contributed channel drops.
        let mut more = maps.clone();
        more.push((0..k1 * k2).map(|_| rng.random_range(0..k3)).collect());
        let mut feats2 = feats.clone();
        feats2.extend((0..k1 * k2 * c).map(|_| rng.random::<f64>() * 2.0 - 1.0));
        let out2 = Unproject::new(more, k1, k2, k3).unwrap().apply(&Tensor::from_vec(&[m + 1, k1, k2, c], feats2).unwrap()).unwrap();
        for z in 0..k3 {
            for x in 0..k1 {
                for y in 0..k2 {
                    if !up.contributors(x, y, z).is_empty() {
                        for ch in 0..c {
                            let i = ((z * k1 + x) * k2 + y) * c + ch;
                            prop_assert!(out2.data()[i] >= out.data()[i]);
                        }
                    }
                }
            }
        }
    }
}
