//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. The phantom-training criterion trains the
//! desk-scale network and takes several minutes on one core.
//! `VCNET_ACCEPTANCE_SKIP=a,b` leaves named criteria out (reported as SKIP).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcnet_autodiff::{grad_check, grad_check_sampled, CustomOp, Graph, Result as AdResult, Tensor, Var};
use vcnet_core::baselines::{frangi_vesselness, nls_subtract, r2star_fit_voxel, VesselnessParams};
use vcnet_core::checkpoint::save_checkpoint;
use vcnet_core::metrics::{confusion, evaluate_case, MaskSource};
use vcnet_core::mip::*;
use vcnet_core::model::*;
use vcnet_core::phantom::{generate_suite, PhantomSpec};
use vcnet_core::train::{fine_tune, train, TrainConfig, TrainLog};
use vcnet_core::volume::{extract_patch, invert_foreground, normalize_minmax, voxel_coords};
use vcnet_core::{PatchSpec, VesselMask, Volume3D};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Suite {
    failures: usize,
    skip: Vec<String>,
}

impl Suite {
    fn run(&mut self, name: &str, limit_secs: f64, f: impl FnOnce() -> Outcome) {
        if self.skip.iter().any(|s| s == name) {
            println!("SKIP {name}");
            return;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(d) if secs <= limit_secs => (true, d),
            Ok(d) => (false, format!("{d}; over the {limit_secs} s budget")),
            Err(d) => (false, d),
        };
        if !pass {
            self.failures += 1;
        }
        println!("{} {name:<24} {detail} [{secs:.1} s]", if pass { "PASS" } else { "FAIL" });
    }
}

fn brute_windows(k3: usize, s: usize, t: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut a = 0;
    while a + s <= k3 {
        out.push((a, a + s));
        a += t;
    }
    out
}

fn window_count() -> Outcome {
    let m = mip_count(16, 5, 2).map_err(|e| e.to_string())?;
    if m != 6 {
        return Err(format!("mip_count(16,5,2) = {m}"));
    }
    let mut cases = 0;
    for k3 in 1..=32 {
        for s in 1..=k3 {
            for t in 1..=4 {
                let brute = brute_windows(k3, s, t);
                let got: Vec<(usize, usize)> =
                    windows(k3, s, t).map_err(|e| e.to_string())?.iter().map(|w| (w.start, w.start + w.len)).collect();
                if got != brute || mip_count(k3, s, t).ok() != Some(brute.len()) {
                    return Err(format!("disagreement at ({k3},{s},{t})"));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("mip_count(16,5,2)=6, {cases} geometries match enumeration"))
}

fn unprojection_round_trip() -> Outcome {
    let ws = brute_windows(16, 5, 2);
    let mut checked = 0usize;
    for seed in 0..200 {
        let v = random_volume([8, 8, 16], 1000 + seed);
        let st = compute_mip_stack(&v, 5, 2, MipKind::Max).map_err(|e| e.to_string())?;
        let up = Unproject::from_stack(&st).map_err(|e| e.to_string())?;
        let out = up.apply(&st.image_tensor::<f32>()).map_err(|e| e.to_string())?;
        for z in 0..16 {
            for x in 0..8 {
                for y in 0..8 {
                    let selected = ws.iter().any(|&(a, b)| {
                        let best = (a..b).fold(a, |best, k| if v.get(x, y, k) > v.get(x, y, best) { k } else { best });
                        best == z
                    });
                    let want = if selected { v.get(x, y, z) } else { 0.0 };
                    let got = out.data()[(z * 8 + x) * 8 + y];
                    if got != want {
                        return Err(format!("patch {seed} voxel ({x},{y},{z}): {got} vs {want}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("200 patches, {checked} voxels exact"))
}

fn slice_nine_contributors() -> Outcome {
    let mut v = Volume3D::zeros([3, 3, 16]);
    // 1-based slice 9 is index 8.
    v.set(1, 1, 8, 1.0);
    let st = compute_mip_stack(&v, 5, 2, MipKind::Max).map_err(|e| e.to_string())?;
    let up = Unproject::from_stack(&st).map_err(|e| e.to_string())?;
    let named: Vec<String> = up.contributors(1, 1, 8).iter().map(|k| format!("P{}", k + 1)).collect();
    ensure(named == ["P3", "P4", "P5"], format!("contributors {{{}}}", named.join(",")))
}

struct Mul;

impl CustomOp<f64> for Mul {
    fn name(&self) -> &str {
        "mul"
    }
    fn forward(&self, inputs: &[&Tensor<f64>]) -> AdResult<Tensor<f64>> {
        let d = inputs[0].data().iter().zip(inputs[1].data()).map(|(a, b)| a * b).collect();
        Tensor::from_vec(inputs[0].shape(), d)
    }
    fn backward(&self, inputs: &[&Tensor<f64>], _out: &Tensor<f64>, grad: &Tensor<f64>) -> Vec<Option<Tensor<f64>>> {
        let ga = inputs[1].data().iter().zip(grad.data()).map(|(b, g)| b * g).collect();
        let gb = inputs[0].data().iter().zip(grad.data()).map(|(a, g)| a * g).collect();
        vec![Some(Tensor::from_vec(inputs[0].shape(), ga).unwrap()), Some(Tensor::from_vec(inputs[1].shape(), gb).unwrap())]
    }
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Distinct, shuffled and bounded away from zero: no max ties, no ReLU kinks.
fn distinct(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 - 0.5).collect();
    for v in vals.iter_mut() {
        *v += v.signum() * 0.05;
    }
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(shape, vals).unwrap()
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> AdResult<Var> {
    let w = g.constant(uniform(g.shape(y), seed));
    let p = g.apply(Mul, &[y, w])?;
    Ok(g.sum(p))
}

fn differentiation() -> Outcome {
    type Check = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> AdResult<Var>>;
    let layout = TileLayout::new(3, 3, 4);
    let vol = random_volume([3, 4, 9], 17);
    let up = Unproject::from_stack(&compute_mip_stack(&vol, 5, 2, MipKind::Max).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let target = Tensor::from_vec(&[2, 3, 1], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    let checks: Vec<(&str, Check, Vec<Tensor<f64>>)> = vec![
        ("conv2d", Box::new(|g, v| { let y = g.conv(v[0], v[1], v[2])?; weighted_sum(g, y, 1) }),
            vec![uniform(&[5, 4, 2], 2), uniform(&[3, 3, 2, 3], 3), uniform(&[3], 4)]),
        ("conv3d", Box::new(|g, v| { let y = g.conv(v[0], v[1], v[2])?; weighted_sum(g, y, 5) }),
            vec![uniform(&[3, 4, 4, 2], 6), uniform(&[3, 3, 3, 2, 2], 7), uniform(&[2], 8)]),
        ("maxpool", Box::new(|g, v| { let y = g.maxpool(v[0], &[2, 2, 1])?; weighted_sum(g, y, 9) }),
            vec![distinct(&[4, 4, 4, 2], 10)]),
        ("upsample", Box::new(|g, v| { let y = g.upsample_nearest(v[0], &[2, 2])?; weighted_sum(g, y, 11) }),
            vec![uniform(&[3, 2, 2], 12)]),
        ("concat", Box::new(|g, v| { let y = g.concat_channels(v[0], v[1])?; weighted_sum(g, y, 13) }),
            vec![uniform(&[2, 3, 2], 14), uniform(&[2, 3, 1], 15)]),
        ("relu", Box::new(|g, v| { let y = g.relu(v[0]); weighted_sum(g, y, 16) }), vec![distinct(&[3, 3, 2], 17)]),
        ("sigmoid", Box::new(|g, v| { let y = g.sigmoid(v[0]); weighted_sum(g, y, 18) }), vec![uniform(&[3, 3, 2], 19)]),
        ("add+scale", Box::new(|g, v| { let y = g.add(v[0], v[1])?; let y = g.scale(y, -1.5); weighted_sum(g, y, 20) }),
            vec![uniform(&[4, 2], 21), uniform(&[4, 2], 22)]),
        ("dice_loss", Box::new(move |g, v| { let p = g.sigmoid(v[0]); g.dice_loss(p, target.clone(), None, 1e-5) }),
            vec![uniform(&[2, 3, 1], 23)]),
        ("compose_tiled", Box::new(move |g, v| { let y = g.apply(ComposeTiled(layout), &[v[0]])?; weighted_sum(g, y, 24) }),
            vec![uniform(&[3, 3, 4, 2], 25)]),
        ("decompose_tiled", Box::new(move |g, v| { let y = g.apply(DecomposeTiled(layout), &[v[0]])?; weighted_sum(g, y, 26) }),
            vec![uniform(&[6, 8, 2], 27)]),
        ("unproject", Box::new(move |g, v| { let y = g.apply(up.clone(), &[v[0]])?; weighted_sum(g, y, 28) }),
            vec![distinct(&[3, 3, 4, 2], 29)]),
    ];
    let mut worst = (0.0f64, "");
    for (name, f, inputs) in &checks {
        let r = grad_check(|g, v| f(g, v), inputs, 1e-6).map_err(|e| format!("{name}: {e}"))?;
        if r.max_rel_error > worst.0 || worst.1.is_empty() {
            worst = (r.max_rel_error, name);
        }
    }
    if worst.0 > 1e-5 {
        return Err(format!("primitive {} rel error {:.2e} > 1e-5", worst.1, worst.0));
    }

    let cfg = VcNetConfig { seed: 11, ..VcNetConfig::micro() };
    let sample = prepare_sample(&cfg, &random_volume(cfg.patch, 11), &random_mask(cfg.patch, 0.2, 12)).map_err(|e| e.to_string())?;
    let net = VcNet::new(cfg, Variant::Full).map_err(|e| e.to_string())?;
    let params = tie_free_params(&net, 3);
    let e2e = grad_check_sampled(|g, v| loss_f64(&net, &sample, g, v), &params, 1e-5, 4, 7).map_err(|e| e.to_string())?;
    ensure(
        e2e.max_rel_error <= 1e-4,
        format!(
            "{} primitives worst {:.1e} ({}); micro network {} params worst {:.1e}",
            checks.len(),
            worst.0,
            worst.1,
            e2e.checked,
            e2e.max_rel_error
        ),
    )
}

fn loss_anchors() -> Outcome {
    let mut g = Graph::<f64>::new();
    let t = random_mask([4, 4, 4], 0.3, 1);
    let target = Tensor::from_vec(&[64], t.data().iter().map(|&v| v as f64).collect()).unwrap();
    let p = g.constant(target.clone());
    let l = g.dice_loss(p, target, None, 1e-5).map_err(|e| e.to_string())?;
    let anchor = g.value(l).item();
    if (anchor + 1.0).abs() > 1e-6 {
        return Err(format!("dice_loss(p=g) = {anchor}"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..8 {
        let cfg = VcNetConfig { seed, ..VcNetConfig::micro() };
        let sample = prepare_sample(&cfg, &random_volume(cfg.patch, seed), &random_mask(cfg.patch, 0.2, seed + 50))
            .map_err(|e| e.to_string())?;
        let l = VcNet::new(cfg, Variant::Full).and_then(|n| n.loss(&sample)).map_err(|e| e.to_string())?;
        lo = lo.min(l.total);
        hi = hi.max(l.total);
    }
    ensure(lo >= -1.2 && hi < 0.0, format!("dice_loss(p=g) = {anchor}; total loss over 8 inputs in [{lo:.4}, {hi:.4}]"))
}

fn metric_anchors() -> Outcome {
    for i in 0..1000u64 {
        let dims = [1 + (i % 4) as usize, 3, 2 + (i % 3) as usize];
        let a = random_mask(dims, (i % 10) as f64 / 10.0, 3 * i);
        let b = random_mask(dims, ((i + 3) % 10) as f64 / 10.0, 3 * i + 1);
        let c = confusion(&a, &b).map_err(|e| e.to_string())?;
        let on = |m: &VesselMask| -> std::collections::BTreeSet<[usize; 3]> {
            (0..m.len()).filter(|&j| m.data()[j] != 0).map(|j| voxel_coords(dims, j)).collect()
        };
        let (p, g) = (on(&a), on(&b));
        let inter = p.intersection(&g).count();
        let dice = if p.is_empty() && g.is_empty() { 1.0 } else { 2.0 * inter as f64 / (p.len() + g.len()) as f64 };
        let precision = (!p.is_empty()).then(|| inter as f64 / p.len() as f64);
        let neg = a.len() - g.len();
        let fpr = (neg > 0).then(|| p.difference(&g).count() as f64 / neg as f64);
        if c.dice() != dice || c.precision() != precision || c.fpr() != fpr {
            return Err(format!("pair {i} disagrees with the set oracle"));
        }
    }
    let pred = VesselMask::new([6, 1, 1], vec![1, 1, 1, 1, 0, 0]).unwrap();
    let gt = VesselMask::new([6, 1, 1], vec![1, 1, 1, 0, 1, 1]).unwrap();
    let c = confusion(&pred, &gt).map_err(|e| e.to_string())?;
    ensure(
        (c.tp, c.fp, c.fn_) == (3, 1, 2) && (c.dice() - 0.6667).abs() <= 1e-4 && c.precision() == Some(0.75),
        format!("1000 pairs exact; hand case dice {:.4} precision {:?}", c.dice(), c.precision()),
    )
}

fn classical_formulas() -> Outcome {
    let one = |v: f32| Volume3D::new([1, 1, 1], [1.0; 3], vec![v]).unwrap();
    let nls = nls_subtract(&one(2.0), &one(1.0), 1.5).map_err(|e| e.to_string())?.data()[0];
    if nls != 2.5 {
        return Err(format!("NLS(2,1,1.5) = {nls}"));
    }
    let (rho, r2, te1, te2) = (100.0f64, 40.0f64, 0.0075, 0.0225);
    let (fr2, frho) =
        r2star_fit_voxel(rho * (-te1 * r2).exp(), rho * (-te2 * r2).exp(), te1, te2).ok_or("fit rejected")?;
    let fit_err = ((fr2 - r2) / r2).abs().max(((frho - rho) / rho).abs());
    if fit_err > 1e-9 {
        return Err(format!("R2* fit relative error {fit_err:.2e}"));
    }
    // Noise-free tube along x, radius 1.5, contrast 1.
    let dims = [33, 33, 17];
    let dist = |_: usize, y: usize, z: usize| ((y as f64 - 16.0).powi(2) + (z as f64 - 8.0).powi(2)).sqrt();
    let sigma = 0.75;
    let tube = Volume3D::from_fn(dims, |x, y, z| (-(dist(x, y, z).powi(2)) / (2.0 * sigma * sigma)).exp() as f32);
    let resp = frangi_vesselness(&tube, &VesselnessParams::default()).map_err(|e| e.to_string())?;
    let (mut c, mut nc, mut b, mut nb) = (0.0, 0, 0.0, 0);
    for (i, &r) in resp.data().iter().enumerate() {
        let [x, y, z] = voxel_coords(dims, i);
        let d = dist(x, y, z);
        if d < 0.5 {
            c += r as f64;
            nc += 1;
        } else if d > 4.0 {
            b += r as f64;
            nb += 1;
        }
    }
    let (c, b) = (c / nc as f64, b / nb as f64);
    let ratio = if b > 0.0 { c / b } else { f64::INFINITY };
    ensure(ratio >= 5.0, format!("NLS 2.5; R2* rel error {fit_err:.1e}; Frangi centre/background {ratio:.1}"))
}

fn desk_data(seed: u64) -> Result<Vec<(Volume3D, VesselMask)>, String> {
    let suite = generate_suite(6, &PhantomSpec::default(), seed).map_err(|e| e.to_string())?;
    suite.into_iter().map(|p| Ok((normalize_minmax(&p.volume).map_err(|e| e.to_string())?, p.mask))).collect()
}

fn desk_train_config() -> TrainConfig {
    TrainConfig { lr: 1e-3, epochs: 20, patches_per_case: 4, val_patches_per_case: 4, ..TrainConfig::default() }
}

/// The desk model, shared with the fine-tuning criterion.
static DESK_MODEL: OnceLock<VcNet> = OnceLock::new();

fn desk_model(train_set: &[(Volume3D, VesselMask)]) -> Result<&'static VcNet, String> {
    if let Some(net) = DESK_MODEL.get() {
        return Ok(net);
    }
    let full = VcNet::new(VcNetConfig::default(), Variant::Full).map_err(|e| e.to_string())?;
    let (net, _) = train(&full, train_set, &desk_train_config()).map_err(|e| e.to_string())?;
    Ok(DESK_MODEL.get_or_init(|| net))
}

fn phantom_training() -> Outcome {
    let data = desk_data(2024)?;
    let (train_set, test_set) = data.split_at(5);
    let cfg = VcNetConfig::default();
    let t = Instant::now();
    let net = desk_model(train_set)?;
    let train_minutes = t.elapsed().as_secs_f64() / 60.0;
    let (vol, gt) = &test_set[0];
    let row = evaluate_case("held-out", MaskSource::Model { model: &net, threshold: 0.5 }, vol, gt).map_err(|e| e.to_string())?;

    // Single-patch overfit.
    let micro = VcNetConfig { base_width: 4, ..VcNetConfig::micro() };
    let (tube, tube_mask) = tube_patch(micro.patch, 3.5, 3.5, 1.6);
    let tc = TrainConfig {
        lr: 3e-3,
        epochs: 200,
        batch_size: 1,
        patches_per_case: 1,
        val_fraction: 0.0,
        patience: 1000,
        ..TrainConfig::default()
    };
    let (_, log) = train(&VcNet::new(micro, Variant::Full).map_err(|e| e.to_string())?, &[(tube, tube_mask)], &tc)
        .map_err(|e| e.to_string())?;
    let overfit = log.records.iter().filter_map(|r| r.train_vox).fold(f64::INFINITY, f64::min);

    // Mechanism: perturb only the projection input of a test patch.
    let patch = extract_patch(vol, &PatchSpec::new([32, 32, 8], cfg.patch)).map_err(|e| e.to_string())?;
    let input = prepare_input(&cfg, &patch).map_err(|e| e.to_string())?;
    let mut perturbed = input.clone();
    perturbed.tiled = perturbed.tiled.map(|v| 1.0 - v);
    let only3d = VcNet::new(cfg.clone(), Variant::Only3d).map_err(|e| e.to_string())?;
    let quick = TrainConfig { epochs: 2, ..desk_train_config() };
    let (only3d, _) = train(&only3d, train_set, &quick).map_err(|e| e.to_string())?;
    let max_diff = |n: &VcNet| -> Result<f32, String> {
        let a = n.predict(&input, ForwardOptions::default()).map_err(|e| e.to_string())?.vol_prob.unwrap();
        let b = n.predict(&perturbed, ForwardOptions::default()).map_err(|e| e.to_string())?.vol_prob.unwrap();
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max))
    };
    let (full_diff, abl_diff) = (max_diff(net)?, max_diff(&only3d)?);

    ensure(
        row.dice >= 0.70 && train_minutes <= 30.0 && overfit <= -0.95 && full_diff > 1e-4 && abl_diff == 0.0,
        format!(
            "held-out dice {:.3} after {train_minutes:.1} min; overfit L_vox {overfit:.3}; \
             MIP perturbation moves full by {full_diff:.2e}, 3d-only by {abl_diff:.0e}",
            row.dice
        ),
    )
}

fn pipeline_run(dir: &std::path::Path) -> Result<(TrainLog, Vec<u8>, Vec<u8>, String), String> {
    let spec = PhantomSpec { dims: [24, 24, 16], vessels: 3, ..PhantomSpec::default() };
    let data: Vec<(Volume3D, VesselMask)> = generate_suite(3, &spec, 99)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|p| (normalize_minmax(&p.volume).unwrap(), p.mask))
        .collect();
    let cfg = VcNetConfig { base_width: 4, ..VcNetConfig::micro() };
    let net = VcNet::new(cfg, Variant::Full).map_err(|e| e.to_string())?;
    let tc = TrainConfig { lr: 1e-3, epochs: 3, patches_per_case: 3, batch_size: 2, val_fraction: 0.34, ..TrainConfig::default() };
    let (net, log) = train(&net, &data[..2], &tc).map_err(|e| e.to_string())?;
    let json = save_checkpoint(&net, dir.join("model")).map_err(|e| e.to_string())?;
    let manifest = std::fs::read(&json).map_err(|e| e.to_string())?;
    let payload = std::fs::read(dir.join("model.ckpt.bin")).map_err(|e| e.to_string())?;
    let (vol, gt) = &data[2];
    let row = evaluate_case("c", MaskSource::Model { model: &net, threshold: 0.5 }, vol, gt).map_err(|e| e.to_string())?;
    Ok((log, manifest, payload, format!("{:?}", row.confusion)))
}

fn reproducibility() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline_run(a.path())?;
    let second = pipeline_run(b.path())?;
    let logs = first.0.to_jsonl().unwrap() == second.0.to_jsonl().unwrap();
    ensure(
        logs && first.1 == second.1 && first.2 == second.2 && first.3 == second.3,
        format!(
            "logs equal: {logs}, manifest equal: {}, weights equal: {} ({} bytes), eval equal: {}",
            first.1 == second.1,
            first.2 == second.2,
            first.2.len(),
            first.3 == second.3
        ),
    )
}

/// Pre-trains briefly on phantoms, then adapts to intensity-inverted vessels.
fn fine_tune_inverted() -> Outcome {
    let suite = generate_suite(6, &PhantomSpec::default(), 2024).map_err(|e| e.to_string())?;
    let inverted: Vec<_> = suite
        .iter()
        .map(|p| Ok((normalize_minmax(&invert_foreground(&p.volume, &p.support)?)?, p.mask.clone())))
        .collect::<vcnet_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    // Pretrained on normal-contrast phantoms; trained here if that criterion was skipped.
    let pre = desk_model(&desk_data(2024)?[..5])?;
    let tc = TrainConfig { epochs: 8, ..desk_train_config() };
    let (tuned, _) = fine_tune(pre, &inverted[..5], &tc).map_err(|e| e.to_string())?;
    let (vol, gt) = &inverted[5];
    let dice = |n: &VcNet| evaluate_case("inv", MaskSource::Model { model: n, threshold: 0.5 }, vol, gt).map(|r| r.dice);
    let (before, after) = (dice(pre).map_err(|e| e.to_string())?, dice(&tuned).map_err(|e| e.to_string())?);
    ensure(after > before, format!("inverted held-out dice {before:.3} frozen -> {after:.3} fine-tuned"))
}

fn main() {
    // Comma-separated criterion names to leave out during development.
    let skip = std::env::var("VCNET_ACCEPTANCE_SKIP").unwrap_or_default();
    let mut suite = Suite { failures: 0, skip: skip.split(',').map(|s| s.trim().to_string()).collect() };
    suite.run("window-count", 1.0, window_count);
    suite.run("unprojection-round-trip", 10.0, unprojection_round_trip);
    suite.run("overlap-fusion", 1.0, slice_nine_contributors);
    suite.run("differentiation", 120.0, differentiation);
    suite.run("loss-anchors", 1.0, loss_anchors);
    suite.run("metric-anchors", 5.0, metric_anchors);
    suite.run("classical-formulas", 30.0, classical_formulas);
    suite.run("phantom-training", 40.0 * 60.0, phantom_training);
    suite.run("reproducibility", 300.0, reproducibility);
    suite.run("fine-tune-inverted", 600.0, fine_tune_inverted);
    println!("{} criteria failed", suite.failures);
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
