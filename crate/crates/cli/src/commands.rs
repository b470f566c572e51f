use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use vcnet_core::baselines::*;
use vcnet_core::checkpoint::{ensure_compatible, load_checkpoint, save_checkpoint};
use vcnet_core::io::{read_mask, read_volume, window_to_u8, write_index_map, write_mask, write_png_gray8, write_volume};
use vcnet_core::metrics::{confusion, evaluate_case, MaskSource, Report, ReportRow};
use vcnet_core::mip::compute_mip_stack;
use vcnet_core::model::{infer_probabilities, VcNet};
use vcnet_core::phantom::generate_suite;
use vcnet_core::train::{fine_tune, train, TrainLog};
use vcnet_core::volume::normalize_minmax;
use vcnet_core::{VesselMask, Volume3D};

use crate::args::*;
use crate::config::FileConfig;

pub const DATA_DIR_ENV: &str = "VCNET_DATA_DIR";

fn data_dir(flag: Option<&PathBuf>) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p.clone()),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| vcnet_core::CoreError::Config(format!("no --data given and ${DATA_DIR_ENV} is unset")).into()),
    }
}

/// Case names with both `<name>.vkv.json` and `<name>_mask.vkv.json`, sorted.
pub fn discover_cases(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut cases = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| vcnet_core::CoreError::io(dir, e))?;
    for entry in entries {
        let name = entry?.file_name().to_string_lossy().to_string();
        if let Some(case) = name.strip_suffix("_mask.vkv.json") {
            let vol = dir.join(format!("{case}.vkv.json"));
            if vol.exists() {
                cases.push((case.to_string(), vol, dir.join(&name)));
            }
        }
    }
    cases.sort();
    if cases.is_empty() {
        return Err(vcnet_core::CoreError::Config(format!(
            "{} has no <case>.vkv.json / <case>_mask.vkv.json pairs",
            dir.display()
        ))
        .into());
    }
    Ok(cases)
}

/// Volumes are min-max normalized on load everywhere the network sees them.
fn load_normalized(path: &Path) -> Result<Volume3D> {
    Ok(normalize_minmax(&read_volume(path)?)?)
}

fn load_cases(dir: &Path) -> Result<Vec<(String, Volume3D, VesselMask)>> {
    discover_cases(dir)?
        .into_iter()
        .map(|(name, v, m)| Ok((name, load_normalized(&v)?, read_mask(&m)?)))
        .collect()
}

fn echo<T: serde::Serialize>(what: &str, value: &T) {
    tracing::info!(config = %serde_json::to_string(value).unwrap_or_default(), "effective {what}");
}

pub fn phantom(args: &PhantomArgs, cfg: &FileConfig) -> Result<()> {
    let mut spec = cfg.phantom.clone();
    if let Some(d) = args.dims {
        spec.dims = d;
    }
    if let Some(v) = args.vessels {
        spec.vessels = v;
    }
    if let Some(r) = args.radius_min {
        spec.radius[0] = r;
    }
    if let Some(r) = args.radius_max {
        spec.radius[1] = r;
    }
    if let Some(w) = args.wiggle {
        spec.wiggle = w;
    }
    if args.noise_free {
        spec.snr = None;
    } else if let Some(s) = args.snr {
        spec.snr = Some(s);
    }
    spec.crossings &= !args.no_crossings;
    spec.kissing &= !args.no_kissing;
    echo("phantom spec", &spec);
    let suite = generate_suite(args.count, &spec, spec.seed)?;
    fs::create_dir_all(&args.out).map_err(|e| vcnet_core::CoreError::io(&args.out, e))?;
    for (i, p) in suite.iter().enumerate() {
        let name = format!("{}_{i:03}", args.prefix);
        write_volume(&p.volume, args.out.join(&name))?;
        write_mask(&p.mask, args.out.join(format!("{name}_mask")))?;
        let lines = args.out.join(format!("{name}_centerlines.json"));
        fs::write(&lines, serde_json::to_string_pretty(&p.centerlines)?).map_err(|e| vcnet_core::CoreError::io(&lines, e))?;
        println!("{name}\tvessel_fraction={:.5}\tnoise_std={:.5}", p.vessel_fraction, p.noise_std);
    }
    Ok(())
}

pub fn mip(args: &MipArgs) -> Result<()> {
    let vol = read_volume(&args.input)?;
    let stack = compute_mip_stack(&vol, args.s, args.t, args.kind)?;
    let [k1, k2, _] = vol.dims();
    let (lo, hi) = vol.min_max();
    fs::create_dir_all(&args.out).map_err(|e| vcnet_core::CoreError::io(&args.out, e))?;
    for (k, (img, idx)) in stack.images.iter().zip(&stack.index_maps).enumerate() {
        // Rows are x, columns are y.
        write_png_gray8(args.out.join(format!("mip_{k:02}.png")), k2, k1, &window_to_u8(img, lo, hi))?;
        write_index_map(idx, k1, k2, args.out.join(format!("mip_{k:02}_index")))?;
    }
    let windows: Vec<[usize; 2]> = stack.windows.iter().map(|w| [w.start, w.start + w.len]).collect();
    let summary = args.out.join("mip.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({ "m": stack.m(), "s": args.s, "t": args.t, "windows": windows }))?;
    fs::write(&summary, text).map_err(|e| vcnet_core::CoreError::io(&summary, e))?;
    println!("{}", stack.m());
    Ok(())
}

fn write_log(log: &TrainLog, path: Option<&PathBuf>) -> Result<()> {
    if let Some(p) = path {
        log.write_jsonl(p)?;
    }
    if let (Some(e), Some(l)) = (log.best_epoch, log.best_loss) {
        tracing::info!(best_epoch = e, best_loss = l, "training finished");
    }
    Ok(())
}

pub fn train_cmd(args: &TrainArgs, cfg: &mut FileConfig) -> Result<()> {
    cfg.apply_model(&args.model);
    cfg.apply_train(&args.train);
    echo("model config", &cfg.model);
    echo("train config", &cfg.train);
    let cases = load_cases(&data_dir(args.data.as_ref())?)?;
    tracing::info!(cases = cases.len(), variant = ?cfg.variant, "loaded training data");
    let data: Vec<(Volume3D, VesselMask)> = cases.into_iter().map(|(_, v, m)| (v, m)).collect();
    let net = VcNet::new(cfg.model.clone(), cfg.variant)?;
    let (net, log) = train(&net, &data, &cfg.train)?;
    let path = save_checkpoint(&net, &args.out)?;
    write_log(&log, args.log_file.as_ref())?;
    println!("{}", path.display());
    Ok(())
}

pub fn finetune(args: &FinetuneArgs, cfg: &mut FileConfig) -> Result<()> {
    cfg.apply_train(&args.train);
    echo("train config", &cfg.train);
    let base = load_checkpoint(&args.checkpoint)?;
    let cases = load_cases(&data_dir(args.data.as_ref())?)?;
    let data: Vec<(Volume3D, VesselMask)> = cases.into_iter().map(|(_, v, m)| (v, m)).collect();
    let (net, log) = fine_tune(&base, &data, &cfg.train)?;
    ensure_compatible(&net, base.config(), base.variant())?;
    let path = save_checkpoint(&net, &args.out)?;
    write_log(&log, args.log_file.as_ref())?;
    println!("{}", path.display());
    Ok(())
}

pub fn infer(args: &InferArgs) -> Result<()> {
    let net = load_checkpoint(&args.checkpoint)?;
    let raw = read_volume(&args.input)?;
    let probs = infer_probabilities(&net, &normalize_minmax(&raw)?)?.with_spacing(raw.spacing());
    let data = probs.data().iter().map(|&p| (p >= args.threshold) as u8).collect();
    let mask = VesselMask::new(raw.dims(), data)?;
    vcnet_core::io::write_mask_with_spacing(&mask, raw.spacing(), &args.out)?;
    if let Some(p) = &args.probabilities {
        write_volume(&probs, p)?;
    }
    println!("{}", mask.count());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut report = Report::default();
    match (&args.pred, &args.gt, &args.checkpoint) {
        (Some(pred), Some(gt), None) => {
            let (p, g) = (read_mask(pred)?, read_mask(gt)?);
            let case = pred.file_name().map(|n| n.to_string_lossy().trim_end_matches(".vkv.json").to_string());
            report.push(ReportRow::from_confusion(case.unwrap_or_default(), confusion(&p, &g)?, 0.0));
        }
        (None, _, Some(ckpt)) => {
            let net = load_checkpoint(ckpt)?;
            for (name, vol, gt) in load_cases(&data_dir(args.data.as_ref())?)? {
                let row = evaluate_case(&name, MaskSource::Model { model: &net, threshold: args.threshold }, &vol, &gt)?;
                tracing::info!(case = %name, dice = row.dice, "evaluated");
                report.push(row);
            }
        }
        _ => bail!(vcnet_core::CoreError::Config("give either --pred with --gt, or --checkpoint".into())),
    }
    let text = if args.format == "jsonl" { report.to_jsonl()? } else { report.to_csv() };
    match &args.out {
        Some(p) => fs::write(p, text).map_err(|e| vcnet_core::CoreError::io(p, e))?,
        None => std::io::stdout().write_all(text.as_bytes()).context("writing report")?,
    }
    Ok(())
}

pub fn baseline(which: &Baseline, cfg: &FileConfig) -> Result<()> {
    match which {
        Baseline::Nls { s, s_prime, alpha, venogram, venous_threshold, out } => {
            let mut arterial = nls_subtract(&read_volume(s)?, &read_volume(s_prime)?, *alpha)?;
            if let (Some(v), Some(t)) = (venogram, venous_threshold) {
                arterial = discard_venous(&arterial, &read_volume(v)?, *t)?;
            }
            write_volume(&arterial, out)?;
        }
        Baseline::Mrvg { maps, out } => {
            let vols = maps.iter().map(read_volume).collect::<vcnet_core::Result<Vec<_>>>()?;
            write_volume(&mrvg_average(&vols)?, out)?;
        }
        Baseline::R2star { s1, s2, te1, te2, out } => {
            let fit = r2star_fit(&read_volume(s1)?, &read_volume(s2)?, *te1, *te2)?;
            let base = out.to_string_lossy();
            write_volume(&fit.r2star, format!("{base}_r2star"))?;
            write_volume(&fit.rho, format!("{base}_rho"))?;
            write_mask(&fit.flagged, format!("{base}_flagged"))?;
            println!("{}", fit.flagged.count());
        }
        Baseline::Frangi { input, scales, alpha, beta, c, out } => {
            let mut p = cfg.vesselness.clone();
            if let Some(s) = scales {
                p.scales = s.clone();
            }
            if let Some(a) = alpha {
                p.alpha = *a;
            }
            if let Some(b) = beta {
                p.beta = *b;
            }
            if c.is_some() {
                p.c = *c;
            }
            echo("vesselness params", &p);
            write_volume(&frangi_vesselness(&read_volume(input)?, &p)?, out)?;
        }
        Baseline::Atrg { input, seeds, k, max_voxels, out } => {
            let m = atrg_grow(&read_volume(input)?, seeds, *k, *max_voxels)?;
            write_mask(&m, out)?;
            println!("{}", m.count());
        }
        Baseline::Threshold { input, tau, out } => {
            let m = threshold_mask(&read_volume(input)?, *tau);
            write_mask(&m, out)?;
            println!("{}", m.count());
        }
    }
    Ok(())
}

pub fn serve(args: &ServeArgs) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting runtime")?;
    rt.block_on(vcnet_label::serve(&args.volume, &args.mask, args.addr))?;
    Ok(())
}
