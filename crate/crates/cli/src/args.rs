use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vcnet_core::mip::MipKind;
use vcnet_core::model::Variant;
use vcnet_core::Dims;

#[derive(Debug, Parser)]
#[command(name = "vcnet", version, about = "Vessel segmentation by volume composition")]
pub struct Cli {
    /// JSON config with optional `model`, `train`, `phantom`, `vesselness`
    /// sections. Flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for phantoms, weight init and patch sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log filter for standard error, e.g. `info` or `vcnet_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic vessel phantoms with exact masks.
    Phantom(PhantomArgs),
    /// Write the MIP stack of a volume as PNGs plus slice-index maps.
    Mip(MipArgs),
    /// Train a network on a directory of volume/mask pairs.
    Train(TrainArgs),
    /// Continue training from a checkpoint.
    Finetune(FinetuneArgs),
    /// Segment a volume with a trained checkpoint.
    Infer(InferArgs),
    /// Score masks or a checkpoint against ground truth.
    Eval(EvalArgs),
    /// Classical vessel extraction.
    #[command(subcommand)]
    Baseline(Baseline),
    /// Serve the labeling API for one volume/mask pair.
    Serve(ServeArgs),
}

pub fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated sizes, got {s:?}"));
    }
    let mut d = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        d[i] = p.parse().map_err(|_| format!("bad size {p:?}"))?;
    }
    Ok(d)
}

pub fn parse_voxel(s: &str) -> Result<[usize; 3], String> {
    parse_dims(s)
}

fn parse_scales(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|p| p.trim().parse().map_err(|_| format!("bad scale {p:?}"))).collect()
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// `k1,k2,k3`
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<Dims>,
    #[arg(long)]
    pub vessels: Option<usize>,
    #[arg(long)]
    pub radius_min: Option<f64>,
    #[arg(long)]
    pub radius_max: Option<f64>,
    #[arg(long)]
    pub wiggle: Option<f64>,
    #[arg(long, conflicts_with = "noise_free")]
    pub snr: Option<f64>,
    #[arg(long)]
    pub noise_free: bool,
    #[arg(long)]
    pub no_crossings: bool,
    #[arg(long)]
    pub no_kissing: bool,
    #[arg(long, default_value = "phantom")]
    pub prefix: String,
}

#[derive(Debug, Args)]
pub struct MipArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub s: usize,
    #[arg(long, default_value_t = 2)]
    pub t: usize,
    #[arg(long, default_value = "max")]
    pub kind: MipKind,
    #[arg(long)]
    pub out: PathBuf,
}

/// Network shape overrides.
#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    /// `k1,k2,k3`
    #[arg(long, value_parser = parse_dims)]
    pub patch: Option<Dims>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub depth_3d: Option<usize>,
    #[arg(long)]
    pub depth_2d: Option<usize>,
    #[arg(long = "mip-s")]
    pub s: Option<usize>,
    #[arg(long = "mip-t")]
    pub t: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub variant: Option<Variant>,
}

/// Optimizer and sampling overrides.
#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patches_per_case: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub fg_bias: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of `<case>.vkv.json` + `<case>_mask.vkv.json` pairs
    /// (default: `$VCNET_DATA_DIR`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path (writes `<out>.ckpt.json` and `<out>.ckpt.bin`).
    #[arg(long)]
    pub out: PathBuf,
    /// Line-delimited JSON training log.
    #[arg(long)]
    pub log_file: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log_file: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Output mask path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Also write the probability map here.
    #[arg(long)]
    pub probabilities: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted mask (with `--gt`).
    #[arg(long, requires = "gt", conflicts_with = "checkpoint")]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Checkpoint to run over every case in `--data`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// `csv` or `jsonl`.
    #[arg(long, default_value = "csv", value_parser = ["csv", "jsonl"])]
    pub format: String,
    /// Report file (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Baseline {
    /// `S^2 - alpha * S'^2`
    Nls {
        #[arg(long)]
        s: PathBuf,
        #[arg(long)]
        s_prime: PathBuf,
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
        /// Venogram whose bright voxels are zeroed in the result.
        #[arg(long, requires = "venous_threshold")]
        venogram: Option<PathBuf>,
        #[arg(long, requires = "venogram")]
        venous_threshold: Option<f32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average of min-max normalized maps.
    Mrvg {
        #[arg(long = "map", required = true)]
        maps: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-echo R2* and proton density fit.
    R2star {
        #[arg(long)]
        s1: PathBuf,
        #[arg(long)]
        s2: PathBuf,
        #[arg(long)]
        te1: f64,
        #[arg(long)]
        te2: f64,
        /// Writes `<out>_r2star`, `<out>_rho` and `<out>_flagged`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Multiscale Hessian vesselness.
    Frangi {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated sigmas.
        #[arg(long, value_parser = parse_scales)]
        scales: Option<Vec<f64>>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        c: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adaptive-threshold region growing from seed voxels.
    Atrg {
        #[arg(long)]
        input: PathBuf,
        /// `x,y,z`; repeat for several seeds.
        #[arg(long = "seed-voxel", required = true, value_parser = parse_voxel)]
        seeds: Vec<[usize; 3]>,
        #[arg(long, default_value_t = 2.0)]
        k: f64,
        #[arg(long, default_value_t = 1_000_000)]
        max_voxels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Global intensity threshold.
    Threshold {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        tau: f32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub volume: PathBuf,
    /// Mask file; created on first save if missing.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}
