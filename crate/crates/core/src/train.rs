//! Patch-based training with Adam and plateau learning-rate decay.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vcnet_autodiff::{Adam, Real, Tensor};

use crate::error::{CoreError, Result};
use crate::model::{prepare_sample, LossBreakdown, Sample, VcNet};
use crate::phantom::derive_seed;
use crate::volume::{extract_mask_patch, extract_patch, sample_training_patches, PatchSpec, VesselMask, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay: f64,
    /// Epochs without validation improvement before the rate decays.
    pub patience: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub patches_per_case: usize,
    /// Fraction of cases held out for validation (rounded, last cases).
    pub val_fraction: f64,
    pub val_patches_per_case: usize,
    /// Fraction of sampled patches anchored on a vessel voxel.
    pub fg_bias: f64,
    /// Adds wall-clock seconds to the log (makes logs non-reproducible).
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            decay: 0.5,
            patience: 10,
            batch_size: 4,
            epochs: 50,
            seed: 0,
            patches_per_case: 8,
            val_fraction: 0.2,
            val_patches_per_case: 4,
            fg_bias: 0.8,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad(format!("decay {} must lie in (0, 1)", self.decay));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("validation fraction {} must lie in [0, 1)", self.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            return bad(format!("fg-bias {} must lie in [0, 1]", self.fg_bias));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_vox: Option<f64>,
    pub train_mip: Option<f64>,
    pub val_loss: Option<f64>,
    /// Rate used during this epoch.
    pub lr: f64,
    pub steps: usize,
    /// Best epoch so far (the saved checkpoint).
    pub best_epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_loss: Option<f64>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| CoreError::io(path, e))
    }
}

/// Reduce-on-plateau schedule. The wait counter restarts after every decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub decay: f64,
    pub patience: usize,
    best: f64,
    wait: usize,
}

impl Plateau {
    pub fn new(lr: f64, decay: f64, patience: usize) -> Self {
        Self { lr, decay, patience, best: f64::INFINITY, wait: 0 }
    }

    /// Records a validation loss. Returns whether it improved on the best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            return true;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.lr *= self.decay;
            self.wait = 0;
        }
        false
    }
}

/// Elementwise mean of per-sample gradient lists, summed in sample order.
pub fn mean_gradients<T: Real>(per_sample: &[Vec<Tensor<T>>]) -> Vec<Tensor<T>> {
    let mut acc = per_sample[0].clone();
    for grads in &per_sample[1..] {
        for (a, g) in acc.iter_mut().zip(grads) {
            a.add_assign(g);
        }
    }
    let scale = T::from_f64_lossy(1.0 / per_sample.len() as f64);
    for a in acc.iter_mut() {
        a.scale_in_place(scale);
    }
    acc
}

fn case_split(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    ((0..n - n_val).collect(), (n - n_val..n).collect())
}

fn build_samples(
    model: &VcNet,
    data: &[(Volume3D, VesselMask)],
    picks: &[(usize, PatchSpec)],
) -> Result<Vec<Sample>> {
    picks
        .par_iter()
        .map(|(case, spec)| {
            let (vol, mask) = &data[*case];
            let v = extract_patch(vol, spec)?;
            let m = extract_mask_patch(mask, spec)?;
            prepare_sample(model.config(), &v, &m)
        })
        .collect()
}

fn mean_loss(losses: &[LossBreakdown]) -> LossBreakdown {
    let n = losses.len() as f64;
    let avg = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = losses.iter().map(f).collect();
        v.map(|v| v.iter().sum::<f64>() / n)
    };
    LossBreakdown {
        total: losses.iter().map(|l| l.total).sum::<f64>() / n,
        vox: avg(&|l| l.vox),
        mip: avg(&|l| l.mip),
    }
}

/// Trains `model` in place of a copy and returns the best weights.
///
/// Volumes are used as given (normalize beforehand). Each epoch resamples
/// `patches_per_case` patches per training case from an epoch-derived seed,
/// shuffles them, and applies one Adam step per batch on the mean gradient.
/// Validation patches are drawn once. Without validation cases the plateau
/// rule and the best checkpoint follow the training loss.
pub fn train(model: &VcNet, data: &[(Volume3D, VesselMask)], cfg: &TrainConfig) -> Result<(VcNet, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Config("training set is empty".into()));
    }
    let size = model.config().patch;
    for (vol, mask) in data {
        mask.check_pair(vol)?;
        PatchSpec::new([0; 3], size).validate(vol.dims(), model.config().s)?;
    }
    let (train_cases, val_cases) = case_split(data.len(), cfg.val_fraction);
    let mut val_picks = Vec::new();
    for &c in &val_cases {
        let (vol, mask) = &data[c];
        let specs = sample_training_patches(
            vol,
            mask,
            cfg.val_patches_per_case,
            size,
            derive_seed(cfg.seed ^ 0x5641_4C00, c as u64),
            cfg.fg_bias,
        )?;
        val_picks.extend(specs.into_iter().map(|s| (c, s)));
    }
    let val_samples = build_samples(model, data, &val_picks)?;

    let mut net = model.clone();
    let mut best = net.clone();
    let mut log = TrainLog::default();
    let mut sched = Plateau::new(cfg.lr, cfg.decay, cfg.patience);
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        let mut picks = Vec::new();
        for &c in &train_cases {
            let (vol, mask) = &data[c];
            let specs = sample_training_patches(
                vol,
                mask,
                cfg.patches_per_case,
                size,
                derive_seed(epoch_seed, c as u64),
                cfg.fg_bias,
            )?;
            picks.extend(specs.into_iter().map(|s| (c, s)));
        }
        picks.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

        let lr = sched.lr;
        let adam = Adam::with_lr(lr);
        let mut losses = Vec::with_capacity(picks.len());
        let mut steps = 0;
        for (b, chunk) in picks.chunks(cfg.batch_size).enumerate() {
            let samples = build_samples(&net, data, chunk)?;
            let results: Vec<Result<(LossBreakdown, Vec<Tensor<f32>>)>> =
                samples.par_iter().map(|s| net.gradients(s)).collect();
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (loss, g) = r?;
                if !loss.total.is_finite() {
                    let batch_seed = derive_seed(epoch_seed, b as u64);
                    tracing::error!(epoch, batch = b, batch_seed, ?chunk, "non-finite loss");
                    return Err(CoreError::NonFiniteLoss { epoch, batch: b, seed: batch_seed });
                }
                losses.push(loss);
                grads.push(g);
            }
            let mean = mean_gradients(&grads);
            for (p, g) in net.params_mut().iter_mut().zip(mean) {
                p.grad = Some(g);
            }
            adam.step(net.params_mut())?;
            steps += 1;
        }
        let train_loss = mean_loss(&losses);
        let val_loss = if val_samples.is_empty() {
            None
        } else {
            let v: Result<Vec<LossBreakdown>> = val_samples.par_iter().map(|s| net.loss(s)).collect();
            Some(mean_loss(&v?).total)
        };
        let monitored = val_loss.unwrap_or(train_loss.total);
        if sched.observe(monitored) {
            best = net.clone();
            log.best_epoch = Some(epoch);
            log.best_loss = Some(monitored);
        }
        let record = EpochRecord {
            epoch,
            train_loss: train_loss.total,
            train_vox: train_loss.vox,
            train_mip: train_loss.mip,
            val_loss,
            lr,
            steps,
            best_epoch: log.best_epoch.unwrap_or(epoch),
            wall_seconds: cfg.record_timing.then(|| start.elapsed().as_secs_f64()),
        };
        tracing::info!(
            epoch,
            train = record.train_loss,
            val = ?record.val_loss,
            lr,
            "epoch finished"
        );
        log.records.push(record);
    }
    if cfg.epochs == 0 {
        return Ok((net, log));
    }
    Ok((best, log))
}

/// Continues training from existing weights (fresh optimizer state). Zero
/// epochs return the input unchanged.
pub fn fine_tune(model: &VcNet, data: &[(Volume3D, VesselMask)], cfg: &TrainConfig) -> Result<(VcNet, TrainLog)> {
    train(model, data, cfg)
}
