//! Effective configuration: flags over the `--config` file over defaults.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use vcnet_core::baselines::VesselnessParams;
use vcnet_core::model::{Variant, VcNetConfig};
use vcnet_core::phantom::PhantomSpec;
use vcnet_core::train::TrainConfig;

use crate::args::{ModelFlags, TrainFlags};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: VcNetConfig,
    pub variant: Variant,
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
    pub vesselness: VesselnessParams,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.model.seed = s;
            self.train.seed = s;
            self.phantom.seed = s;
        }
    }

    pub fn apply_model(&mut self, f: &ModelFlags) {
        let m = &mut self.model;
        set(&mut m.patch, f.patch);
        set(&mut m.base_width, f.base_width);
        set(&mut m.depth_3d, f.depth_3d);
        set(&mut m.depth_2d, f.depth_2d);
        set(&mut m.s, f.s);
        set(&mut m.t, f.t);
        set(&mut m.lambda, f.lambda);
        set(&mut self.variant, f.variant);
    }

    pub fn apply_train(&mut self, f: &TrainFlags) {
        let t = &mut self.train;
        set(&mut t.epochs, f.epochs);
        set(&mut t.lr, f.lr);
        set(&mut t.batch_size, f.batch_size);
        set(&mut t.patches_per_case, f.patches_per_case);
        set(&mut t.val_fraction, f.val_fraction);
        set(&mut t.fg_bias, f.fg_bias);
        set(&mut t.patience, f.patience);
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
