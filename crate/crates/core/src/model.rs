//! Dual-stream network: a 3D encoder-decoder over the volume patch, a
//! half-width 2D encoder-decoder over the tiled MIP plane, unprojection of
//! the 2D features into the volume, and a convolutional fusion head.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vcnet_autodiff::{Graph, Initializer, ParamSet, Parameter, Real, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::mip::{
    compute_mip_stack, mip_ground_truth, tiled_labels, DecomposeTiled, MipKind, MipLabelRule,
    TileLayout, Unproject,
};
use crate::volume::{extract_patch, grid_specs, pad_to, Dims, VesselMask, Volume3D};

/// Channel progression of the volumetric stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamStyle {
    /// Level `l` convolves to `base * 2^l` then `base * 2^(l+1)`; output
    /// width `2 * base`.
    #[default]
    Doubling,
    /// Both convolutions at level `l` use `base * 2^l`; output width `base`.
    Constant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// Volumetric stream with a 1x1x1 sigmoid head; ignores the MIP input.
    Only3d,
    /// MIP stream with its sigmoid head; predicts MIP labels only.
    Only2d,
}

impl std::str::FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "3d-only" | "only3d" => Ok(Variant::Only3d),
            "2d-only" | "only2d" => Ok(Variant::Only2d),
            other => Err(CoreError::Config(format!("variant {other:?} (expected full|3d-only|2d-only)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VcNetConfig {
    /// `(k1, k2, k3)`; `k3` is the slice axis.
    pub patch: Dims,
    pub s: usize,
    pub t: usize,
    pub base_width: usize,
    pub style_3d: StreamStyle,
    /// 2D stream width relative to the volumetric stream's output width.
    pub width_2d_factor: f64,
    pub depth_3d: usize,
    pub depth_2d: usize,
    pub fusion_convs: usize,
    /// Zero means `base_width`.
    pub fusion_width: usize,
    pub lambda: f64,
    pub delta: f64,
    pub kind: MipKind,
    pub label_rule: MipLabelRule,
    pub seed: u64,
}

impl Default for VcNetConfig {
    fn default() -> Self {
        Self {
            patch: [64, 64, 16],
            s: 5,
            t: 2,
            base_width: 8,
            style_3d: StreamStyle::Doubling,
            width_2d_factor: 0.5,
            depth_3d: 3,
            depth_2d: 3,
            fusion_convs: 2,
            fusion_width: 0,
            lambda: 0.2,
            delta: 1e-5,
            kind: MipKind::Max,
            label_rule: MipLabelRule::Union,
            seed: 0,
        }
    }
}

impl VcNetConfig {
    /// Full-size widths: 128x128x16 patches, 3D base 32 (output 64 channels),
    /// 2D stream of depth 4 with 32 output channels.
    pub fn full_scale() -> Self {
        Self { patch: [128, 128, 16], base_width: 32, depth_3d: 3, depth_2d: 4, ..Self::default() }
    }

    /// Tiny configuration for gradient checks and smoke tests.
    pub fn micro() -> Self {
        Self { patch: [8, 8, 16], base_width: 2, depth_3d: 2, depth_2d: 2, ..Self::default() }
    }

    pub fn out_width_3d(&self) -> usize {
        match self.style_3d {
            StreamStyle::Doubling => 2 * self.base_width,
            StreamStyle::Constant => self.base_width,
        }
    }

    /// Final feature width of the 2D stream.
    pub fn c1(&self) -> usize {
        ((self.out_width_3d() as f64 * self.width_2d_factor).round() as usize).max(1)
    }

    pub fn fusion_width(&self) -> usize {
        if self.fusion_width == 0 {
            self.base_width
        } else {
            self.fusion_width
        }
    }

    pub fn m(&self) -> usize {
        (self.patch[2].saturating_sub(self.s)) / self.t.max(1) + 1
    }

    pub fn layout(&self) -> TileLayout {
        TileLayout::new(self.m(), self.patch[0], self.patch[1])
    }

    /// Per-level `[z, x, y]` pooling factors of the volumetric stream: the
    /// slice axis halves while it stays even and at least 2 afterwards.
    pub fn pool_schedule_3d(&self) -> Vec<[usize; 3]> {
        let mut z = self.patch[2];
        (0..self.depth_3d)
            .map(|_| {
                let f = if z % 2 == 0 && z / 2 >= 2 { 2 } else { 1 };
                z /= f;
                [f, 2, 2]
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(msg));
        let [k1, k2, k3] = self.patch;
        if k1 == 0 || k2 == 0 || k3 == 0 {
            return bad(format!("patch {:?} must be positive", self.patch));
        }
        if self.s == 0 || self.t == 0 {
            return bad(format!("window size {} and stride {} must be positive", self.s, self.t));
        }
        if k3 < self.s {
            return bad(format!("patch depth {k3} is smaller than the window size {}", self.s));
        }
        if self.depth_3d == 0 || self.depth_2d == 0 {
            return bad("stream depth must be at least 1".into());
        }
        if self.base_width == 0 {
            return bad("base width must be positive".into());
        }
        if !(self.width_2d_factor > 0.0) {
            return bad(format!("2D width factor {} must be positive", self.width_2d_factor));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return bad(format!("delta {} must be positive", self.delta));
        }
        let (mut x, mut y) = (k1, k2);
        for level in 0..self.depth_3d {
            if x % 2 != 0 || y % 2 != 0 {
                return bad(format!(
                    "3D stream level {level}: extent {x}x{y} not divisible by the pool factor 2"
                ));
            }
            x /= 2;
            y /= 2;
        }
        // pooling the tiled plane must keep tile borders on the coarse grid
        let (mut x, mut y) = (k1, k2);
        for level in 0..self.depth_2d {
            if x % 2 != 0 || y % 2 != 0 {
                return bad(format!(
                    "2D stream level {level}: tile extent {x}x{y} not divisible by the pool factor 2"
                ));
            }
            x /= 2;
            y /= 2;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub taps: Vec<usize>,
    pub cin: usize,
    pub cout: usize,
}

impl LayerSpec {
    fn new(name: String, taps: &[usize], cin: usize, cout: usize) -> Self {
        Self { name, taps: taps.to_vec(), cin, cout }
    }

    pub fn numel(&self) -> usize {
        self.taps.iter().product::<usize>() * self.cin * self.cout + self.cout
    }
}

struct LevelWidths {
    mid: usize,
    out: usize,
}

fn stream_widths(style: StreamStyle, base: usize, depth: usize) -> Vec<LevelWidths> {
    (0..=depth)
        .map(|l| match style {
            StreamStyle::Doubling => LevelWidths { mid: base << l, out: base << (l + 1) },
            StreamStyle::Constant => LevelWidths { mid: base << l, out: base << l },
        })
        .collect()
}

/// Encoder-decoder layers under `prefix`. Decoder levels upsample, apply a
/// 1x1 projection, concatenate the skip and convolve twice.
fn stream_layers(prefix: &str, style: StreamStyle, base: usize, depth: usize, rank: usize) -> Vec<LayerSpec> {
    let k3 = vec![3; rank];
    let k1 = vec![1; rank];
    let w = stream_widths(style, base, depth);
    let mut out = Vec::new();
    let mut cin = 1;
    for (l, lw) in w.iter().enumerate() {
        out.push(LayerSpec::new(format!("{prefix}.enc{l}.a"), &k3, cin, lw.mid));
        out.push(LayerSpec::new(format!("{prefix}.enc{l}.b"), &k3, lw.mid, lw.out));
        cin = lw.out;
    }
    let mut prev = w[depth].out;
    for l in (0..depth).rev() {
        let skip = w[l].out;
        let up = match style {
            StreamStyle::Doubling => prev,
            StreamStyle::Constant => skip,
        };
        out.push(LayerSpec::new(format!("{prefix}.dec{l}.up"), &k1, prev, up));
        out.push(LayerSpec::new(format!("{prefix}.dec{l}.a"), &k3, up + skip, skip));
        out.push(LayerSpec::new(format!("{prefix}.dec{l}.b"), &k3, skip, skip));
        prev = skip;
    }
    out
}

/// Every convolution of the network, in parameter order.
pub fn layer_plan(config: &VcNetConfig, variant: Variant) -> Vec<LayerSpec> {
    let mut plan = Vec::new();
    let out3 = config.out_width_3d();
    let c1 = config.c1();
    if variant != Variant::Only2d {
        plan.extend(stream_layers("s3d", config.style_3d, config.base_width, config.depth_3d, 3));
    }
    if variant != Variant::Only3d {
        plan.extend(stream_layers("s2d", StreamStyle::Constant, c1, config.depth_2d, 2));
        plan.push(LayerSpec::new("s2d.head".into(), &[1, 1], c1, 1));
    }
    match variant {
        Variant::Full => {
            let fw = config.fusion_width();
            let mut cin = out3 + c1;
            for i in 0..config.fusion_convs {
                plan.push(LayerSpec::new(format!("fuse.conv{i}"), &[3, 3, 3], cin, fw));
                cin = fw;
            }
            plan.push(LayerSpec::new("fuse.head".into(), &[1, 1, 1], cin, 1));
        }
        Variant::Only3d => plan.push(LayerSpec::new("s3d.head".into(), &[1, 1, 1], out3, 1)),
        Variant::Only2d => {}
    }
    plan
}

pub fn param_count(config: &VcNetConfig, variant: Variant) -> usize {
    layer_plan(config, variant).iter().map(LayerSpec::numel).sum()
}

/// Parameters whose names start with `prefix`.
pub fn param_count_with_prefix(config: &VcNetConfig, variant: Variant, prefix: &str) -> usize {
    layer_plan(config, variant)
        .iter()
        .filter(|l| l.name.starts_with(prefix))
        .map(LayerSpec::numel)
        .sum()
}

/// Network inputs for one patch, in graph precision.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    /// `[k3, k1, k2, 1]`
    pub patch: Tensor<T>,
    /// `[rows, cols, 1]`
    pub tiled: Tensor<T>,
    pub unproject: Unproject,
}

/// Supervision for one patch.
#[derive(Clone, Debug)]
pub struct Targets<T> {
    /// `[k3, k1, k2, 1]`
    pub mask: Tensor<T>,
    /// `[rows, cols, 1]`
    pub mip_labels: Tensor<T>,
    /// `[rows, cols, 1]`, zero on padding tiles.
    pub mip_valid: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub input: ModelInput<f32>,
    pub targets: Targets<f32>,
}

impl Sample {
    pub fn cast<T: Real>(&self) -> (ModelInput<T>, Targets<T>) {
        (
            ModelInput {
                patch: self.input.patch.cast(),
                tiled: self.input.tiled.cast(),
                unproject: self.input.unproject.clone(),
            },
            Targets {
                mask: self.targets.mask.cast(),
                mip_labels: self.targets.mip_labels.cast(),
                mip_valid: self.targets.mip_valid.cast(),
            },
        )
    }
}

pub fn volume_tensor<T: Real>(vol: &Volume3D) -> Tensor<T> {
    let [k1, k2, k3] = vol.dims();
    let data = vol.data().iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
    Tensor::from_vec(&[k3, k1, k2, 1], data).expect("volume shape")
}

pub fn mask_tensor<T: Real>(mask: &VesselMask) -> Tensor<T> {
    let [k1, k2, k3] = mask.dims();
    let data = mask.data().iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect();
    Tensor::from_vec(&[k3, k1, k2, 1], data).expect("mask shape")
}

/// Projection, tiling and index bookkeeping for a patch.
pub fn prepare_input(config: &VcNetConfig, patch: &Volume3D) -> Result<ModelInput<f32>> {
    if patch.dims() != config.patch {
        return Err(CoreError::DimensionMismatch(format!(
            "patch {:?} vs configured {:?}",
            patch.dims(),
            config.patch
        )));
    }
    let stack = compute_mip_stack(patch, config.s, config.t, config.kind)?;
    Ok(ModelInput {
        patch: volume_tensor(patch),
        tiled: stack.tiled(),
        unproject: Unproject::from_stack(&stack)?,
    })
}

pub fn prepare_sample(config: &VcNetConfig, patch: &Volume3D, mask: &VesselMask) -> Result<Sample> {
    mask.check_pair(patch)?;
    let stack = compute_mip_stack(patch, config.s, config.t, config.kind)?;
    let labels = mip_ground_truth(mask, &stack, config.label_rule)?;
    let layout = stack.layout();
    Ok(Sample {
        input: ModelInput {
            patch: volume_tensor(patch),
            tiled: stack.tiled(),
            unproject: Unproject::from_stack(&stack)?,
        },
        targets: Targets {
            mask: mask_tensor(mask),
            mip_labels: tiled_labels(&labels, layout)?,
            mip_valid: layout.valid_mask(),
        },
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replaces the unprojected 2D features by zeros before fusion.
    pub zero_unprojected: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[k3, k1, k2, 1]`
    pub vol_prob: Option<Var>,
    /// `[rows, cols, 1]`
    pub mip_prob: Option<Var>,
    /// Final 2D stream features, `[rows, cols, c1]`.
    pub features_2d: Option<Var>,
    /// Concatenated joint embedding, `[k3, k1, k2, out3 + c1]`.
    pub fused: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub vox: Option<Var>,
    pub mip: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub vox: Option<f64>,
    pub mip: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub vol_prob: Option<Vec<f32>>,
    pub mip_prob: Option<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct VcNet {
    config: VcNetConfig,
    variant: Variant,
    params: ParamSet<f32>,
    index: BTreeMap<String, usize>,
}

struct Ctx<'a> {
    vars: &'a [Var],
    index: &'a BTreeMap<String, usize>,
}

impl Ctx<'_> {
    fn conv<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let i = *self
            .index
            .get(&format!("{name}.w"))
            .ok_or_else(|| CoreError::Config(format!("missing parameter {name}.w")))?;
        Ok(g.conv(x, self.vars[i], self.vars[i + 1])?)
    }

    fn conv_relu<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let y = self.conv(g, name, x)?;
        Ok(g.relu(y))
    }

    fn stream<T: Real>(&self, g: &mut Graph<T>, prefix: &str, x: Var, pools: &[Vec<usize>]) -> Result<Var> {
        let depth = pools.len();
        let mut skips = Vec::with_capacity(depth);
        let mut h = x;
        for l in 0..=depth {
            h = self.conv_relu(g, &format!("{prefix}.enc{l}.a"), h)?;
            h = self.conv_relu(g, &format!("{prefix}.enc{l}.b"), h)?;
            if l < depth {
                skips.push(h);
                h = g.maxpool(h, &pools[l])?;
            }
        }
        for l in (0..depth).rev() {
            h = g.upsample_nearest(h, &pools[l])?;
            h = self.conv_relu(g, &format!("{prefix}.dec{l}.up"), h)?;
            h = g.concat_channels(h, skips[l])?;
            h = self.conv_relu(g, &format!("{prefix}.dec{l}.a"), h)?;
            h = self.conv_relu(g, &format!("{prefix}.dec{l}.b"), h)?;
        }
        Ok(h)
    }
}

impl VcNet {
    pub fn new(config: VcNetConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(config.seed);
        let mut params = ParamSet::new();
        for layer in layer_plan(&config, variant) {
            let (w, b) = init.conv::<f32>(&layer.taps, layer.cin, layer.cout);
            params.insert(Parameter::new(format!("{}.w", layer.name), w))?;
            params.insert(Parameter::new(format!("{}.b", layer.name), b))?;
        }
        Ok(Self::from_parts(config, variant, params))
    }

    pub(crate) fn from_parts(config: VcNetConfig, variant: Variant, params: ParamSet<f32>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { config, variant, params, index }
    }

    pub fn config(&self) -> &VcNetConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Builds the forward graph. `vars` are the parameters bound in
    /// [`ParamSet`] order, in any precision.
    pub fn graph_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        input: &ModelInput<T>,
        opts: ForwardOptions,
    ) -> Result<ForwardVars> {
        let ctx = Ctx { vars, index: &self.index };
        let cfg = &self.config;
        let [k1, k2, k3] = cfg.patch;
        if input.patch.shape() != [k3, k1, k2, 1] {
            return Err(CoreError::DimensionMismatch(format!(
                "patch tensor {:?} vs configured {:?}",
                input.patch.shape(),
                [k3, k1, k2, 1]
            )));
        }
        let layout = cfg.layout();
        if input.unproject.m() != layout.m {
            return Err(CoreError::Config(format!(
                "index maps describe {} projections, configuration implies {}",
                input.unproject.m(),
                layout.m
            )));
        }

        let mut out = ForwardVars { vol_prob: None, mip_prob: None, features_2d: None, fused: None };
        let mut vol_feat = None;
        if self.variant != Variant::Only2d {
            let x = g.constant(input.patch.clone());
            let pools: Vec<Vec<usize>> =
                cfg.pool_schedule_3d().iter().map(|f| f.to_vec()).collect();
            vol_feat = Some(ctx.stream(g, "s3d", x, &pools)?);
        }
        let mut mip_feat = None;
        if self.variant != Variant::Only3d {
            let x = g.constant(input.tiled.clone());
            let pools = vec![vec![2, 2]; cfg.depth_2d];
            let f = ctx.stream(g, "s2d", x, &pools)?;
            let logits = ctx.conv(g, "s2d.head", f)?;
            out.mip_prob = Some(g.sigmoid(logits));
            out.features_2d = Some(f);
            mip_feat = Some(f);
        }
        match self.variant {
            Variant::Full => {
                let f2 = mip_feat.expect("full model has a 2D stream");
                let stack = g.apply(DecomposeTiled(layout), &[f2])?;
                let mut up = g.apply(input.unproject.clone(), &[stack])?;
                if opts.zero_unprojected {
                    up = g.scale(up, T::zero());
                }
                let mut h = g.concat_channels(vol_feat.expect("full model has a 3D stream"), up)?;
                out.fused = Some(h);
                for i in 0..cfg.fusion_convs {
                    h = ctx.conv_relu(g, &format!("fuse.conv{i}"), h)?;
                }
                let logits = ctx.conv(g, "fuse.head", h)?;
                out.vol_prob = Some(g.sigmoid(logits));
            }
            Variant::Only3d => {
                let logits = ctx.conv(g, "s3d.head", vol_feat.expect("3D stream"))?;
                out.vol_prob = Some(g.sigmoid(logits));
            }
            Variant::Only2d => {}
        }
        Ok(out)
    }

    /// `L = L_vox + lambda * L_mip` over whichever heads the variant has.
    pub fn graph_loss<T: Real>(&self, g: &mut Graph<T>, out: &ForwardVars, targets: &Targets<T>) -> Result<LossVars> {
        let delta = self.config.delta;
        let vox = match out.vol_prob {
            Some(p) => Some(g.dice_loss(p, targets.mask.clone(), None, delta)?),
            None => None,
        };
        let mip = match out.mip_prob {
            Some(p) => Some(g.dice_loss(
                p,
                targets.mip_labels.clone(),
                Some(targets.mip_valid.clone()),
                delta,
            )?),
            None => None,
        };
        let total = match (vox, mip) {
            (Some(v), Some(m)) => {
                let weighted = g.scale(m, T::from_f64_lossy(self.config.lambda));
                g.add(v, weighted)?
            }
            (Some(v), None) => v,
            (None, Some(m)) => m,
            (None, None) => unreachable!("every variant has a head"),
        };
        Ok(LossVars { total, vox, mip })
    }

    pub fn predict(&self, input: &ModelInput<f32>, opts: ForwardOptions) -> Result<Prediction> {
        let mut g = Graph::new();
        let vars = self.bind_constants(&mut g);
        let out = self.graph_forward(&mut g, &vars, input, opts)?;
        Ok(Prediction {
            vol_prob: out.vol_prob.map(|v| g.value(v).data().to_vec()),
            mip_prob: out.mip_prob.map(|v| g.value(v).data().to_vec()),
        })
    }

    fn bind_constants(&self, g: &mut Graph<f32>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.value.clone())).collect()
    }

    pub fn loss(&self, sample: &Sample) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let vars = self.bind_constants(&mut g);
        let out = self.graph_forward(&mut g, &vars, &sample.input, ForwardOptions::default())?;
        let l = self.graph_loss(&mut g, &out, &sample.targets)?;
        Ok(breakdown(&g, &l))
    }

    /// Loss and parameter gradients for one sample.
    pub fn gradients(&self, sample: &Sample) -> Result<(LossBreakdown, Vec<Tensor<f32>>)> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let out = self.graph_forward(&mut g, &vars, &sample.input, ForwardOptions::default())?;
        let l = self.graph_loss(&mut g, &out, &sample.targets)?;
        let report = breakdown(&g, &l);
        if !report.total.is_finite() {
            return Ok((report, Vec::new()));
        }
        g.backward(l.total)?;
        let grads = vars
            .iter()
            .zip(self.params.iter())
            .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        Ok((report, grads))
    }
}

fn breakdown<T: Real>(g: &Graph<T>, l: &LossVars) -> LossBreakdown {
    LossBreakdown {
        total: g.value(l.total).item().as_f64(),
        vox: l.vox.map(|v| g.value(v).item().as_f64()),
        mip: l.mip.map(|v| g.value(v).item().as_f64()),
    }
}

/// Non-overlapping patched inference: zero-pads to patch multiples, runs
/// every patch, thresholds `vol_prob` at `threshold` and crops back.
pub fn infer_volume(model: &VcNet, vol: &Volume3D, threshold: f32) -> Result<VesselMask> {
    let probs = infer_probabilities(model, vol)?;
    let data = probs.data().iter().map(|&p| (p >= threshold) as u8).collect();
    VesselMask::new(vol.dims(), data)
}

/// Patched probability map with the dims of `vol`.
pub fn infer_probabilities(model: &VcNet, vol: &Volume3D) -> Result<Volume3D> {
    if model.variant() == Variant::Only2d {
        return Err(CoreError::Config("the 2d-only variant has no volumetric output".into()));
    }
    let size = model.config().patch;
    let dims = vol.dims();
    let padded_dims = [0, 1, 2].map(|a| dims[a].div_ceil(size[a]) * size[a]);
    let padded = pad_to(vol, padded_dims)?;
    let specs = grid_specs(padded_dims, size);
    let results: Vec<Result<Vec<f32>>> = specs
        .par_iter()
        .map(|spec| {
            let patch = extract_patch(&padded, spec)?;
            let input = prepare_input(model.config(), &patch)?;
            let pred = model.predict(&input, ForwardOptions::default())?;
            Ok(pred.vol_prob.expect("volumetric variant"))
        })
        .collect();
    let mut out = Volume3D::zeros(dims).with_spacing(vol.spacing());
    for (spec, probs) in specs.iter().zip(results) {
        let probs = probs?;
        let [ox, oy, oz] = spec.origin;
        for z in 0..size[2] {
            for x in 0..size[0] {
                for y in 0..size[1] {
                    let (gx, gy, gz) = (ox + x, oy + y, oz + z);
                    if gx < dims[0] && gy < dims[1] && gz < dims[2] {
                        out.set(gx, gy, gz, probs[(z * size[0] + x) * size[1] + y]);
                    }
                }
            }
        }
    }
    Ok(out)
}
