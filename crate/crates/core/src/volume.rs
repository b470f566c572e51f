//! Volume and mask data model, patching and intensity preprocessing.
//!
//! Layout: a volume of dims `(k1, k2, k3)` is stored slice-major, each slice
//! a row-major `k1 x k2` image. Voxel `(x, y, z)` (x along `k1` = image row,
//! y along `k2` = image column, z = slice) lives at `(z * k1 + x) * k2 + y`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub type Dims = [usize; 3];

#[inline]
pub fn voxel_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (z * dims[0] + x) * dims[1] + y
}

#[inline]
pub fn voxel_coords(dims: Dims, i: usize) -> [usize; 3] {
    let y = i % dims[1];
    let x = (i / dims[1]) % dims[0];
    let z = i / (dims[0] * dims[1]);
    [x, y, z]
}

pub(crate) fn checked_len(dims: Dims) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        return Err(CoreError::InvalidVolume(format!("dims {dims:?} must be positive")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CoreError::DimensionOverflow(dims.iter().map(|&d| d as u64).collect()))
}

/// Dense 3D intensity grid with physical voxel spacing (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let n = checked_len(dims)?;
        if data.len() != n {
            return Err(CoreError::InvalidVolume(format!(
                "dims {dims:?} need {n} voxels, got {}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(CoreError::InvalidVolume(format!("spacing {spacing:?} must be positive")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::InvalidVolume(format!(
                "non-finite value at voxel {:?}",
                voxel_coords(dims, i)
            )));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        let n = checked_len(dims).expect("valid dims");
        Self { dims, spacing: [1.0; 3], data: vec![0.0; n] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut v = Self::zeros(dims);
        for z in 0..dims[2] {
            for x in 0..dims[0] {
                for y in 0..dims[1] {
                    v.data[voxel_index(dims, x, y, z)] = f(x, y, z);
                }
            }
        }
        v
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        assert!(spacing.iter().all(|&s| s > 0.0), "spacing must be positive");
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[voxel_index(self.dims, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = voxel_index(self.dims, x, y, z);
        self.data[i] = v;
    }

    /// Applies `f` voxelwise, keeping dims and spacing.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// One `k1 x k2` slice, row-major.
    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.dims[0] * self.dims[1];
        &self.data[z * n..(z + 1) * n]
    }
}

/// Binary vessel labels paired with a volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VesselMask {
    dims: Dims,
    data: Vec<u8>,
}

impl VesselMask {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        let n = checked_len(dims)?;
        if data.len() != n {
            return Err(CoreError::InvalidVolume(format!(
                "mask dims {dims:?} need {n} voxels, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(CoreError::InvalidVolume(format!(
                "mask value {} at voxel {:?} is not 0/1",
                data[i],
                voxel_coords(dims, i)
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn empty(dims: Dims) -> Self {
        let n = checked_len(dims).expect("valid dims");
        Self { dims, data: vec![0; n] }
    }

    pub fn full(dims: Dims) -> Self {
        let n = checked_len(dims).expect("valid dims");
        Self { dims, data: vec![1; n] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut m = Self::empty(dims);
        for i in 0..m.data.len() {
            let [x, y, z] = voxel_coords(dims, i);
            m.data[i] = f(x, y, z) as u8;
        }
        m
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[voxel_index(self.dims, x, y, z)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = voxel_index(self.dims, x, y, z);
        self.data[i] = on as u8;
    }

    /// Writes a raw voxel index; callers guarantee `i < len()`.
    #[inline]
    pub fn set_index(&mut self, i: usize, on: bool) {
        self.data[i] = on as u8;
    }

    /// Number of labeled voxels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn check_pair(&self, vol: &Volume3D) -> Result<()> {
        if self.dims != vol.dims() {
            return Err(CoreError::DimensionMismatch(format!(
                "mask {:?} vs volume {:?}",
                self.dims,
                vol.dims()
            )));
        }
        Ok(())
    }
}

/// Axis-aligned sub-box of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

impl PatchSpec {
    pub fn new(origin: [usize; 3], size: [usize; 3]) -> Self {
        Self { origin, size }
    }

    /// Checks the patch lies inside `dims` and is at least `min_depth`
    /// slices deep (the projection window must fit).
    pub fn validate(&self, dims: Dims, min_depth: usize) -> Result<()> {
        for a in 0..3 {
            if self.size[a] == 0 || self.origin[a] + self.size[a] > dims[a] {
                return Err(CoreError::Config(format!(
                    "patch {self:?} exceeds volume dims {dims:?} on axis {a}"
                )));
            }
        }
        if self.size[2] < min_depth {
            return Err(CoreError::Config(format!(
                "patch depth {} is smaller than the projection window {min_depth}",
                self.size[2]
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.origin[a] + self.size[a])
    }
}

/// Min-max rescale to exactly `[0, 1]`.
pub fn normalize_minmax(vol: &Volume3D) -> Result<Volume3D> {
    let (lo, hi) = vol.min_max();
    if !(hi > lo) {
        return Err(CoreError::DegenerateRange(lo as f64));
    }
    let (lo, range) = (lo as f64, (hi - lo) as f64);
    vol.map(|v| ((v as f64 - lo) / range) as f32)
}

/// Mirrors intensities inside `foreground` onto the foreground's own range:
/// `v' = max_fg - v + min_fg`. Voxels outside are untouched.
pub fn invert_foreground(vol: &Volume3D, foreground: &VesselMask) -> Result<Volume3D> {
    foreground.check_pair(vol)?;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (&v, &m) in vol.data().iter().zip(foreground.data()) {
        if m != 0 {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        return Ok(vol.clone());
    }
    let data = vol
        .data()
        .iter()
        .zip(foreground.data())
        .map(|(&v, &m)| if m != 0 { hi - v + lo } else { v })
        .collect();
    Volume3D::new(vol.dims(), vol.spacing(), data)
}

pub fn extract_patch(vol: &Volume3D, spec: &PatchSpec) -> Result<Volume3D> {
    spec.validate(vol.dims(), 1)?;
    let [ox, oy, oz] = spec.origin;
    let [sx, sy, sz] = spec.size;
    let mut data = Vec::with_capacity(sx * sy * sz);
    for z in oz..oz + sz {
        for x in ox..ox + sx {
            let start = voxel_index(vol.dims(), x, oy, z);
            data.extend_from_slice(&vol.data()[start..start + sy]);
        }
    }
    Volume3D::new(spec.size, vol.spacing(), data)
}

pub fn extract_mask_patch(mask: &VesselMask, spec: &PatchSpec) -> Result<VesselMask> {
    spec.validate(mask.dims(), 1)?;
    let [ox, oy, oz] = spec.origin;
    let [sx, sy, sz] = spec.size;
    let mut data = Vec::with_capacity(sx * sy * sz);
    for z in oz..oz + sz {
        for x in ox..ox + sx {
            let start = voxel_index(mask.dims(), x, oy, z);
            data.extend_from_slice(&mask.data()[start..start + sy]);
        }
    }
    VesselMask::new(spec.size, data)
}

fn check_tiling(specs: &[PatchSpec], dims: Dims) -> Result<()> {
    let n = checked_len(dims)?;
    let mut cover = vec![false; n];
    for spec in specs {
        spec.validate(dims, 1)?;
        let [ox, oy, oz] = spec.origin;
        for z in oz..oz + spec.size[2] {
            for x in ox..ox + spec.size[0] {
                for y in oy..oy + spec.size[1] {
                    let i = voxel_index(dims, x, y, z);
                    if cover[i] {
                        return Err(CoreError::Tiling {
                            voxel: [x, y, z],
                            reason: "covered by more than one patch".into(),
                        });
                    }
                    cover[i] = true;
                }
            }
        }
    }
    if let Some(i) = cover.iter().position(|&c| !c) {
        return Err(CoreError::Tiling {
            voxel: voxel_coords(dims, i),
            reason: "not covered by any patch".into(),
        });
    }
    Ok(())
}

/// Reassembles patches that tile `dims` exactly (no overlap, no gap).
pub fn stitch_patches(patches: &[Volume3D], specs: &[PatchSpec], dims: Dims) -> Result<Volume3D> {
    if patches.len() != specs.len() {
        return Err(CoreError::Config(format!(
            "{} patches for {} specs",
            patches.len(),
            specs.len()
        )));
    }
    check_tiling(specs, dims)?;
    let mut out = Volume3D::zeros(dims);
    let mut spacing = [1.0; 3];
    for (patch, spec) in patches.iter().zip(specs) {
        if patch.dims() != spec.size {
            return Err(CoreError::DimensionMismatch(format!(
                "patch {:?} vs spec size {:?}",
                patch.dims(),
                spec.size
            )));
        }
        spacing = patch.spacing();
        let [ox, oy, oz] = spec.origin;
        for z in 0..spec.size[2] {
            for x in 0..spec.size[0] {
                let src = voxel_index(spec.size, x, 0, z);
                let dst = voxel_index(dims, ox + x, oy, oz + z);
                out.data[dst..dst + spec.size[1]]
                    .copy_from_slice(&patch.data()[src..src + spec.size[1]]);
            }
        }
    }
    Ok(out.with_spacing(spacing))
}

/// Non-overlapping grid of `size` patches covering `dims` rounded up to a
/// multiple of `size` (the caller pads).
pub fn grid_specs(dims: Dims, size: [usize; 3]) -> Vec<PatchSpec> {
    let counts = [0, 1, 2].map(|a| dims[a].div_ceil(size[a]));
    let mut specs = Vec::new();
    for gz in 0..counts[2] {
        for gx in 0..counts[0] {
            for gy in 0..counts[1] {
                specs.push(PatchSpec::new([gx * size[0], gy * size[1], gz * size[2]], size));
            }
        }
    }
    specs
}

/// Zero-pads `vol` at the high end of each axis up to `dims`.
pub fn pad_to(vol: &Volume3D, dims: Dims) -> Result<Volume3D> {
    let src = vol.dims();
    if (0..3).any(|a| dims[a] < src[a]) {
        return Err(CoreError::Config(format!("cannot pad {src:?} down to {dims:?}")));
    }
    let mut out = Volume3D::zeros(dims).with_spacing(vol.spacing());
    for z in 0..src[2] {
        for x in 0..src[0] {
            let s = voxel_index(src, x, 0, z);
            let d = voxel_index(dims, x, 0, z);
            out.data[d..d + src[1]].copy_from_slice(&vol.data()[s..s + src[1]]);
        }
    }
    Ok(out)
}

/// Seeded random patch placement for training.
///
/// The first `ceil(fg_bias * count)` patches are each anchored on a randomly
/// chosen labeled voxel (when the mask has any), the rest are uniform. The
/// list is then shuffled.
pub fn sample_training_patches(
    vol: &Volume3D,
    mask: &VesselMask,
    count: usize,
    size: [usize; 3],
    seed: u64,
    fg_bias: f64,
) -> Result<Vec<PatchSpec>> {
    mask.check_pair(vol)?;
    if !(0.0..=1.0).contains(&fg_bias) {
        return Err(CoreError::Config(format!("fg-bias {fg_bias} outside [0, 1]")));
    }
    let dims = vol.dims();
    PatchSpec::new([0; 3], size).validate(dims, 1)?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg: Vec<usize> =
        mask.data().iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i).collect();
    let n_fg = if fg.is_empty() { 0 } else { (fg_bias * count as f64).ceil() as usize };
    let mut specs = Vec::with_capacity(count);
    for i in 0..count {
        let mut origin = [0usize; 3];
        if i < n_fg {
            let anchor = voxel_coords(dims, fg[rng.random_range(0..fg.len())]);
            for a in 0..3 {
                // origins whose patch contains the anchor and stays in bounds
                let lo = (anchor[a] + 1).saturating_sub(size[a]);
                let hi = anchor[a].min(dims[a] - size[a]);
                origin[a] = rng.random_range(lo..=hi);
            }
        } else {
            for a in 0..3 {
                origin[a] = rng.random_range(0..=dims[a] - size[a]);
            }
        }
        specs.push(PatchSpec::new(origin, size));
    }
    specs.shuffle(&mut rng);
    Ok(specs)
}
