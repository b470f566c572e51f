//! Sliding-window intensity projections, the tiled 2D plane, and the
//! argmax-scatter unprojection back into the volume.
//!
//! Feature tensors follow the autodiff layout: a volume feature map is
//! `[k3, k1, k2, c]`, a MIP stack `[m, k1, k2, c]`, the tiled plane
//! `[rows, cols, c]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use vcnet_autodiff::{AutodiffError, CustomOp, Real, Tensor};

use crate::error::{CoreError, Result};
use crate::volume::{voxel_index, VesselMask, Volume3D};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MipKind {
    #[default]
    Max,
    Min,
}

impl std::str::FromStr for MipKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(MipKind::Max),
            "min" => Ok(MipKind::Min),
            other => Err(CoreError::Config(format!("projection kind {other:?} (expected max|min)"))),
        }
    }
}

/// Slices `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

impl Window {
    pub fn contains(&self, z: usize) -> bool {
        z >= self.start && z < self.start + self.len
    }
}

/// Number of windows of `s` slices at stride `t` that fit in `k3` slices.
pub fn mip_count(k3: usize, s: usize, t: usize) -> Result<usize> {
    if s == 0 || t == 0 {
        return Err(CoreError::Window(format!("window size {s} and stride {t} must be positive")));
    }
    if s > k3 {
        return Err(CoreError::Window(format!("window size {s} exceeds {k3} slices")));
    }
    Ok((k3 - s) / t + 1)
}

pub fn windows(k3: usize, s: usize, t: usize) -> Result<Vec<Window>> {
    let m = mip_count(k3, s, t)?;
    Ok((0..m).map(|k| Window { start: k * t, len: s }).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MipStack {
    pub k1: usize,
    pub k2: usize,
    pub k3: usize,
    pub kind: MipKind,
    pub windows: Vec<Window>,
    /// `m` row-major `k1 x k2` images.
    pub images: Vec<Vec<f32>>,
    /// Source slice of each image pixel.
    pub index_maps: Vec<Vec<usize>>,
}

impl MipStack {
    pub fn m(&self) -> usize {
        self.windows.len()
    }

    pub fn layout(&self) -> TileLayout {
        TileLayout::new(self.m(), self.k1, self.k2)
    }

    /// Images as a `[m, k1, k2, 1]` tensor.
    pub fn image_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.images.iter().flatten().map(|&v| T::from_f64_lossy(v as f64)).collect();
        Tensor::from_vec(&[self.m(), self.k1, self.k2, 1], data).expect("stack shape")
    }

    /// The images composed into the tiled plane, `[rows, cols, 1]`.
    pub fn tiled<T: Real>(&self) -> Tensor<T> {
        self.layout().compose(&self.image_tensor()).expect("stack shape")
    }
}

/// Extremum over `[z0, z0 + s)` along the slice axis with the lowest slice
/// index winning ties. Returns `(image, index_map)`.
pub fn project_window(vol: &Volume3D, z0: usize, s: usize, kind: MipKind) -> Result<(Vec<f32>, Vec<usize>)> {
    let [k1, k2, k3] = vol.dims();
    if s == 0 || z0 + s > k3 {
        return Err(CoreError::Window(format!("window [{z0}, {}) outside {k3} slices", z0 + s)));
    }
    let n = k1 * k2;
    let mut image = vol.slice(z0).to_vec();
    let mut index = vec![z0; n];
    for z in z0 + 1..z0 + s {
        let slice = vol.slice(z);
        for i in 0..n {
            let v = slice[i];
            let better = match kind {
                MipKind::Max => v > image[i],
                MipKind::Min => v < image[i],
            };
            if better {
                image[i] = v;
                index[i] = z;
            }
        }
    }
    Ok((image, index))
}

pub fn compute_mip_stack(patch: &Volume3D, s: usize, t: usize, kind: MipKind) -> Result<MipStack> {
    let [k1, k2, k3] = patch.dims();
    let windows = windows(k3, s, t)?;
    let mut images = Vec::with_capacity(windows.len());
    let mut index_maps = Vec::with_capacity(windows.len());
    for w in &windows {
        let (img, idx) = project_window(patch, w.start, w.len, kind)?;
        images.push(img);
        index_maps.push(idx);
    }
    Ok(MipStack { k1, k2, k3, kind, windows, images, index_maps })
}

/// Placement of `m` tiles of `k1 x k2` in a two-column grid. Tile `k` sits
/// at row-block `k / 2`, column-block `k % 2`; an odd `m` leaves one
/// zero padding tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub m: usize,
    pub k1: usize,
    pub k2: usize,
}

impl TileLayout {
    pub fn new(m: usize, k1: usize, k2: usize) -> Self {
        Self { m, k1, k2 }
    }

    pub fn rows(&self) -> usize {
        self.m.div_ceil(2) * self.k1
    }

    pub fn cols(&self) -> usize {
        2 * self.k2
    }

    pub fn tile_count(&self) -> usize {
        2 * self.m.div_ceil(2)
    }

    pub fn is_padding(&self, tile: usize) -> bool {
        tile >= self.m
    }

    /// Top-left pixel of tile `k`.
    pub fn origin(&self, k: usize) -> (usize, usize) {
        ((k / 2) * self.k1, (k % 2) * self.k2)
    }

    /// `[rows, cols, 1]` with 1 on real tiles and 0 on padding.
    pub fn valid_mask<T: Real>(&self) -> Tensor<T> {
        let (rows, cols) = (self.rows(), self.cols());
        let mut data = vec![T::one(); rows * cols];
        for k in self.m..self.tile_count() {
            let (r0, c0) = self.origin(k);
            for r in r0..r0 + self.k1 {
                data[r * cols + c0..r * cols + c0 + self.k2].fill(T::zero());
            }
        }
        Tensor::from_vec(&[rows, cols, 1], data).expect("layout shape")
    }

    fn check_stack(&self, shape: &[usize]) -> Result<usize, AutodiffError> {
        if shape.len() != 4 || shape[0] != self.m || shape[1] != self.k1 || shape[2] != self.k2 {
            return Err(AutodiffError::Shape(format!(
                "stack {shape:?} does not match {} tiles of {}x{}",
                self.m, self.k1, self.k2
            )));
        }
        Ok(shape[3])
    }

    fn check_plane(&self, shape: &[usize]) -> Result<usize, AutodiffError> {
        if shape.len() != 3 || shape[0] != self.rows() || shape[1] != self.cols() {
            return Err(AutodiffError::Shape(format!(
                "tiled plane {shape:?} is not {}x{} for m={} tiles of {}x{}",
                self.rows(),
                self.cols(),
                self.m,
                self.k1,
                self.k2
            )));
        }
        Ok(shape[2])
    }

    /// `[m, k1, k2, c]` to `[rows, cols, c]`.
    pub fn compose<T: Real>(&self, stack: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let c = self.check_stack(stack.shape())?;
        let (cols, row_len) = (self.cols(), self.k2 * c);
        let mut out = vec![T::zero(); self.rows() * cols * c];
        let src = stack.data();
        for k in 0..self.m {
            let (r0, c0) = self.origin(k);
            for x in 0..self.k1 {
                let s = (k * self.k1 + x) * row_len;
                let d = ((r0 + x) * cols + c0) * c;
                out[d..d + row_len].copy_from_slice(&src[s..s + row_len]);
            }
        }
        Tensor::from_vec(&[self.rows(), cols, c], out)
    }

    /// `[rows, cols, c]` to `[m, k1, k2, c]`, dropping padding tiles.
    pub fn decompose<T: Real>(&self, plane: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let c = self.check_plane(plane.shape())?;
        let (cols, row_len) = (self.cols(), self.k2 * c);
        let mut out = vec![T::zero(); self.m * self.k1 * row_len];
        let src = plane.data();
        for k in 0..self.m {
            let (r0, c0) = self.origin(k);
            for x in 0..self.k1 {
                let d = (k * self.k1 + x) * row_len;
                let s = ((r0 + x) * cols + c0) * c;
                out[d..d + row_len].copy_from_slice(&src[s..s + row_len]);
            }
        }
        Tensor::from_vec(&[self.m, self.k1, self.k2, c], out)
    }
}

/// Differentiable [`TileLayout::compose`].
pub struct ComposeTiled(pub TileLayout);

impl<T: Real> CustomOp<T> for ComposeTiled {
    fn name(&self) -> &str {
        "compose_tiled"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, AutodiffError> {
        self.0.compose(inputs[0])
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(self.0.decompose(grad).expect("grad has the output shape"))]
    }
}

/// Differentiable [`TileLayout::decompose`]; padding tiles get zero gradient.
pub struct DecomposeTiled(pub TileLayout);

impl<T: Real> CustomOp<T> for DecomposeTiled {
    fn name(&self) -> &str {
        "decompose_tiled"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, AutodiffError> {
        self.0.decompose(inputs[0])
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(self.0.compose(grad).expect("grad has the output shape"))]
    }
}

/// Scatter of per-MIP features back to their recorded source slices with
/// per-channel max fusion over contributors.
#[derive(Clone, Debug)]
pub struct Unproject {
    k1: usize,
    k2: usize,
    k3: usize,
    index_maps: Arc<Vec<Vec<usize>>>,
}

const NO_OWNER: u32 = u32::MAX;

impl Unproject {
    pub fn new(index_maps: Vec<Vec<usize>>, k1: usize, k2: usize, k3: usize) -> Result<Self> {
        for (k, map) in index_maps.iter().enumerate() {
            if map.len() != k1 * k2 {
                return Err(CoreError::Corruption(format!(
                    "index map {k} has {} entries, expected {}",
                    map.len(),
                    k1 * k2
                )));
            }
            if let Some(p) = map.iter().position(|&z| z >= k3) {
                return Err(CoreError::Corruption(format!(
                    "index map {k} pixel ({}, {}) points at slice {} of {k3}",
                    p / k2,
                    p % k2,
                    map[p]
                )));
            }
        }
        Ok(Self { k1, k2, k3, index_maps: Arc::new(index_maps) })
    }

    pub fn from_stack(stack: &MipStack) -> Result<Self> {
        Self::new(stack.index_maps.clone(), stack.k1, stack.k2, stack.k3)
    }

    pub fn m(&self) -> usize {
        self.index_maps.len()
    }

    /// Fused volume features and, per output element, the winning MIP.
    fn scatter<T: Real>(&self, features: &Tensor<T>) -> Result<(Vec<T>, Vec<u32>), AutodiffError> {
        let shape = features.shape();
        let m = self.m();
        if shape.len() != 4 || shape[0] != m || shape[1] != self.k1 || shape[2] != self.k2 {
            return Err(AutodiffError::Shape(format!(
                "unproject expects [{m}, {}, {}, c] features, got {shape:?}",
                self.k1, self.k2
            )));
        }
        let c = shape[3];
        let plane = self.k1 * self.k2;
        let mut out = vec![T::zero(); self.k3 * plane * c];
        let mut owner = vec![NO_OWNER; out.len()];
        let src = features.data();
        for (k, map) in self.index_maps.iter().enumerate() {
            for (p, &z) in map.iter().enumerate() {
                let s = (k * plane + p) * c;
                let d = (z * plane + p) * c;
                for ch in 0..c {
                    let v = src[s + ch];
                    if owner[d + ch] == NO_OWNER || v > out[d + ch] {
                        out[d + ch] = v;
                        owner[d + ch] = k as u32;
                    }
                }
            }
        }
        Ok((out, owner))
    }

    /// `[m, k1, k2, c]` features to `[k3, k1, k2, c]`.
    pub fn apply<T: Real>(&self, features: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let (out, _) = self.scatter(features)?;
        Tensor::from_vec(&[self.k3, self.k1, self.k2, features.shape()[3]], out)
    }

    /// Which MIPs scatter into voxel `(x, y, z)`, in index order.
    pub fn contributors(&self, x: usize, y: usize, z: usize) -> Vec<usize> {
        let p = x * self.k2 + y;
        (0..self.m()).filter(|&k| self.index_maps[k][p] == z).collect()
    }
}

impl<T: Real> CustomOp<T> for Unproject {
    fn name(&self) -> &str {
        "unproject"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, AutodiffError> {
        self.apply(inputs[0])
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let features = inputs[0];
        let (_, owner) = self.scatter(features).expect("validated in forward");
        let c = features.shape()[3];
        let plane = self.k1 * self.k2;
        let mut g = vec![T::zero(); features.len()];
        let gd = grad.data();
        for (i, &k) in owner.iter().enumerate() {
            if k == NO_OWNER {
                continue;
            }
            let ch = i % c;
            let p = (i / c) % plane;
            let dst = (k as usize * plane + p) * c + ch;
            g[dst] = g[dst] + gd[i];
        }
        vec![Some(Tensor::from_vec(features.shape(), g).expect("input shape"))]
    }
}

/// How the per-MIP supervision labels are projected from the 3D mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MipLabelRule {
    /// 1 where any mask voxel in the window's column is set.
    #[default]
    Union,
    /// The mask value at the recorded argmax voxel.
    Argmax,
}

/// Per-MIP binary labels, each a row-major `k1 x k2` image.
pub fn mip_ground_truth(mask: &VesselMask, stack: &MipStack, rule: MipLabelRule) -> Result<Vec<Vec<u8>>> {
    let dims = mask.dims();
    if dims != [stack.k1, stack.k2, stack.k3] {
        return Err(CoreError::DimensionMismatch(format!(
            "mask {dims:?} vs projection of {:?}",
            [stack.k1, stack.k2, stack.k3]
        )));
    }
    let plane = stack.k1 * stack.k2;
    let data = mask.data();
    let labels = match rule {
        MipLabelRule::Union => stack
            .windows
            .iter()
            .map(|w| {
                let mut out = vec![0u8; plane];
                for z in w.start..w.start + w.len {
                    for (o, &v) in out.iter_mut().zip(&data[z * plane..(z + 1) * plane]) {
                        *o |= v;
                    }
                }
                out
            })
            .collect(),
        MipLabelRule::Argmax => stack
            .index_maps
            .iter()
            .map(|map| {
                map.iter()
                    .enumerate()
                    .map(|(p, &z)| data[voxel_index(dims, p / stack.k2, p % stack.k2, z)])
                    .collect()
            })
            .collect(),
    };
    Ok(labels)
}

/// Labels composed into the tiled plane, `[rows, cols, 1]`.
pub fn tiled_labels<T: Real>(labels: &[Vec<u8>], layout: TileLayout) -> Result<Tensor<T>> {
    let data = labels.iter().flatten().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect();
    let stack = Tensor::from_vec(&[layout.m, layout.k1, layout.k2, 1], data)?;
    Ok(layout.compose(&stack)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(mip_count(16, 5, 2).unwrap(), 6);
        assert_eq!(mip_count(5, 5, 2).unwrap(), 1);
        assert_eq!(mip_count(96, 5, 2).unwrap(), 46);
        assert!(matches!(mip_count(4, 5, 2), Err(CoreError::Window(_))));
    }

    #[test]
    fn zero_patch_indexes_window_start() {
        let v = Volume3D::zeros([3, 2, 16]);
        let st = compute_mip_stack(&v, 5, 2, MipKind::Max).unwrap();
        for (k, map) in st.index_maps.iter().enumerate() {
            assert!(map.iter().all(|&z| z == 2 * k));
            assert!(st.images[k].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hot_voxel_recorded_by_three_windows() {
        let mut v = Volume3D::zeros([4, 4, 16]);
        v.set(1, 2, 8, 1.0);
        let st = compute_mip_stack(&v, 5, 2, MipKind::Max).unwrap();
        let hits: Vec<usize> = (0..st.m()).filter(|&k| st.index_maps[k][6] == 8).collect();
        assert_eq!(hits, vec![2, 3, 4]);
        let mut w = Volume3D::from_fn([4, 4, 16], |_, _, _| 1.0);
        w.set(1, 2, 8, 0.0);
        let st = compute_mip_stack(&w, 5, 2, MipKind::Min).unwrap();
        let hits: Vec<usize> = (0..st.m()).filter(|&k| st.index_maps[k][6] == 8).collect();
        assert_eq!(hits, vec![2, 3, 4]);
    }

    #[test]
    fn tiled_shapes() {
        let l = TileLayout::new(6, 128, 128);
        assert_eq!((l.rows(), l.cols()), (384, 256));
        let l = TileLayout::new(1, 128, 128);
        assert_eq!((l.rows(), l.cols(), l.tile_count()), (128, 256, 2));
        assert!(l.is_padding(1));
        let mask: Tensor<f32> = l.valid_mask();
        assert_eq!(mask.sum_f64(), (128 * 128) as f64);
    }

    #[test]
    fn decompose_rejects_bad_plane() {
        let l = TileLayout::new(3, 2, 2);
        let bad = Tensor::<f32>::zeros(&[6, 4, 1]);
        assert!(l.decompose(&bad).is_err());
    }

    #[test]
    fn single_scatter() {
        let maps = vec![vec![0, 3, 1, 2]];
        let u = Unproject::new(maps, 2, 2, 4).unwrap();
        let f = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let out = u.apply(&f).unwrap();
        assert_eq!(out.sum_f64(), 10.0);
        // voxel (x=0, y=1, z=3) gets 2.0
        assert_eq!(out.data()[(3 * 2 + 0) * 2 + 1], 2.0);
        assert!(Unproject::new(vec![vec![0, 4, 0, 0]], 2, 2, 4).is_err());
    }

    #[test]
    fn sole_negative_contributor_kept() {
        let u = Unproject::new(vec![vec![1]], 1, 1, 2).unwrap();
        let f = Tensor::from_vec(&[1, 1, 1, 1], vec![-0.5f64]).unwrap();
        assert_eq!(u.apply(&f).unwrap().data(), &[0.0, -0.5]);
    }

    #[test]
    fn labels_union_and_argmax() {
        let dims = [2, 2, 16];
        let mut mask = VesselMask::empty(dims);
        mask.set(0, 1, 8, true);
        let v = Volume3D::zeros(dims);
        let st = compute_mip_stack(&v, 5, 2, MipKind::Max).unwrap();
        let u = mip_ground_truth(&mask, &st, MipLabelRule::Union).unwrap();
        let set: Vec<usize> = (0..st.m()).filter(|&k| u[k][1] == 1).collect();
        assert_eq!(set, vec![2, 3, 4]);
        assert_eq!(u.iter().flatten().filter(|&&b| b == 1).count(), 3);
        // argmax of a zero patch is the window start; only window 4 starts at 8
        let a = mip_ground_truth(&mask, &st, MipLabelRule::Argmax).unwrap();
        let set: Vec<usize> = (0..st.m()).filter(|&k| a[k][1] == 1).collect();
        assert_eq!(set, vec![4]);
        assert_eq!(a.iter().flatten().filter(|&&b| b == 1).count(), 1);
        let full = mip_ground_truth(&VesselMask::full(dims), &st, MipLabelRule::Union).unwrap();
        assert!(full.iter().flatten().all(|&b| b == 1));
    }
}
