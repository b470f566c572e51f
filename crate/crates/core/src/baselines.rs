//! Model-driven vessel extraction: contrast formulas, relaxometry, Hessian
//! vesselness, adaptive region growing and plain thresholding.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::volume::{normalize_minmax, voxel_coords, voxel_index, Dims, VesselMask, Volume3D};

fn same_dims(a: &Volume3D, b: &Volume3D) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(CoreError::DimensionMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Nonlinear subtraction `S^2 - alpha * S'^2`, voxelwise.
pub fn nls_subtract(s: &Volume3D, s_prime: &Volume3D, alpha: f64) -> Result<Volume3D> {
    same_dims(s, s_prime)?;
    let data = s
        .data()
        .iter()
        .zip(s_prime.data())
        .map(|(&a, &b)| {
            let (a, b) = (a as f64, b as f64);
            (a * a - alpha * b * b) as f32
        })
        .collect();
    Volume3D::new(s.dims(), s.spacing(), data)
}

/// Min-max normalizes every map to `[0, 1]`, then averages voxelwise.
pub fn mrvg_average(maps: &[Volume3D]) -> Result<Volume3D> {
    let first = maps.first().ok_or_else(|| CoreError::Config("no maps to average".into()))?;
    let mut acc = vec![0f64; first.len()];
    for m in maps {
        same_dims(first, m)?;
        let n = normalize_minmax(m)?;
        for (a, &v) in acc.iter_mut().zip(n.data()) {
            *a += v as f64;
        }
    }
    let k = maps.len() as f64;
    Volume3D::new(first.dims(), first.spacing(), acc.into_iter().map(|v| (v / k) as f32).collect())
}

/// Zeroes `arterial` wherever the venogram reaches `threshold`. The cut-off
/// has no default; it depends on the venogram's sources.
pub fn discard_venous(arterial: &Volume3D, venogram: &Volume3D, threshold: f32) -> Result<Volume3D> {
    same_dims(arterial, venogram)?;
    if !threshold.is_finite() {
        return Err(CoreError::Config(format!("venous threshold {threshold} must be finite")));
    }
    let data = arterial.data().iter().zip(venogram.data()).map(|(&a, &v)| if v >= threshold { 0.0 } else { a }).collect();
    Volume3D::new(arterial.dims(), arterial.spacing(), data)
}

/// Closed-form two-echo fit of `S(t) = rho * exp(-t * R2*)`. `None` when
/// either signal is non-positive.
pub fn r2star_fit_voxel(s1: f64, s2: f64, te1: f64, te2: f64) -> Option<(f64, f64)> {
    if !(s1 > 0.0 && s2 > 0.0) {
        return None;
    }
    let r2 = (s1 / s2).ln() / (te2 - te1);
    Some((r2, s1 * (te1 * r2).exp()))
}

#[derive(Clone, Debug)]
pub struct R2StarFit {
    /// Relaxation rate in 1/s.
    pub r2star: Volume3D,
    pub rho: Volume3D,
    /// Voxels that could not be fitted (set to 0 in both maps).
    pub flagged: VesselMask,
}

pub fn r2star_fit(s1: &Volume3D, s2: &Volume3D, te1: f64, te2: f64) -> Result<R2StarFit> {
    same_dims(s1, s2)?;
    if !(te1 > 0.0 && te2 > te1) {
        return Err(CoreError::Config(format!("echo times must satisfy 0 < TE1 < TE2, got {te1}, {te2}")));
    }
    let n = s1.len();
    let (mut r, mut rho, mut flag) = (vec![0f32; n], vec![0f32; n], vec![0u8; n]);
    for i in 0..n {
        match r2star_fit_voxel(s1.data()[i] as f64, s2.data()[i] as f64, te1, te2) {
            Some((a, b)) => {
                r[i] = a as f32;
                rho[i] = b as f32;
            }
            None => flag[i] = 1,
        }
    }
    Ok(R2StarFit {
        r2star: Volume3D::new(s1.dims(), s1.spacing(), r)?,
        rho: Volume3D::new(s1.dims(), s1.spacing(), rho)?,
        flagged: VesselMask::new(s1.dims(), flag)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VesselnessParams {
    /// Gaussian scales in voxels, ascending.
    pub scales: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    /// Structureness constant; `None` uses half the largest Hessian norm.
    pub c: Option<f64>,
}

impl Default for VesselnessParams {
    fn default() -> Self {
        Self { scales: vec![1.0, 1.5, 2.0], alpha: 0.5, beta: 0.5, c: None }
    }
}

impl VesselnessParams {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(CoreError::Config(format!("scales {:?} must be positive", self.scales)));
        }
        if self.scales.windows(2).any(|w| w[0] > w[1]) {
            return Err(CoreError::Config(format!("scales {:?} must be sorted", self.scales)));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(CoreError::Config("alpha and beta must be positive".into()));
        }
        if let Some(c) = self.c {
            if !(c > 0.0) {
                return Err(CoreError::Config(format!("c = {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Separable Gaussian blur with edge replication, in `f64`.
fn gaussian_blur(data: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> =
        (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let ext = dims[axis] as isize;
        let mut next = vec![0f64; cur.len()];
        next.par_iter_mut().enumerate().for_each(|(i, out)| {
            let c = voxel_coords(dims, i);
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let mut q = c;
                q[axis] = (c[axis] as isize + k as isize - radius).clamp(0, ext - 1) as usize;
                acc += w * cur[voxel_index(dims, q[0], q[1], q[2])];
            }
            *out = acc;
        });
        cur = next;
    }
    cur
}

/// Scale-normalized Hessian entries `[xx, yy, zz, xy, xz, yz]` by central
/// differences with edge replication.
fn hessian(smooth: &[f64], dims: Dims, sigma: f64) -> Vec<[f64; 6]> {
    let at = |c: [isize; 3]| -> f64 {
        let q = [0, 1, 2].map(|a| c[a].clamp(0, dims[a] as isize - 1) as usize);
        smooth[voxel_index(dims, q[0], q[1], q[2])]
    };
    let s2 = sigma * sigma;
    (0..smooth.len())
        .into_par_iter()
        .map(|i| {
            let c = voxel_coords(dims, i).map(|v| v as isize);
            let shift = |d: [isize; 3]| at([c[0] + d[0], c[1] + d[1], c[2] + d[2]]);
            let v0 = at(c);
            let second = |a: usize| {
                let mut d = [0; 3];
                d[a] = 1;
                let p = shift(d);
                d[a] = -1;
                p - 2.0 * v0 + shift(d)
            };
            let mixed = |a: usize, b: usize| {
                let mut d = [0; 3];
                let mut val = 0.0;
                for (sa, sb, sign) in [(1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)] {
                    d[a] = sa;
                    d[b] = sb;
                    val += sign * shift(d);
                }
                val / 4.0
            };
            [
                s2 * second(0),
                s2 * second(1),
                s2 * second(2),
                s2 * mixed(0, 1),
                s2 * mixed(0, 2),
                s2 * mixed(1, 2),
            ]
        })
        .collect()
}

/// Eigenvalues sorted by magnitude, `|l1| <= |l2| <= |l3|`.
fn sorted_eigenvalues(h: &[f64; 6]) -> [f64; 3] {
    let m = Matrix3::new(h[0], h[3], h[4], h[3], h[1], h[5], h[4], h[5], h[2]);
    let e = SymmetricEigen::new(m).eigenvalues;
    let mut l = [e[0], e[1], e[2]];
    l.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    l
}

/// Multiscale bright-tube vesselness in `[0, 1]`, computed in voxel units.
pub fn frangi_vesselness(vol: &Volume3D, params: &VesselnessParams) -> Result<Volume3D> {
    params.validate()?;
    let dims = vol.dims();
    if dims.iter().any(|&d| d < 3) {
        return Err(CoreError::InvalidVolume(format!("vesselness needs at least 3 voxels per axis, got {dims:?}")));
    }
    let src: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    let mut best = vec![0f64; src.len()];
    let (a2, b2) = (2.0 * params.alpha * params.alpha, 2.0 * params.beta * params.beta);
    for &sigma in &params.scales {
        let h = hessian(&gaussian_blur(&src, dims, sigma), dims, sigma);
        let eig: Vec<[f64; 3]> = h.par_iter().map(sorted_eigenvalues).collect();
        let c = params.c.unwrap_or_else(|| {
            0.5 * eig.iter().map(|l| (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt()).fold(0.0, f64::max)
        });
        if c <= 0.0 {
            continue;
        }
        let c2 = 2.0 * c * c;
        for (b, l) in best.iter_mut().zip(&eig) {
            let [l1, l2, l3] = *l;
            if l2 >= 0.0 || l3 >= 0.0 {
                continue;
            }
            let ra = l2.abs() / l3.abs();
            let rb = l1.abs() / (l2 * l3).abs().sqrt();
            let s2 = l1 * l1 + l2 * l2 + l3 * l3;
            let v = (1.0 - (-ra * ra / a2).exp()) * (-rb * rb / b2).exp() * (1.0 - (-s2 / c2).exp());
            if v > *b {
                *b = v;
            }
        }
    }
    Volume3D::new(dims, vol.spacing(), best.into_iter().map(|v| v as f32).collect())
}

/// Welford mean and population variance.
#[derive(Default)]
struct Running {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    fn std(&self) -> f64 {
        if self.n > 1 { (self.m2 / self.n as f64).sqrt() } else { 0.0 }
    }
}

/// Seeded 26-connected growth. A neighbour of the region is accepted when
/// its intensity is at least `mean - k * std` of the voxels accepted so
/// far; a rejected voxel may be re-tested when reached again later. Stops
/// once the region holds `max_voxels` voxels (seeds always included).
pub fn atrg_grow(vol: &Volume3D, seeds: &[[usize; 3]], k: f64, max_voxels: usize) -> Result<VesselMask> {
    let dims = vol.dims();
    let mut mask = VesselMask::empty(dims);
    let mut queue = VecDeque::new();
    let mut stats = Running::default();
    let accept = |i: usize, mask: &mut VesselMask, queue: &mut VecDeque<usize>, stats: &mut Running| {
        mask.set_index(i, true);
        queue.push_back(i);
        stats.push(vol.data()[i] as f64);
    };
    for s in seeds {
        if (0..3).any(|a| s[a] >= dims[a]) {
            return Err(CoreError::Config(format!("seed {s:?} outside volume {dims:?}")));
        }
        let i = voxel_index(dims, s[0], s[1], s[2]);
        if mask.data()[i] == 0 {
            accept(i, &mut mask, &mut queue, &mut stats);
        }
    }
    let mut count = mask.count();
    while let Some(i) = queue.pop_front() {
        if count >= max_voxels {
            break;
        }
        let c = voxel_coords(dims, i);
        for dz in -1isize..=1 {
            for dx in -1isize..=1 {
                for dy in -1isize..=1 {
                    if (dx, dy, dz) == (0, 0, 0) || count >= max_voxels {
                        continue;
                    }
                    let q = [c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz];
                    if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as isize) {
                        continue;
                    }
                    let j = voxel_index(dims, q[0] as usize, q[1] as usize, q[2] as usize);
                    if mask.data()[j] != 0 {
                        continue;
                    }
                    if vol.data()[j] as f64 >= stats.mean - k * stats.std() {
                        accept(j, &mut mask, &mut queue, &mut stats);
                        count += 1;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// `1` where `v >= tau`.
pub fn threshold_mask(vol: &Volume3D, tau: f32) -> VesselMask {
    let data = vol.data().iter().map(|&v| (v >= tau) as u8).collect();
    VesselMask::new(vol.dims(), data).expect("dims of a valid volume")
}
