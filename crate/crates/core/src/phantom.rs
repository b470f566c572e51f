//! Synthetic vascular phantoms with exact ground truth.
//!
//! Vessels are chains of cubic Bezier segments with a bounded turning angle,
//! rasterized with a Gaussian radial profile (peak 1, sigma = r/2, support
//! 2r). The mask is every voxel centre within `r` of a centerline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::volume::{voxel_index, Dims, VesselMask, Volume3D};

const PLACEMENT_RETRIES: usize = 200;
const SAMPLE_SPACING: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub vessels: usize,
    /// Inclusive radius range in voxels.
    pub radius: [f64; 2],
    /// Maximum turn per Bezier segment as a fraction of 90 degrees.
    pub wiggle: f64,
    /// Mean vessel signal over noise std; `None` disables noise.
    pub snr: Option<f64>,
    pub crossings: bool,
    pub kissing: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [128, 128, 32],
            vessels: 6,
            radius: [1.0, 2.0],
            wiggle: 0.5,
            snr: Some(10.0),
            crossings: true,
            kissing: true,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.radius;
        if !(0.5..=4.0).contains(&lo) || !(0.5..=4.0).contains(&hi) || lo > hi {
            return Err(CoreError::Config(format!("radius range {:?} outside [0.5, 4]", self.radius)));
        }
        if let Some(snr) = self.snr {
            if !(snr > 0.0) || !snr.is_finite() {
                return Err(CoreError::Config(format!("snr {snr} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.wiggle) {
            return Err(CoreError::Config(format!("wiggle {} outside [0, 1]", self.wiggle)));
        }
        if self.dims.iter().any(|&d| d < 4) {
            return Err(CoreError::Config(format!("dims {:?} too small", self.dims)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centerline {
    /// Dense polyline in voxel coordinates `(x, y, z)`.
    pub points: Vec<[f64; 3]>,
    pub radius: f64,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume3D,
    pub mask: VesselMask,
    /// Voxels within `2r` of some centerline (where signal is non-zero).
    pub support: VesselMask,
    pub centerlines: Vec<Centerline>,
    /// Labeled voxels over all voxels.
    pub vessel_fraction: f64,
    /// Noise standard deviation actually applied.
    pub noise_std: f64,
}

type P3 = [f64; 3];

fn sub(a: P3, b: P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn mul(a: P3, s: f64) -> P3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: P3, b: P3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: P3, b: P3) -> P3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: P3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: P3) -> P3 {
    mul(a, 1.0 / norm(a))
}

/// Euclidean distance from `p` to segment `[a, b]`.
pub fn point_segment_distance(p: P3, a: P3, b: P3) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    norm(sub(p, add(a, mul(ab, t))))
}

/// Distance from `p` to a polyline.
pub fn polyline_distance(p: P3, points: &[P3]) -> f64 {
    match points.len() {
        0 => f64::INFINITY,
        1 => norm(sub(p, points[0])),
        _ => points
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> P3 {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = norm(v);
        if n > 0.1 && n <= 1.0 {
            return mul(v, 1.0 / n);
        }
    }
}

/// Unit vector at angle `theta` from `d`, rotated about a random perpendicular axis.
fn turn(rng: &mut ChaCha8Rng, d: P3, theta: f64) -> P3 {
    let mut axis = cross(d, random_unit(rng));
    while norm(axis) < 1e-6 {
        axis = cross(d, random_unit(rng));
    }
    let perp = unit(cross(unit(axis), d));
    unit(add(mul(d, theta.cos()), mul(perp, theta.sin())))
}

fn inside(p: P3, dims: Dims) -> bool {
    (0..3).all(|a| p[a] >= -0.5 && p[a] <= dims[a] as f64 - 0.5)
}

fn bezier(p0: P3, p1: P3, p2: P3, p3: P3, t: f64) -> P3 {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    [0, 1, 2].map(|i| a * p0[i] + b * p1[i] + c * p2[i] + d * p3[i])
}

/// Grows a Bezier chain from `start` along `dir` until it leaves the volume.
fn grow(rng: &mut ChaCha8Rng, start: P3, dir: P3, dims: Dims, wiggle: f64) -> Vec<P3> {
    let max_turn = wiggle * std::f64::consts::FRAC_PI_2;
    let scale = dims.iter().copied().max().unwrap_or(1) as f64;
    let mut pts = vec![start];
    let (mut p, mut d) = (start, dir);
    for _ in 0..64 {
        let len = rng.random_range(0.15..0.3) * scale;
        let theta = rng.random_range(0.0..=max_turn);
        let nd = turn(rng, d, theta);
        let end = add(p, mul(nd, len));
        let (c1, c2) = (add(p, mul(d, len / 3.0)), sub(end, mul(nd, len / 3.0)));
        let steps = (len * 1.5 / SAMPLE_SPACING).ceil() as usize;
        for i in 1..=steps {
            let q = bezier(p, c1, c2, end, i as f64 / steps as f64);
            if !inside(q, dims) {
                return pts;
            }
            pts.push(q);
        }
        p = end;
        d = nd;
    }
    pts
}

/// Centerline through `anchor`, arriving against `back` and leaving along `fwd`.
fn chain_through(rng: &mut ChaCha8Rng, anchor: P3, back: P3, fwd: P3, dims: Dims, wiggle: f64) -> Vec<P3> {
    let dir = fwd;
    let mut back = grow(rng, anchor, back, dims, wiggle);
    let fwd = grow(rng, anchor, dir, dims, wiggle);
    back.reverse();
    back.pop();
    back.extend(fwd);
    back
}

fn polyline_length(points: &[P3]) -> f64 {
    points.windows(2).map(|w| norm(sub(w[1], w[0]))).sum()
}

/// Non-partners keep a one-voxel gap between tube surfaces. The partner
/// only has to stay clear away from the designed contact at `anchor`.
fn clearance_ok(points: &[P3], radius: f64, others: &[Centerline], partner: Option<(usize, P3)>) -> bool {
    for (j, other) in others.iter().enumerate() {
        let contact = radius + other.radius;
        let anchor = partner.filter(|&(p, _)| p == j).map(|(_, a)| a);
        // every fourth sample is well under a voxel apart
        for q in points.iter().step_by(4).chain(points.last()) {
            let near_contact = anchor.is_some_and(|a| norm(sub(*q, a)) < 3.0 * contact);
            let min_gap = if near_contact { 0.75 * contact } else { contact + 1.0 };
            if polyline_distance(*q, &other.points) < min_gap {
                return false;
            }
        }
    }
    true
}

enum Role {
    Free,
    /// Crosses vessel `j` in projection at a different depth.
    Cross(usize),
    /// Touches vessel `j`.
    Kiss(usize),
}

fn place(
    rng: &mut ChaCha8Rng,
    spec: &PhantomSpec,
    placed: &[Centerline],
    role: &Role,
) -> Option<Centerline> {
    let dims = spec.dims;
    let [rlo, rhi] = spec.radius;
    let radius = if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo };
    let min_len = 0.5 * dims.iter().copied().max().unwrap_or(1) as f64;
    let (anchor, back, dir, partner) = match *role {
        Role::Free => {
            let margin = |d: usize| (d as f64 * 0.15).max(radius);
            let anchor = [0, 1, 2].map(|a| rng.random_range(margin(dims[a])..=dims[a] as f64 - 1.0 - margin(dims[a])));
            // mostly in-plane so that vessels span the patch
            let mut dir = random_unit(rng);
            dir[2] *= 0.3;
            let dir = unit(dir);
            (anchor, mul(dir, -1.0), dir, None)
        }
        Role::Cross(j) => {
            let host = &placed[j];
            let i = rng.random_range(host.points.len() / 4..=3 * host.points.len() / 4);
            let p = host.points[i];
            let gap = host.radius + radius + 1.5 + rng.random_range(0.0..2.0);
            let z = if p[2] + gap <= dims[2] as f64 - 1.0 - radius {
                p[2] + gap
            } else if p[2] - gap >= radius {
                p[2] - gap
            } else {
                return None;
            };
            let t = sub(host.points[(i + 1).min(host.points.len() - 1)], host.points[i.saturating_sub(1)]);
            let perp = unit([-t[1], t[0], 0.0]);
            ([p[0], p[1], z], mul(perp, -1.0), perp, Some(j))
        }
        Role::Kiss(j) => {
            let host = &placed[j];
            let i = rng.random_range(host.points.len() / 4..=3 * host.points.len() / 4);
            let p = host.points[i];
            let t = unit(sub(host.points[(i + 1).min(host.points.len() - 1)], host.points[i.saturating_sub(1)]));
            let n = unit(cross(t, random_unit(rng)));
            let anchor = add(p, mul(n, host.radius + radius));
            if !inside(anchor, dims) {
                return None;
            }
            // both halves leave the contact point on the far side
            let fwd = unit(add(mul(t, 0.6), mul(n, 0.8)));
            let back = unit(add(mul(t, -0.6), mul(n, 0.8)));
            (anchor, back, fwd, Some(j))
        }
    };
    let points = chain_through(rng, anchor, back, dir, dims, spec.wiggle);
    if polyline_length(&points) < min_len {
        return None;
    }
    if !clearance_ok(&points, radius, placed, partner.map(|j| (j, anchor))) {
        return None;
    }
    Some(Centerline { points, radius })
}

fn mix_seed(seed: u64, i: u64) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed.
pub fn derive_seed(seed: u64, i: u64) -> u64 {
    mix_seed(seed, i)
}

/// Noise-free signal, mask, and the union of every vessel's `2r` support.
fn rasterize(dims: Dims, lines: &[Centerline]) -> (Vec<f32>, Vec<u8>, Vec<u8>) {
    let n = dims.iter().product();
    let mut signal = vec![0f32; n];
    let mut mask = vec![0u8; n];
    let mut support = vec![0u8; n];
    let mut dist = vec![f64::INFINITY; n];
    for line in lines {
        let r = line.radius;
        let reach = 2.0 * r;
        let sigma = r / 2.0;
        let mut touched = Vec::new();
        for w in line.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let lo = [0, 1, 2].map(|i| (a[i].min(b[i]) - reach).floor().max(0.0) as usize);
            let hi = [0, 1, 2].map(|i| ((a[i].max(b[i]) + reach).ceil() as usize).min(dims[i] - 1));
            for z in lo[2]..=hi[2] {
                for x in lo[0]..=hi[0] {
                    for y in lo[1]..=hi[1] {
                        let d = point_segment_distance([x as f64, y as f64, z as f64], a, b);
                        let i = voxel_index(dims, x, y, z);
                        if d < dist[i] {
                            if dist[i].is_infinite() {
                                touched.push(i);
                            }
                            dist[i] = d;
                        }
                    }
                }
            }
        }
        for i in touched {
            let d = dist[i];
            if d <= r {
                mask[i] = 1;
            }
            if d <= reach {
                support[i] = 1;
                let v = (-(d * d) / (2.0 * sigma * sigma)).exp() as f32;
                signal[i] = signal[i].max(v);
            }
            dist[i] = f64::INFINITY;
        }
    }
    (signal, mask, support)
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut lines: Vec<Centerline> = Vec::with_capacity(spec.vessels);
    for v in 0..spec.vessels {
        let role = match v {
            1 if spec.crossings => Role::Cross(0),
            2 if spec.kissing => Role::Kiss(0),
            _ => Role::Free,
        };
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            if let Some(c) = place(&mut rng, spec, &lines, &role) {
                placed = Some(c);
                break;
            }
        }
        match placed {
            Some(c) => lines.push(c),
            None => {
                return Err(CoreError::Placement(format!(
                    "vessel {} of {} did not fit in {:?} after {PLACEMENT_RETRIES} attempts",
                    v + 1,
                    spec.vessels,
                    spec.dims
                )))
            }
        }
    }

    let (mut signal, mask, support) = rasterize(spec.dims, &lines);
    let labeled = mask.iter().filter(|&&m| m != 0).count();
    let mut noise_std = 0.0;
    if let Some(snr) = spec.snr {
        let mean_signal = if labeled == 0 {
            1.0
        } else {
            signal.iter().zip(&mask).filter(|(_, &m)| m != 0).map(|(&s, _)| s as f64).sum::<f64>()
                / labeled as f64
        };
        noise_std = mean_signal / snr;
        let normal = Normal::new(0.0, noise_std).expect("finite std");
        let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, u64::MAX));
        for v in signal.iter_mut() {
            *v += normal.sample(&mut noise_rng) as f32;
        }
    }
    let n = signal.len();
    Ok(Phantom {
        volume: Volume3D::new(spec.dims, [1.0; 3], signal)?,
        mask: VesselMask::new(spec.dims, mask)?,
        support: VesselMask::new(spec.dims, support)?,
        centerlines: lines,
        vessel_fraction: labeled as f64 / n as f64,
        noise_std,
    })
}

/// `n` phantoms with seeds derived from `seed`.
pub fn generate_suite(n: usize, template: &PhantomSpec, seed: u64) -> Result<Vec<Phantom>> {
    (0..n)
        .into_par_iter()
        .map(|i| generate(&PhantomSpec { seed: mix_seed(seed, i as u64), ..template.clone() }))
        .collect()
}

/// Mean signal over the mask divided by the std of voxels outside every
/// vessel's support.
pub fn measured_snr(phantom: &Phantom) -> f64 {
    let (mut fg, mut n_fg) = (0.0, 0usize);
    let mut bg = Vec::new();
    let voxels = phantom.volume.data().iter().zip(phantom.mask.data()).zip(phantom.support.data());
    for ((&v, &m), &s) in voxels {
        if m != 0 {
            fg += v as f64;
            n_fg += 1;
        } else if s == 0 {
            bg.push(v as f64);
        }
    }
    let mean_bg = bg.iter().sum::<f64>() / bg.len() as f64;
    let var = bg.iter().map(|v| (v - mean_bg).powi(2)).sum::<f64>() / bg.len() as f64;
    (fg / n_fg as f64) / var.sqrt()
}
