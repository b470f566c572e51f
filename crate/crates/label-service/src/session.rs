use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vcnet_core::io::{read_mask, read_volume, write_mask_with_spacing};
use vcnet_core::mip::{project_window, MipKind};
use vcnet_core::volume::voxel_index;
use vcnet_core::{CoreError, VesselMask, Volume3D};

use crate::error::{LabelError, Result};

pub const MAX_HISTORY: usize = 64;

/// Voxels whose label flipped in one edit.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Delta {
    pub set: Vec<usize>,
    pub cleared: Vec<usize>,
}

impl Delta {
    pub fn len(&self) -> usize {
        self.set.len() + self.cleared.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inverse(&self) -> Delta {
        Delta { set: self.cleared.clone(), cleared: self.set.clone() }
    }

    pub fn apply(&self, mask: &mut VesselMask) {
        for &i in &self.set {
            mask.set_index(i, true);
        }
        for &i in &self.cleared {
            mask.set_index(i, false);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BrushMode {
    Paint,
    Erase,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

/// Row-wise run-length overlay of a `height x width` binary image. Each row
/// lists `[start, length]` runs of labeled pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlay {
    pub width: usize,
    pub height: usize,
    pub rows: Vec<Vec<[usize; 2]>>,
}

impl Overlay {
    pub fn encode(width: usize, height: usize, bits: &[u8]) -> Self {
        let rows = bits
            .chunks(width.max(1))
            .take(height)
            .map(|row| {
                let mut runs = Vec::new();
                let mut y = 0;
                while y < row.len() {
                    if row[y] != 0 {
                        let start = y;
                        while y < row.len() && row[y] != 0 {
                            y += 1;
                        }
                        runs.push([start, y - start]);
                    } else {
                        y += 1;
                    }
                }
                runs
            })
            .collect();
        Self { width, height, rows }
    }

    pub fn decode(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.width * self.height];
        for (r, runs) in self.rows.iter().enumerate() {
            for &[start, len] in runs {
                out[r * self.width + start..r * self.width + start + len].fill(1);
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.rows.iter().flatten().map(|r| r[1]).sum()
    }
}

/// Gray 8-bit image with its label overlay.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct View {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub overlay: Overlay,
}

/// One volume, its editable mask and the edit history.
#[derive(Debug)]
pub struct LabelSession {
    id: String,
    volume: Volume3D,
    mask: VesselMask,
    mask_path: Option<PathBuf>,
    undo: VecDeque<Delta>,
    redo: Vec<Delta>,
    dirty: bool,
}

impl LabelSession {
    pub fn new(volume: Volume3D, mask: VesselMask) -> Result<Self> {
        mask.check_pair(&volume)?;
        let id = session_id();
        Ok(Self { id, volume, mask, mask_path: None, undo: VecDeque::new(), redo: Vec::new(), dirty: false })
    }

    /// Loads the pair. A missing mask file starts an empty mask that `save`
    /// will create.
    pub fn open(volume_path: &Path, mask_path: &Path) -> Result<Self> {
        let volume = read_volume(volume_path)?;
        let mask = match read_mask(mask_path) {
            Ok(m) => m,
            Err(CoreError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                VesselMask::empty(volume.dims())
            }
            Err(e) => return Err(e.into()),
        };
        let mut s = Self::new(volume, mask)?;
        s.mask_path = Some(mask_path.to_path_buf());
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn volume(&self) -> &Volume3D {
        &self.volume
    }

    pub fn mask(&self) -> &VesselMask {
        &self.mask
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    pub fn undo_depth(&self) -> usize {
        self.undo.len()
    }

    pub fn redo_depth(&self) -> usize {
        self.redo.len()
    }

    fn check_z(&self, z: usize) -> Result<()> {
        let k3 = self.volume.dims()[2];
        if z >= k3 {
            return Err(LabelError::OutOfRange(format!("slice {z} outside 0..{k3}")));
        }
        Ok(())
    }

    fn check_pixel(&self, p: [usize; 2]) -> Result<()> {
        let [k1, k2, _] = self.volume.dims();
        if p[0] >= k1 || p[1] >= k2 {
            return Err(LabelError::OutOfRange(format!("pixel {p:?} outside {k1}x{k2}")));
        }
        Ok(())
    }

    fn mask_slice(&self, z: usize) -> &[u8] {
        let n = self.volume.dims()[0] * self.volume.dims()[1];
        &self.mask.data()[z * n..(z + 1) * n]
    }

    /// Slice `z` windowed linearly from `[wmin, wmax]` (default: volume range).
    pub fn slice_view(&self, z: usize, wmin: Option<f32>, wmax: Option<f32>) -> Result<View> {
        self.check_z(z)?;
        let [k1, k2, _] = self.volume.dims();
        let (lo, hi) = self.window(wmin, wmax);
        Ok(View {
            width: k2,
            height: k1,
            pixels: vcnet_core::io::window_to_u8(self.volume.slice(z), lo, hi),
            overlay: self.label_slice(z)?,
        })
    }

    pub fn label_slice(&self, z: usize) -> Result<Overlay> {
        self.check_z(z)?;
        let [k1, k2, _] = self.volume.dims();
        Ok(Overlay::encode(k2, k1, self.mask_slice(z)))
    }

    /// Projection over `[z0, z0 + s)` windowed to the volume range, with the
    /// union of the mask over the same slices as overlay.
    pub fn mip_view(&self, z0: usize, s: usize, kind: MipKind) -> Result<View> {
        let [k1, k2, _] = self.volume.dims();
        let (image, _) = project_window(&self.volume, z0, s, kind)?;
        let mut union = vec![0u8; k1 * k2];
        for z in z0..z0 + s {
            for (u, &m) in union.iter_mut().zip(self.mask_slice(z)) {
                *u |= m;
            }
        }
        let (lo, hi) = self.window(None, None);
        Ok(View {
            width: k2,
            height: k1,
            pixels: vcnet_core::io::window_to_u8(&image, lo, hi),
            overlay: Overlay::encode(k2, k1, &union),
        })
    }

    fn window(&self, wmin: Option<f32>, wmax: Option<f32>) -> (f32, f32) {
        let (lo, hi) = self.volume.min_max();
        (wmin.unwrap_or(lo), wmax.unwrap_or(hi))
    }

    fn commit(&mut self, delta: Delta) -> usize {
        let n = delta.len();
        if n == 0 {
            return 0;
        }
        delta.apply(&mut self.mask);
        self.undo.push_back(delta);
        if self.undo.len() > MAX_HISTORY {
            self.undo.pop_front();
        }
        self.redo.clear();
        self.dirty = true;
        n
    }

    /// Paints or erases the union of radius-`radius` discs swept along the
    /// polyline `points` (`[row, col]`) on slice `z`. Returns changed voxels.
    pub fn brush(&mut self, z: usize, points: &[[f64; 2]], radius: f64, mode: BrushMode) -> Result<usize> {
        self.check_z(z)?;
        if points.is_empty() {
            return Err(LabelError::BadRequest("stroke has no points".into()));
        }
        if !(radius >= 0.0 && radius.is_finite()) || points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LabelError::BadRequest("radius and points must be finite, radius >= 0".into()));
        }
        let dims = self.volume.dims();
        let covered = stroke_pixels(dims[0], dims[1], points, radius);
        let mut delta = Delta::default();
        for [x, y] in covered {
            let i = voxel_index(dims, x, y, z);
            let on = self.mask.data()[i] != 0;
            match (mode, on) {
                (BrushMode::Paint, false) => delta.set.push(i),
                (BrushMode::Erase, true) => delta.cleared.push(i),
                _ => {}
            }
        }
        Ok(self.commit(delta))
    }

    /// Labels the connected region of slice `z` around `seed` whose
    /// intensities lie within `tolerance` of the seed intensity.
    pub fn flood(&mut self, z: usize, seed: [usize; 2], tolerance: f32, conn: Connectivity) -> Result<usize> {
        self.check_z(z)?;
        self.check_pixel(seed)?;
        if !(tolerance >= 0.0) {
            return Err(LabelError::BadRequest(format!("tolerance {tolerance} must be >= 0")));
        }
        let dims = self.volume.dims();
        let [k1, k2, _] = dims;
        let slice = self.volume.slice(z);
        let reference = slice[seed[0] * k2 + seed[1]];
        let mut seen = vec![false; k1 * k2];
        let mut stack = vec![seed];
        seen[seed[0] * k2 + seed[1]] = true;
        let mut delta = Delta::default();
        let offsets: &[(isize, isize)] = match conn {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        };
        while let Some([x, y]) = stack.pop() {
            let i = voxel_index(dims, x, y, z);
            if self.mask.data()[i] == 0 {
                delta.set.push(i);
            }
            for &(dx, dy) in offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= k1 as isize || ny >= k2 as isize {
                    continue;
                }
                let j = nx as usize * k2 + ny as usize;
                if !seen[j] && (slice[j] - reference).abs() <= tolerance {
                    seen[j] = true;
                    stack.push([nx as usize, ny as usize]);
                }
            }
        }
        delta.set.sort_unstable();
        Ok(self.commit(delta))
    }

    pub fn undo(&mut self) -> usize {
        let Some(d) = self.undo.pop_back() else { return 0 };
        d.inverse().apply(&mut self.mask);
        let n = d.len();
        self.redo.push(d);
        self.dirty = true;
        n
    }

    pub fn redo(&mut self) -> usize {
        let Some(d) = self.redo.pop() else { return 0 };
        d.apply(&mut self.mask);
        let n = d.len();
        self.undo.push_back(d);
        self.dirty = true;
        n
    }

    /// Labeled voxels with `z <= up_to_z`, as `[x, y, z]` in index order.
    pub fn points3d(&self, up_to_z: usize) -> Vec<[usize; 3]> {
        let [k1, k2, k3] = self.volume.dims();
        let end = (up_to_z.min(k3.saturating_sub(1)) + 1) * k1 * k2;
        self.mask.data()[..end.min(self.mask.len())]
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0)
            .map(|(i, _)| vcnet_core::volume::voxel_coords([k1, k2, k3], i))
            .collect()
    }

    /// Writes the mask to `path`, or to the path it was opened from.
    pub fn save(&mut self, path: Option<&Path>) -> Result<PathBuf> {
        let target = path
            .map(Path::to_path_buf)
            .or_else(|| self.mask_path.clone())
            .ok_or_else(|| LabelError::BadRequest("session has no mask path".into()))?;
        let written = write_mask_with_spacing(&self.mask, self.volume.spacing(), &target)?;
        self.dirty = false;
        Ok(written)
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (ex * ex + ey * ey).sqrt()
}

/// In-bounds pixels within `radius` of the polyline, row-major.
pub fn stroke_pixels(k1: usize, k2: usize, points: &[[f64; 2]], radius: f64) -> Vec<[usize; 2]> {
    let segments: Vec<([f64; 2], [f64; 2])> = if points.len() == 1 {
        vec![(points[0], points[0])]
    } else {
        points.windows(2).map(|w| (w[0], w[1])).collect()
    };
    let lo = |i: usize| points.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min) - radius;
    let hi = |i: usize| points.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max) + radius;
    let range = |i: usize, ext: usize| {
        let a = lo(i).ceil().max(0.0);
        let b = hi(i).floor().min(ext as f64 - 1.0);
        if b < a { 0..0 } else { a as usize..b as usize + 1 }
    };
    let mut out = Vec::new();
    for x in range(0, k1) {
        for y in range(1, k2) {
            let p = [x as f64, y as f64];
            if segments.iter().any(|&(a, b)| segment_distance(p, a, b) <= radius + 1e-9) {
                out.push([x, y]);
            }
        }
    }
    out
}

fn session_id() -> String {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    format!("{:016x}", nanos ^ ((std::process::id() as u64) << 32))
}
