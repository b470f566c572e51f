//! Same-padded, stride-1 convolution over channels-last planes and volumes.
//!
//! Forward and weight-gradient passes lower to im2col + GEMM over fixed-size
//! row chunks, so the reduction order never depends on the machine. The input
//! gradient is a forward convolution of the output gradient with the
//! spatially flipped, channel-transposed kernel.

use crate::tensor::{gemm, MatRef, Real};

/// Rows of the im2col buffer are limited to roughly this many elements.
const CHUNK_ELEMS: usize = 1 << 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    /// Spatial extents `[d, h, w]` (`d = 1` for planes).
    pub dims: [usize; 3],
    /// Kernel extents `[kd, kh, kw]`, all odd.
    pub kernel: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl ConvShape {
    fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
    }

    fn chunk_rows(&self) -> usize {
        (CHUNK_ELEMS / (self.taps() * self.cin).max(1)).max(16)
    }

    fn transposed(&self) -> ConvShape {
        ConvShape { cin: self.cout, cout: self.cin, ..*self }
    }
}

fn im2col<T: Real>(x: &[T], s: &ConvShape, p0: usize, rows: usize, cols: &mut [T]) {
    let [d, h, w] = s.dims;
    let [kd, kh, kw] = s.kernel;
    let (rd, rh, rw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let cin = s.cin;
    let row_len = s.taps() * cin;
    for r in 0..rows {
        let p = p0 + r;
        let z = (p / (h * w)) as isize;
        let y = ((p / w) % h) as isize;
        let xx = (p % w) as isize;
        let row = &mut cols[r * row_len..(r + 1) * row_len];
        let mut off = 0;
        for a in 0..kd as isize {
            let iz = z + a - rd;
            let z_ok = iz >= 0 && iz < d as isize;
            for b in 0..kh as isize {
                let iy = y + b - rh;
                let y_ok = z_ok && iy >= 0 && iy < h as isize;
                for c in 0..kw as isize {
                    let ix = xx + c - rw;
                    let dst = &mut row[off..off + cin];
                    if y_ok && ix >= 0 && ix < w as isize {
                        let src = ((iz as usize * h + iy as usize) * w + ix as usize) * cin;
                        dst.copy_from_slice(&x[src..src + cin]);
                    } else {
                        dst.fill(T::zero());
                    }
                    off += cin;
                }
            }
        }
    }
}

/// `out[p, co] = bias[co] + sum_{tap, ci} x[p + tap, ci] * w[tap, ci, co]`.
pub(crate) fn conv_forward<T: Real>(
    x: &[T],
    s: &ConvShape,
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let n = s.voxels();
    let kc = s.taps() * s.cin;
    debug_assert_eq!(x.len(), n * s.cin);
    debug_assert_eq!(w.len(), kc * s.cout);
    debug_assert_eq!(out.len(), n * s.cout);
    let wmat = MatRef::new(w, kc, s.cout);
    if s.is_pointwise() {
        gemm(MatRef::new(x, n, s.cin), wmat, T::zero(), out);
    } else {
        let chunk = s.chunk_rows();
        let mut cols = vec![T::zero(); chunk.min(n) * kc];
        let mut p0 = 0;
        while p0 < n {
            let rows = chunk.min(n - p0);
            im2col(x, s, p0, rows, &mut cols);
            gemm(
                MatRef::new(&cols, rows, kc),
                wmat,
                T::zero(),
                &mut out[p0 * s.cout..(p0 + rows) * s.cout],
            );
            p0 += rows;
        }
    }
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(s.cout) {
            for (o, &b) in row.iter_mut().zip(bias) {
                *o = *o + b;
            }
        }
    }
}

/// Gradient with respect to the convolution input.
pub(crate) fn conv_backward_input<T: Real>(dy: &[T], s: &ConvShape, w: &[T]) -> Vec<T> {
    let [kd, kh, kw] = s.kernel;
    let (cin, cout) = (s.cin, s.cout);
    // flipped[a', b', c', co, ci] = w[kd-1-a', kh-1-b', kw-1-c', ci, co]
    let mut flipped = vec![T::zero(); w.len()];
    for a in 0..kd {
        for b in 0..kh {
            for c in 0..kw {
                let src_tap = ((kd - 1 - a) * kh + (kh - 1 - b)) * kw + (kw - 1 - c);
                let dst_tap = (a * kh + b) * kw + c;
                for ci in 0..cin {
                    for co in 0..cout {
                        flipped[(dst_tap * cout + co) * cin + ci] =
                            w[(src_tap * cin + ci) * cout + co];
                    }
                }
            }
        }
    }
    let mut dx = vec![T::zero(); s.voxels() * cin];
    conv_forward(dy, &s.transposed(), &flipped, None, &mut dx);
    dx
}

/// Gradient with respect to the kernel, laid out like the kernel.
pub(crate) fn conv_backward_kernel<T: Real>(x: &[T], s: &ConvShape, dy: &[T]) -> Vec<T> {
    let n = s.voxels();
    let kc = s.taps() * s.cin;
    let mut dw = vec![T::zero(); kc * s.cout];
    if s.is_pointwise() {
        gemm(MatRef::transposed(x, s.cin, n), MatRef::new(dy, n, s.cout), T::zero(), &mut dw);
        return dw;
    }
    let chunk = s.chunk_rows();
    let mut cols = vec![T::zero(); chunk.min(n) * kc];
    let mut p0 = 0;
    while p0 < n {
        let rows = chunk.min(n - p0);
        im2col(x, s, p0, rows, &mut cols);
        gemm(
            MatRef::transposed(&cols, kc, rows),
            MatRef::new(&dy[p0 * s.cout..(p0 + rows) * s.cout], rows, s.cout),
            T::one(),
            &mut dw,
        );
        p0 += rows;
    }
    dw
}

pub(crate) fn conv_backward_bias<T: Real>(dy: &[T], cout: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; cout];
    for row in dy.chunks_exact(cout) {
        for (a, &g) in acc.iter_mut().zip(row) {
            *a += g.as_f64();
        }
    }
    acc.into_iter().map(T::from_f64_lossy).collect()
}
