use crate::tensor::Real;

/// Max pooling over `[d, h, w, c]` data. Returns the pooled values and, per
/// output element, the flat input index of the first maximum in scan order.
pub(crate) fn maxpool_forward<T: Real>(
    x: &[T],
    dims: [usize; 3],
    c: usize,
    f: [usize; 3],
) -> (Vec<T>, Vec<usize>) {
    let [d, h, w] = dims;
    let [od, oh, ow] = [d / f[0], h / f[1], w / f[2]];
    let n = od * oh * ow * c;
    let mut out = vec![T::zero(); n];
    let mut arg = vec![0usize; n];
    for z in 0..od {
        for y in 0..oh {
            for xx in 0..ow {
                let obase = ((z * oh + y) * ow + xx) * c;
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for a in 0..f[0] {
                        for b in 0..f[1] {
                            for e in 0..f[2] {
                                let i = (((z * f[0] + a) * h + y * f[1] + b) * w + xx * f[2] + e)
                                    * c
                                    + ch;
                                // strict comparison keeps the first maximum
                                if best_i == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out[obase + ch] = best;
                    arg[obase + ch] = best_i;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Real>(dy: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i] = dx[i] + g;
    }
    dx
}

pub(crate) fn upsample_forward<T: Real>(
    x: &[T],
    dims: [usize; 3],
    c: usize,
    f: [usize; 3],
) -> Vec<T> {
    let [d, h, w] = dims;
    let [od, oh, ow] = [d * f[0], h * f[1], w * f[2]];
    let mut out = vec![T::zero(); od * oh * ow * c];
    for z in 0..od {
        for y in 0..oh {
            for xx in 0..ow {
                let src = (((z / f[0]) * h + y / f[1]) * w + xx / f[2]) * c;
                let dst = ((z * oh + y) * ow + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

/// Sums each source element's replicas. `dims` are the source extents.
pub(crate) fn upsample_backward<T: Real>(
    dy: &[T],
    dims: [usize; 3],
    c: usize,
    f: [usize; 3],
) -> Vec<T> {
    let [d, h, w] = dims;
    let [oh, ow] = [h * f[1], w * f[2]];
    let mut dx = vec![T::zero(); d * h * w * c];
    for z in 0..d * f[0] {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((z * oh + y) * ow + xx) * c;
                let dst = (((z / f[0]) * h + y / f[1]) * w + xx / f[2]) * c;
                for ch in 0..c {
                    dx[dst + ch] = dx[dst + ch] + dy[src + ch];
                }
            }
        }
    }
    dx
}
