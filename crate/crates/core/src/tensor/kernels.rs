//! Loop kernels behind the tape primitives. Everything here works on flat
//! row-major slices; shape validation happens in the tape layer.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.n * ho * wo
    }
}

/// Unfolds `x [N,C,H,W]` into `[C*kh*kw, N*Ho*Wo]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let ncols = g.n * plane;
    let mut cols = vec![T::zero(); g.col_rows() * ncols];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `dx`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let ncols = g.n * plane;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear weights and corner indices for one fractional sample point.
/// Out-of-range corners get `None` and contribute zero.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap<T> {
    pub y0: isize,
    pub x0: isize,
    pub wy: T,
    pub wx: T,
}

impl<T: Scalar> BilinearTap<T> {
    pub fn new(y: T, x: T) -> Self {
        let fy = y.floor();
        let fx = x.floor();
        BilinearTap {
            y0: fy.as_f64() as isize,
            x0: fx.as_f64() as isize,
            wy: y - fy,
            wx: x - fx,
        }
    }

    /// Flat offsets (within one `H x W` plane) of the four corners, row-major
    /// order (y0,x0), (y0,x1), (y1,x0), (y1,x1).
    pub fn corners(&self, h: usize, w: usize) -> [Option<usize>; 4] {
        let at = |y: isize, x: isize| {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                Some(y as usize * w + x as usize)
            } else {
                None
            }
        };
        [
            at(self.y0, self.x0),
            at(self.y0, self.x0 + 1),
            at(self.y0 + 1, self.x0),
            at(self.y0 + 1, self.x0 + 1),
        ]
    }

    pub fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.wy) * (one - self.wx),
            (one - self.wy) * self.wx,
            self.wy * (one - self.wx),
            self.wy * self.wx,
        ]
    }
}

fn corner_values<T: Scalar>(plane: &[T], idx: &[Option<usize>; 4]) -> [T; 4] {
    let v = |i: Option<usize>| i.map_or(T::zero(), |i| plane[i]);
    [v(idx[0]), v(idx[1]), v(idx[2]), v(idx[3])]
}

/// `out[n, c, p] = bilinear(x[n, c], ys[n, p], xs[n, p])`.
pub fn bilinear_forward<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, ys: &[T], xs: &[T]) -> Vec<T> {
    let p = ys.len() / n;
    let mut out = vec![T::zero(); n * c * p];
    for b in 0..n {
        for q in 0..p {
            let tap = BilinearTap::new(ys[b * p + q], xs[b * p + q]);
            let idx = tap.corners(h, w);
            let wts = tap.weights();
            for ch in 0..c {
                let plane = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let v = corner_values(plane, &idx);
                out[(b * c + ch) * p + q] = wts[0] * v[0] + wts[1] * v[1] + wts[2] * v[2] + wts[3] * v[3];
            }
        }
    }
    out
}

/// Gradients of [`bilinear_forward`] w.r.t. the sampled map and the
/// coordinates. Any of the three outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_backward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ys: &[T],
    xs: &[T],
    g: &[T],
    mut dx: Option<&mut [T]>,
    mut dys: Option<&mut [T]>,
    mut dxs: Option<&mut [T]>,
) {
    let p = ys.len() / n;
    let one = T::one();
    for b in 0..n {
        for q in 0..p {
            let tap = BilinearTap::new(ys[b * p + q], xs[b * p + q]);
            let idx = tap.corners(h, w);
            let wts = tap.weights();
            let mut gy = T::zero();
            let mut gx = T::zero();
            for ch in 0..c {
                let go = g[(b * c + ch) * p + q];
                let base = (b * c + ch) * h * w;
                let plane = &x[base..base + h * w];
                let v = corner_values(plane, &idx);
                gy += go * ((one - tap.wx) * (v[2] - v[0]) + tap.wx * (v[3] - v[1]));
                gx += go * ((one - tap.wy) * (v[1] - v[0]) + tap.wy * (v[3] - v[2]));
                if let Some(dx) = dx.as_deref_mut() {
                    for k in 0..4 {
                        if let Some(i) = idx[k] {
                            dx[base + i] += wts[k] * go;
                        }
                    }
                }
            }
            if let Some(d) = dys.as_deref_mut() {
                d[b * p + q] += gy;
            }
            if let Some(d) = dxs.as_deref_mut() {
                d[b * p + q] += gx;
            }
        }
    }
}

/// Per-axis interpolation table for half-pixel bilinear resizing
/// (source coordinate `(dst + 0.5) * in / out - 0.5`, clamped to the edge).
pub fn resize_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = resize_table(h, oh);
    let tx = resize_table(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
    let ty = resize_table(h, oh);
    let tx = resize_table(w, ow);
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let go = src[oy * ow + ox];
                let one = T::one();
                dst[y0 * w + x0] += go * (one - fy) * (one - fx);
                dst[y0 * w + x1] += go * (one - fy) * fx;
                dst[y1 * w + x0] += go * fy * (one - fx);
                dst[y1 * w + x1] += go * fy * fx;
            }
        }
    }
}

/// Strides of `b` in the index space of `a` (0 along broadcast axes), or
/// `None` when `b` does not broadcast to `a`.
pub fn broadcast_strides(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    let mut strides = vec![0; a.len()];
    let mut acc = 1;
    for i in (0..a.len()).rev() {
        if b[i] == a[i] {
            strides[i] = if b[i] == 1 { 0 } else { acc };
        } else if b[i] != 1 {
            return None;
        }
        acc *= b[i];
    }
    Some(strides)
}

/// Calls `f(a_index, b_index)` for every element of `shape`, where the
/// `b` index follows `bstrides`.
pub fn for_each_broadcast(shape: &[usize], bstrides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let last = shape[rank - 1];
    let last_stride = bstrides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut boff = 0usize;
    let mut ai = 0usize;
    while ai < total {
        let mut bi = boff;
        for _ in 0..last {
            f(ai, bi);
            ai += 1;
            bi += last_stride;
        }
        // advance the odometer over the leading axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            boff += bstrides[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            boff -= bstrides[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_channel_vector() {
        let s = broadcast_strides(&[2, 3, 2], &[1, 3, 1]).unwrap();
        let mut pairs = Vec::new();
        for_each_broadcast(&[2, 3, 2], &s, |a, b| pairs.push((a, b)));
        let bs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        assert_eq!(bs, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
        assert!(broadcast_strides(&[2, 3], &[3, 1]).is_none());
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = resize_table(4, 4);
        assert!(t.iter().enumerate().all(|(i, &(a, _, f))| a == i && f == 0.0));
        let up = resize_forward(&[3.0f64], 1, 1, 1, 3, 3);
        assert!(up.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn bilinear_corner_weights_sum_to_one() {
        let tap = BilinearTap::new(1.3f64, -0.2);
        let s: f64 = tap.weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(tap.y0, 1);
        assert_eq!(tap.x0, -1);
    }
}
