//! Slice-level kernels shared by the forward and backward passes.

use super::tensor::{gemm, Scalar};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::shape("conv2d", x, w));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let g = Self {
            batch: x[0],
            in_ch: x[1],
            height: x[2],
            width: x[3],
            out_ch: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
        };
        if g.height + 2 * pad < g.kh || g.width + 2 * pad < g.kw {
            return Err(Error::shape("conv2d", x, w));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h(), self.out_w()]
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_ch {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let in_plane = g.in_ch * g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * plane]
    };
    for n in 0..g.batch {
        let xn = &x[n * in_plane..(n + 1) * in_plane];
        let on = &mut out[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
        if let Some(b) = bias {
            for (o, row) in on.chunks_mut(plane).enumerate() {
                row.fill(b[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let colref: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        gemm(g.out_ch, g.patch_len(), plane, w, false, colref, false, beta, on);
    }
    out
}

/// Returns `(dx, dw, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_h() * g.out_w();
    let in_plane = g.in_ch * g.height * g.width;
    let patch = g.patch_len();
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); g.out_ch]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * plane }];
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { patch * plane } else { 0 }];
    for n in 0..g.batch {
        let xn = &x[n * in_plane..(n + 1) * in_plane];
        let dn = &dout[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
        if let Some(db) = db.as_mut() {
            for (o, row) in dn.chunks(plane).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let colref: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            gemm(g.out_ch, plane, patch, dn, false, colref, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_plane..(n + 1) * in_plane];
            if g.is_pointwise() {
                gemm(patch, g.out_ch, plane, w, true, dn, false, T::zero(), dxn);
            } else {
                gemm(patch, g.out_ch, plane, w, true, dn, false, T::zero(), &mut dcols);
                col2im(g, &dcols, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// Pads a shape on the left with ones up to rank 4.
pub fn pad4(shape: &[usize]) -> Result<[usize; 4]> {
    if shape.len() > 4 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "broadcasting supports rank ≤ 4".into(),
        });
    }
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    Ok(out)
}

/// Result shape of broadcasting two same-rank shapes (each dim equal or 1).
pub fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, a, b)),
        })
        .collect()
}

fn strides4(shape: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let mut s = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        s[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    s
}

/// Elementwise `f(a, b)` with broadcasting to `out_shape`.
pub fn broadcast_zip<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let o = pad4(out_shape).expect("rank checked");
    let sa = strides4(pad4(a_shape).expect("rank"), o);
    let sb = strides4(pad4(b_shape).expect("rank"), o);
    let mut out = Vec::with_capacity(o.iter().product());
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..o[3] {
                    out.push(f(a[ba + i3 * sa[3]], b[bb + i3 * sb[3]]));
                }
            }
        }
    }
    out
}

/// Sums a full-size gradient down to a broadcast operand's shape.
pub fn reduce_to<T: Scalar>(grad: &[T], out_shape: &[usize], target: &[usize]) -> Vec<T> {
    if out_shape == target {
        return grad.to_vec();
    }
    let o = pad4(out_shape).expect("rank checked");
    let s = strides4(pad4(target).expect("rank"), o);
    let mut res = vec![T::zero(); target.iter().product()];
    let mut k = 0;
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let base = i0 * s[0] + i1 * s[1] + i2 * s[2];
                for i3 in 0..o[3] {
                    res[base + i3 * s[3]] += grad[k];
                    k += 1;
                }
            }
        }
    }
    res
}

/// Splits a shape around `axis` into (outer, len, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(x[idx(j)]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - m).exp();
                y[idx(j)] = e;
                s += e;
            }
            let inv = T::one() / s;
            for j in 0..len {
                y[idx(j)] *= inv;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| y[idx(j)] * dy[idx(j)]).sum();
            for j in 0..len {
                dx[idx(j)] = y[idx(j)] * (dy[idx(j)] - dot);
            }
        }
    }
    dx
}

/// Statistics of one normalization slab: every (group) set of elements
/// addressed by `members`, a list of contiguous runs `(start, len)`.
pub struct NormStats<T> {
    pub mean: T,
    pub var: T,
}

pub fn slab_stats<T: Scalar>(x: &[T], runs: &[(usize, usize)]) -> NormStats<T> {
    let mut count = 0usize;
    let mut sum = T::zero();
    for &(s, l) in runs {
        sum += x[s..s + l].iter().copied().sum::<T>();
        count += l;
    }
    let mean = sum / T::of(count as f64);
    let mut var = T::zero();
    for &(s, l) in runs {
        for &v in &x[s..s + l] {
            let d = v - mean;
            var += d * d;
        }
    }
    NormStats {
        mean,
        var: var / T::of(count as f64),
    }
}

/// Backward through `xhat = (x - mean) * rstd` for one slab, given
/// `dxhat` (already multiplied by the affine scale).
pub fn slab_norm_backward<T: Scalar>(
    xhat: &[T],
    dxhat: &[T],
    rstd: T,
    runs: &[(usize, usize)],
    dx: &mut [T],
) {
    let mut count = 0usize;
    let mut s1 = T::zero();
    let mut s2 = T::zero();
    for &(s, l) in runs {
        for k in s..s + l {
            s1 += dxhat[k];
            s2 += dxhat[k] * xhat[k];
        }
        count += l;
    }
    let m = T::of(count as f64);
    let (mean1, mean2) = (s1 / m, s2 / m);
    for &(s, l) in runs {
        for k in s..s + l {
            dx[k] += rstd * (dxhat[k] - mean1 - xhat[k] * mean2);
        }
    }
}
