//! Forward and backward kernels for the primitive catalog.
//!
//! Spatial tensors are NHWC: `(batch, height, width, channels)`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Scalar, Tensor, Trans};

/// Spatial padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding keeping the spatial size; an odd deficit puts the extra
    /// pixel on the bottom/right.
    Same,
    Valid,
}

impl Padding {
    /// Output size and leading pad for an input extent `n` and kernel `k`.
    pub fn output(self, n: usize, k: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Same => Some((n, (k - 1) / 2)),
            Padding::Valid => (n >= k).then(|| (n - k + 1, 0)),
        }
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], kern: &[usize], padding: Padding) -> Result<Self> {
        if x.len() != 4 || kern.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected NHWC input and (k,k,cin,cout) kernel, got {x:?} and {kern:?}"),
            ));
        }
        let (batch, h, w, cin) = dims4(x);
        let (k, k2, kc, cout) = dims4(kern);
        if k != k2 {
            return Err(shape_err("conv2d", format!("non-square kernel {kern:?}")));
        }
        if kc != cin {
            return Err(shape_err(
                "conv2d",
                format!("channel mismatch: input has {cin}, kernel expects {kc}"),
            ));
        }
        let (ho, pad) = padding
            .output(h, k)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {k} larger than input {h}")))?;
        let (wo, _) = padding
            .output(w, k)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {k} larger than input {w}")))?;
        Ok(ConvGeom {
            batch,
            h,
            w,
            cin,
            k,
            cout,
            ho,
            wo,
            pad,
        })
    }

    fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn cols(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// 1×1 kernels on an unpadded grid read the input directly.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0 && self.ho == self.h && self.wo == self.w
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let cols = self.cols();
        let mut out = vec![T::zero(); self.rows() * cols];
        let mut r = 0;
        for b in 0..self.batch {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = &mut out[r * cols..(r + 1) * cols];
                    for ky in 0..self.k {
                        let iy = (oy + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            let dst = (ky * self.k + kx) * self.cin;
                            row[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                        }
                    }
                    r += 1;
                }
            }
        }
        out
    }

    fn col2im<T: Scalar>(&self, cols_data: &[T]) -> Vec<T> {
        let cols = self.cols();
        let mut dx = vec![T::zero(); self.batch * self.h * self.w * self.cin];
        let mut r = 0;
        for b in 0..self.batch {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = &cols_data[r * cols..(r + 1) * cols];
                    for ky in 0..self.k {
                        let iy = (oy + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let dst = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            let src = (ky * self.k + kx) * self.cin;
                            for c in 0..self.cin {
                                dx[dst + c] += row[src + c];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
        dx
    }
}

pub fn conv2d_shape(x: &[usize], kern: &[usize], bias: &[usize], padding: Padding) -> Result<Vec<usize>> {
    let g = ConvGeom::new(x, kern, padding)?;
    if bias != [g.cout] {
        return Err(shape_err("conv2d", format!("bias shape {bias:?}, expected [{}]", g.cout)));
    }
    Ok(vec![g.batch, g.ho, g.wo, g.cout])
}

/// Cross-correlation of an NHWC batch with a `(k,k,cin,cout)` kernel, plus bias.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kern: &Tensor<T>, bias: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
    let shape = conv2d_shape(x.shape(), kern.shape(), bias.shape(), padding)?;
    let g = ConvGeom::new(x.shape(), kern.shape(), padding)?;
    let mut out = Vec::with_capacity(g.rows() * g.cout);
    for _ in 0..g.rows() {
        out.extend_from_slice(bias.data());
    }
    if g.is_pointwise() {
        gemm(g.rows(), g.cols(), g.cout, x.data(), Trans::No, kern.data(), Trans::No, &mut out, true);
    } else {
        let cols = g.im2col(x.data());
        gemm(g.rows(), g.cols(), g.cout, &cols, Trans::No, kern.data(), Trans::No, &mut out, true);
    }
    Tensor::new(shape, out)
}

/// Gradients of [`conv2d`] with respect to input (when `need_dx`), kernel
/// and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kern: &Tensor<T>,
    dy: &Tensor<T>,
    padding: Padding,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(x.shape(), kern.shape(), padding)?;
    let (m, kk, n) = (g.rows(), g.cols(), g.cout);

    let mut db = vec![T::zero(); n];
    for row in dy.data().chunks_exact(n) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }

    let mut dk = vec![T::zero(); kk * n];
    if g.is_pointwise() {
        gemm(kk, m, n, x.data(), Trans::Yes, dy.data(), Trans::No, &mut dk, false);
    } else {
        let cols = g.im2col(x.data());
        gemm(kk, m, n, &cols, Trans::Yes, dy.data(), Trans::No, &mut dk, false);
    }
    let dx = if need_dx {
        let mut dcols = vec![T::zero(); m * kk];
        gemm(m, n, kk, dy.data(), Trans::No, kern.data(), Trans::Yes, &mut dcols, false);
        let dx = if g.is_pointwise() { dcols } else { g.col2im(&dcols) };
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::new(kern.shape().to_vec(), dk)?, Tensor::new(vec![n], db)?))
}

pub fn pool_shape(x: &[usize]) -> Result<Vec<usize>> {
    if x.len() != 4 {
        return Err(shape_err("max_pool2x2", format!("expected NHWC, got {x:?}")));
    }
    let (b, h, w, c) = dims4(x);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("max_pool2x2", format!("odd spatial size {h}×{w}")));
    }
    Ok(vec![b, h / 2, w / 2, c])
}

/// Offsets of the 2×2 window in row-major order.
const WINDOW: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

fn pool_argmax<T: Scalar>(x: &[T], w: usize, c: usize, base_y: usize, base_x: usize, ch: usize, plane: usize) -> usize {
    let mut best = plane + (base_y * w + base_x) * c + ch;
    for &(dy, dx) in &WINDOW[1..] {
        let idx = plane + ((base_y + dy) * w + base_x + dx) * c + ch;
        // strict comparison keeps the first maximum on ties
        if x[idx] > x[best] {
            best = idx;
        }
    }
    best
}

pub fn max_pool2x2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = pool_shape(x.shape())?;
    let (b, h, w, c) = dims4(x.shape());
    let xd = x.data();
    let mut out = Vec::with_capacity(b * h * w * c / 4);
    for bi in 0..b {
        let plane = bi * h * w * c;
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                for ch in 0..c {
                    out.push(xd[pool_argmax(xd, w, c, 2 * oy, 2 * ox, ch, plane)]);
                }
            }
        }
    }
    Tensor::new(shape, out)
}

/// Routes each upstream gradient to the first arg-max of its window.
pub fn max_pool2x2_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = dims4(x.shape());
    let xd = x.data();
    let mut dx = vec![T::zero(); xd.len()];
    let mut it = dy.data().iter();
    for bi in 0..b {
        let plane = bi * h * w * c;
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                for ch in 0..c {
                    let g = *it.next().expect("dy size matches pooled shape");
                    dx[pool_argmax(xd, w, c, 2 * oy, 2 * ox, ch, plane)] += g;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

pub fn upsample_shape(x: &[usize]) -> Result<Vec<usize>> {
    if x.len() != 4 {
        return Err(shape_err("upsample_nearest2x", format!("expected NHWC, got {x:?}")));
    }
    Ok(vec![x[0], 2 * x[1], 2 * x[2], x[3]])
}

pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = upsample_shape(x.shape())?;
    let (b, h, w, c) = dims4(x.shape());
    let xd = x.data();
    let mut out = Vec::with_capacity(4 * xd.len());
    for bi in 0..b {
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let src = ((bi * h + oy / 2) * w + ox / 2) * c;
                out.extend_from_slice(&xd[src..src + c]);
            }
        }
    }
    Tensor::new(shape, out)
}

/// 2×2 sum-pool of the upstream gradient.
pub fn upsample_nearest2x_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = dims4(x_shape);
    let dyd = dy.data();
    let mut dx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let src = ((bi * 2 * h + oy) * 2 * w + ox) * c;
                let dst = ((bi * h + oy / 2) * w + ox / 2) * c;
                for ch in 0..c {
                    dx[dst + ch] += dyd[src + ch];
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

pub fn gap_shape(x: &[usize]) -> Result<Vec<usize>> {
    if x.len() != 4 {
        return Err(shape_err("global_avg_pool", format!("expected NHWC, got {x:?}")));
    }
    Ok(vec![x[0], x[3]])
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = gap_shape(x.shape())?;
    let (b, h, w, c) = dims4(x.shape());
    let inv = T::one() / T::lit((h * w) as f64);
    let mut out = vec![T::zero(); b * c];
    for (bi, plane) in x.data().chunks_exact(h * w * c).enumerate() {
        let acc = &mut out[bi * c..(bi + 1) * c];
        for px in plane.chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    Tensor::new(shape, out)
}

pub fn global_avg_pool_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = dims4(x_shape);
    let inv = T::one() / T::lit((h * w) as f64);
    let mut dx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        let g: Vec<T> = dy.data()[bi * c..(bi + 1) * c].iter().map(|&v| v * inv).collect();
        for _ in 0..h * w {
            dx.extend_from_slice(&g);
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

pub fn matmul_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(shape_err("matmul", format!("cannot multiply {a:?} by {b:?}")));
    }
    Ok(vec![a[0], b[1]])
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = matmul_shape(a.shape(), b.shape())?;
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), Trans::No, b.data(), Trans::No, &mut out, false);
    Tensor::new(shape, out)
}

pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut da = vec![T::zero(); m * k];
    let mut db = vec![T::zero(); k * n];
    gemm(m, n, k, dy.data(), Trans::No, b.data(), Trans::Yes, &mut da, false);
    gemm(k, m, n, a.data(), Trans::Yes, dy.data(), Trans::No, &mut db, false);
    Ok((Tensor::new(a.shape().to_vec(), da)?, Tensor::new(b.shape().to_vec(), db)?))
}

/// Shape of an elementwise binary op; a rank-1 right operand broadcasts
/// over the last axis of the left one.
pub fn binary_shape(op: &str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || (b.len() == 1 && a.last() == Some(&b[0]) && op != "mul") {
        Ok(a.to_vec())
    } else {
        Err(shape_err(op, format!("incompatible operands {a:?} and {b:?}")))
    }
}

pub fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let bd = b.data();
    let data = if a.shape() == b.shape() {
        a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let n = bd.len();
        a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % n])).collect()
    };
    Tensor::new(a.shape().to_vec(), data)
}

/// Reduces a gradient back to a broadcast operand's shape.
pub fn unbroadcast<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == target {
        return Ok(g.clone());
    }
    let n = target[0];
    let mut out = vec![T::zero(); n];
    for row in g.data().chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(target.to_vec(), out)
}

pub fn concat_shape(parts: &[&[usize]]) -> Result<Vec<usize>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat", "no inputs"))?;
    let lead = &first[..first.len() - 1];
    let mut last = 0;
    for p in parts {
        if p.len() != first.len() || &p[..p.len() - 1] != lead {
            return Err(shape_err("concat", format!("leading dims differ: {first:?} vs {p:?}")));
        }
        last += p[p.len() - 1];
    }
    let mut shape = lead.to_vec();
    shape.push(last);
    Ok(shape)
}

/// Concatenation along the last (channel) axis.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shapes: Vec<&[usize]> = parts.iter().map(|t| t.shape()).collect();
    let shape = concat_shape(&shapes)?;
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let mut out = Vec::with_capacity(rows * shape[shape.len() - 1]);
    for r in 0..rows {
        for p in parts {
            let c = p.shape()[p.rank() - 1];
            out.extend_from_slice(&p.data()[r * c..(r + 1) * c]);
        }
    }
    Tensor::new(shape, out)
}

pub fn concat_backward<T: Scalar>(shapes: &[Vec<usize>], dy: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let widths: Vec<usize> = shapes.iter().map(|s| s[s.len() - 1]).collect();
    let total: usize = widths.iter().sum();
    let rows = dy.numel() / total;
    let mut outs: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
    for row in dy.data().chunks_exact(total) {
        let mut off = 0;
        for (o, &w) in outs.iter_mut().zip(&widths) {
            o.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    outs.into_iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::new(s.clone(), d))
        .collect()
}

/// Row-wise softmax over the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| shape_err("softmax", "scalar input"))?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let c = y.shape()[y.rank() - 1];
    let mut dx = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::new(y.shape().to_vec(), dx)
}

/// Inverted-dropout keep mask: kept entries carry `1/(1-rate)`, dropped ones 0.
pub fn dropout_mask<T: Scalar, R: rand::Rng>(n: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let scale = T::lit(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn same_padding_puts_extra_pixel_bottom_right() {
        assert_eq!(Padding::Same.output(5, 3), Some((5, 1)));
        assert_eq!(Padding::Same.output(5, 1), Some((5, 0)));
        assert_eq!(Padding::Valid.output(5, 3), Some((3, 0)));
        assert_eq!(Padding::Valid.output(2, 3), None);
    }

    #[test]
    fn pool_ties_route_to_first_position() {
        let x = t(&[1, 2, 2, 1], &[1., 1., 1., 1.]);
        assert_eq!(max_pool2x2(&x).unwrap().data(), &[1.0]);
        let dx = max_pool2x2_backward(&x, &t(&[1, 1, 1, 1], &[5.])).unwrap();
        assert_eq!(dx.data(), &[5., 0., 0., 0.]);
    }

    #[test]
    fn pool_rejects_odd_sizes() {
        assert!(pool_shape(&[1, 3, 4, 1]).is_err());
    }

    #[test]
    fn concat_splits_back() {
        let a = t(&[2, 1], &[1., 2.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        let c = concat(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
        let parts = concat_backward(&[vec![2, 1], vec![2, 2]], &c).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn broadcast_add_and_unbroadcast() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2], &[10., 20.]);
        assert_eq!(binary(&a, &b, |x, y| x + y).unwrap().data(), &[11., 22., 13., 24.]);
        assert_eq!(unbroadcast(&a, &[2]).unwrap().data(), &[4., 6.]);
        assert!(binary_shape("mul", &[2, 2], &[2]).is_err());
    }
}
