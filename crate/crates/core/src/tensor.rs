//! Dense row-major `f64` arrays and the raw kernels the tape builds on.
//!
//! Nothing in here knows about gradients. The kernels are plain loops over
//! contiguous slices; at the sizes this crate targets that is fast enough and
//! keeps the floating-point evaluation order fixed, which the determinism
//! guarantees rely on.

use std::fmt;

use crate::error::{Error, Result};

/// A dense multidimensional array. A scalar has an empty shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1-D tensor over `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Rows `[start, start + count)` along the leading axis.
    pub fn rows(&self, start: usize, count: usize) -> Tensor {
        let row = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Tensor {
            shape,
            data: self.data[start * row..(start + count) * row].to_vec(),
        }
    }

    /// Gathers rows along the leading axis.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let row = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    /// Number of values per leading-axis row.
    pub fn row_len(&self) -> usize {
        numel(&self.shape[1..])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let row = self.row_len();
        &self.data[i * row..(i + 1) * row]
    }

    /// Concatenates along the leading axis. All trailing shapes must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Shape(format!(
                    "concat rows: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }
}

// ── kernels ─────────────────────────────────────────────────────────

/// `[m,k] x [k,n] -> [m,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of a 3x3, stride 1, zero-pad 1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    fn taps(&self) -> impl Iterator<Item = (usize, usize, isize, isize)> {
        (0..3).flat_map(|kh| (0..3).map(move |kw| (kh, kw, kh as isize - 1, kw as isize - 1)))
    }
}

/// `y[n,co,i,j] = sum_{ci,kh,kw} x[n,ci,i+kh-1,j+kw-1] * w[co,ci,kh,kw]`
pub(crate) fn conv2d(x: &[f64], w: &[f64], g: ConvGeom) -> Vec<f64> {
    let ConvGeom { n, cin, cout, h, w: wd } = g;
    let plane = h * wd;
    let mut y = vec![0.0; n * cout * plane];
    for b in 0..n {
        for co in 0..cout {
            let yp = &mut y[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            for ci in 0..cin {
                let xp = &x[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                for (kh, kw, dh, dw) in g.taps() {
                    let wv = w[((co * cin + ci) * 3 + kh) * 3 + kw];
                    for i in 0..h {
                        let si = i as isize + dh;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let si = si as usize;
                        for j in 0..wd {
                            let sj = j as isize + dw;
                            if sj < 0 || sj >= wd as isize {
                                continue;
                            }
                            yp[i * wd + j] += wv * xp[si * wd + sj as usize];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv2d`] in its input: maps an output-shaped tensor back to
/// input shape.
pub(crate) fn conv2d_input_adjoint(gy: &[f64], w: &[f64], g: ConvGeom) -> Vec<f64> {
    let ConvGeom { n, cin, cout, h, w: wd } = g;
    let plane = h * wd;
    let mut gx = vec![0.0; n * cin * plane];
    for b in 0..n {
        for co in 0..cout {
            let gp = &gy[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            for ci in 0..cin {
                let xp = &mut gx[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                for (kh, kw, dh, dw) in g.taps() {
                    let wv = w[((co * cin + ci) * 3 + kh) * 3 + kw];
                    for i in 0..h {
                        let si = i as isize + dh;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let si = si as usize;
                        for j in 0..wd {
                            let sj = j as isize + dw;
                            if sj < 0 || sj >= wd as isize {
                                continue;
                            }
                            xp[si * wd + sj as usize] += wv * gp[i * wd + j];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Adjoint of [`conv2d`] in its weight.
pub(crate) fn conv2d_weight_adjoint(x: &[f64], gy: &[f64], g: ConvGeom) -> Vec<f64> {
    let ConvGeom { n, cin, cout, h, w: wd } = g;
    let plane = h * wd;
    let mut gw = vec![0.0; cout * cin * 9];
    for b in 0..n {
        for co in 0..cout {
            let gp = &gy[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            for ci in 0..cin {
                let xp = &x[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                for (kh, kw, dh, dw) in g.taps() {
                    let mut acc = 0.0;
                    for i in 0..h {
                        let si = i as isize + dh;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let si = si as usize;
                        for j in 0..wd {
                            let sj = j as isize + dw;
                            if sj < 0 || sj >= wd as isize {
                                continue;
                            }
                            acc += gp[i * wd + j] * xp[si * wd + sj as usize];
                        }
                    }
                    gw[((co * cin + ci) * 3 + kh) * 3 + kw] += acc;
                }
            }
        }
    }
    gw
}

/// 2x2 average pooling over `[planes, h, w]`, `h` and `w` even.
pub(crate) fn avgpool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let s = xp[2 * i * w + 2 * j]
                    + xp[2 * i * w + 2 * j + 1]
                    + xp[(2 * i + 1) * w + 2 * j]
                    + xp[(2 * i + 1) * w + 2 * j + 1];
                y[p * oh * ow + i * ow + j] = 0.25 * s;
            }
        }
    }
    y
}

/// Adjoint of [`avgpool2`]: spreads each value over its 2x2 block, scaled by 1/4.
pub(crate) fn avgpool2_adjoint(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut x = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let v = 0.25 * g[p * oh * ow + i * ow + j];
                let base = p * h * w;
                x[base + 2 * i * w + 2 * j] = v;
                x[base + 2 * i * w + 2 * j + 1] = v;
                x[base + (2 * i + 1) * w + 2 * j] = v;
                x[base + (2 * i + 1) * w + 2 * j + 1] = v;
            }
        }
    }
    x
}

pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= z;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xr.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    out
}

/// Squared Euclidean distance, summed in index order.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_cover_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![], vec![1.5]).unwrap().item(), 1.5);
    }

    #[test]
    fn identity_matmul() {
        let b = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(matmul(&[1.0, 0.0, 0.0, 1.0], &b, 2, 2, 2), b.to_vec());
    }

    #[test]
    fn conv_with_center_tap_is_identity() {
        let g = ConvGeom { n: 1, cin: 1, cout: 1, h: 3, w: 4 };
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv2d(&x, &w, g), x);
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        // <conv(x, w), g> == <x, A_x(g, w)> == <w, A_w(x, g)>
        let g = ConvGeom { n: 2, cin: 2, cout: 3, h: 4, w: 5 };
        let x: Vec<f64> = (0..2 * 2 * 20).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6).collect();
        let gy: Vec<f64> = (0..2 * 3 * 20).map(|i| ((i * 3 % 7) as f64) - 3.0).collect();
        let y = conv2d(&x, &w, g);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let gx = conv2d_input_adjoint(&gy, &w, g);
        let mid: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        let gw = conv2d_weight_adjoint(&x, &gy, g);
        let rhs: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - mid).abs() < 1e-9 && (lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn pool_adjoint_pairs_with_pool() {
        let x: Vec<f64> = (0..2 * 4 * 4).map(|v| v as f64 * 0.5).collect();
        let g: Vec<f64> = (0..2 * 2 * 2).map(|v| 1.0 - v as f64).collect();
        let y = avgpool2(&x, 2, 4, 4);
        let gx = avgpool2_adjoint(&g, 2, 4, 4);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_rows(&[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0], 2, 3);
        assert!((s[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((s[5] - 1.0).abs() < 1e-15);
    }
}
