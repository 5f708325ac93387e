//! Dense rank-4 `f32` tensors and the handful of kernels the tracker needs.
//!
//! Every tensor is laid out `(batch, channel, height, width)` in row-major
//! order. Operations are pure: they borrow their inputs and return fresh
//! tensors, so they can be shared freely across threads.

use std::fmt;

use crate::error::{Error, Result};

pub const BATCHNORM_EPS: f32 = 1e-5;
pub const STANDARDIZE_EPS: f32 = 1e-6;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "buffer of {} values does not fit shape {:?} ({} values)",
                data.len(),
                shape,
                len
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ni, ci, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f32) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &mut self.data[start..start + len]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects channel range `[start, start + count)` of every batch entry.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        if start + count > c {
            return Err(Error::shape(format!(
                "channel slice {}..{} out of range for {:?}",
                start,
                start + count,
                self.shape
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * count * plane);
        for ni in 0..n {
            let from = (ni * c + start) * plane;
            data.extend_from_slice(&self.data[from..from + count * plane]);
        }
        Ok(Tensor {
            shape: [n, count, h, w],
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Row-major dense matrix, used for similarity matrices and FC weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.cols {
            return Err(Error::shape(format!(
                "matrix {}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Sigmoid,
}

impl Activation {
    fn validate(self) -> Result<()> {
        match self {
            Activation::LeakyRelu(slope) if !(0.0..=1.0).contains(&slope) => Err(Error::param(
                format!("leaky relu slope {slope} outside [0, 1]"),
            )),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => leaky_relu(x, 0.0),
            Activation::LeakyRelu(slope) => leaky_relu(x, slope),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

/// `relu` is exactly `leaky_relu` with slope zero; the `+ 0.0` turns the
/// `-0.0` produced by `0 * negative` into `+0.0`.
#[inline]
pub fn leaky_relu(x: f32, slope: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        slope * x + 0.0
    }
}

/// Logistic function, kept strictly inside (0, 1) where f32 would
/// otherwise saturate.
#[inline]
pub fn sigmoid(x: f32) -> f32 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(OPEN_UNIT.0, OPEN_UNIT.1)
}

/// Smallest and largest f32 strictly inside (0, 1).
pub const OPEN_UNIT: (f32, f32) = (f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [n, cin, h, w] = input.shape();
    let [cout, kcin, kh, kw] = kernel.shape();
    if kcin != cin {
        return Err(Error::shape(format!(
            "conv2d kernel {:?} does not match input {:?}",
            kernel.shape(),
            input.shape()
        )));
    }
    if bias.len() != cout {
        return Err(Error::shape(format!(
            "conv2d bias of length {} for kernel {:?}",
            bias.len(),
            kernel.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::param("conv2d stride must be at least 1"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(format!(
            "conv2d kernel {:?} larger than padded input {:?}",
            kernel.shape(),
            input.shape()
        )));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let k = cin * kh * kw;
    let p = ho * wo;

    let mut out = vec![0.0f32; n * cout * p];
    let direct = kh == 1 && kw == 1 && stride == 1 && padding == 0;
    let mut cols = if direct { Vec::new() } else { vec![0.0f32; k * p] };

    for ni in 0..n {
        let sample = &input.data[ni * cin * h * w..(ni + 1) * cin * h * w];
        let b: &[f32] = if direct {
            sample
        } else {
            im2col(sample, [cin, h, w], [kh, kw], stride, padding, [ho, wo], &mut cols);
            &cols
        };
        let dst = &mut out[ni * cout * p..(ni + 1) * cout * p];
        for (co, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        // SAFETY: every slice is sized exactly m*k, k*n and m*n with the
        // row-major strides given below.
        unsafe {
            matrixmultiply::sgemm(
                cout,
                k,
                p,
                1.0,
                kernel.data.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                p as isize,
                1,
                1.0,
                dst.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    Tensor::new([n, cout, ho, wo], out)
}

fn im2col(
    sample: &[f32],
    [cin, h, w]: [usize; 3],
    [kh, kw]: [usize; 2],
    stride: usize,
    padding: usize,
    [ho, wo]: [usize; 2],
    cols: &mut [f32],
) {
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &sample[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

pub fn batchnorm_inference(
    input: &Tensor,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let c = input.channels();
    for (name, v) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        if v.len() != c {
            return Err(Error::shape(format!(
                "batchnorm {name} has length {} but input {:?} has {c} channels",
                v.len(),
                input.shape()
            )));
        }
    }
    if eps <= 0.0 {
        return Err(Error::param(format!("batchnorm eps {eps} must be positive")));
    }
    if let Some(i) = var.iter().position(|&v| v < 0.0) {
        return Err(Error::param(format!(
            "batchnorm variance of channel {i} is negative ({})",
            var[i]
        )));
    }
    let mut out = input.clone();
    for ni in 0..input.batch() {
        for ci in 0..c {
            let scale = gamma[ci] / (var[ci] + eps).sqrt();
            let shift = beta[ci] - mean[ci] * scale;
            for v in out.plane_mut(ni, ci) {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

pub fn activation(input: &Tensor, kind: Activation) -> Result<Tensor> {
    kind.validate()?;
    Ok(input.map(|v| kind.apply(v)))
}

pub fn global_pool(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if h * w == 0 {
        return Err(Error::shape(format!(
            "global pooling over empty spatial extent {:?}",
            input.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * c);
    for ni in 0..n {
        for ci in 0..c {
            let plane = input.plane(ni, ci);
            out.push(match mode {
                PoolMode::Max => plane.iter().copied().fold(f32::NEG_INFINITY, f32::max),
                PoolMode::Avg => plane.iter().sum::<f32>() / plane.len() as f32,
            });
        }
    }
    Tensor::new([n, c, 1, 1], out)
}

pub fn elementwise(a: &Tensor, b: &Tensor, op: ElementwiseOp) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "elementwise {:?} on mismatched shapes {:?} and {:?}",
            op,
            a.shape(),
            b.shape()
        )));
    }
    let f = match op {
        ElementwiseOp::Add => |x: f32, y: f32| x + y,
        ElementwiseOp::Sub => |x: f32, y: f32| x - y,
        ElementwiseOp::Mul => |x: f32, y: f32| x * y,
    };
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "cannot concatenate {:?} and {:?} along channels",
            a.shape(),
            b.shape()
        )));
    }
    let plane = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for ni in 0..na {
        data.extend_from_slice(&a.data[ni * ca * plane..(ni + 1) * ca * plane]);
        data.extend_from_slice(&b.data[ni * cb * plane..(ni + 1) * cb * plane]);
    }
    Tensor::new([na, ca + cb, ha, wa], data)
}

/// Per `(n, c)` plane: subtract the spatial mean and divide by the spatial
/// (population) standard deviation plus `eps`.
pub fn standardize_spatial(input: &Tensor, eps: f32) -> Result<Tensor> {
    if input.plane_len() == 0 {
        return Err(Error::shape(format!(
            "standardization over empty plane {:?}",
            input.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::param(format!("standardization eps {eps} must be positive")));
    }
    let mut out = input.clone();
    for ni in 0..input.batch() {
        for ci in 0..input.channels() {
            // per-plane moments and centring in f64: with a large offset and a
            // small spread, f32 centring alone leaves a mean of order 1e-4
            let plane = out.plane_mut(ni, ci);
            let len = plane.len() as f64;
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / len;
            let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len;
            let denom = var.sqrt() + eps as f64;
            for v in plane.iter_mut() {
                *v = ((*v as f64 - mean) / denom) as f32;
            }
        }
    }
    Ok(out)
}

/// Depthwise valid cross-correlation: each search channel is correlated with
/// the matching template channel used as a kernel.
pub fn xcorr_depthwise(search: &Tensor, template: &Tensor) -> Result<Tensor> {
    let [n, c, sh, sw] = search.shape();
    let [tn, tc, th, tw] = template.shape();
    if tn != n || tc != c {
        return Err(Error::shape(format!(
            "xcorr template {:?} incompatible with search {:?}",
            template.shape(),
            search.shape()
        )));
    }
    if th > sh || tw > sw {
        return Err(Error::shape(format!(
            "xcorr template {:?} larger than search {:?}",
            template.shape(),
            search.shape()
        )));
    }
    let (oh, ow) = (sh - th + 1, sw - tw + 1);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            let s = search.plane(ni, ci);
            let t = template.plane(ni, ci);
            let o = out.plane_mut(ni, ci);
            for ty in 0..th {
                for tx in 0..tw {
                    let weight = t[ty * tw + tx];
                    if weight == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let src = &s[(oy + ty) * sw + tx..][..ow];
                        let dst = &mut o[oy * ow..(oy + 1) * ow];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += weight * v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Similarity between every pair of spatial positions: entry `(i, j)` is the
/// dot product of the channel vectors of `q` at position `i` and `k` at `j`.
pub fn flat_similarity(q: &Tensor, k: &Tensor) -> Result<Matrix> {
    if q.shape() != k.shape() {
        return Err(Error::shape(format!(
            "similarity between {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if q.batch() != 1 {
        return Err(Error::shape(format!(
            "similarity expects a single frame, got batch {}",
            q.batch()
        )));
    }
    let c = q.channels();
    let p = q.plane_len();
    let mut out = Matrix::zeros(p, p);
    // out[p, p] = q^T[p, c] * k[c, p]
    // SAFETY: q and k hold c*p values, out holds p*p.
    unsafe {
        matrixmultiply::sgemm(
            p,
            c,
            p,
            1.0,
            q.data.as_ptr(),
            1,
            p as isize,
            k.data.as_ptr(),
            p as isize,
            1,
            0.0,
            out.data.as_mut_ptr(),
            p as isize,
            1,
        );
    }
    Ok(out)
}
