//! Brute-force reference implementations and the random-instance suite that
//! compares every fast primitive against them.
//!
//! The references are deliberately naive: nested loops, `f64` accumulation,
//! no shared helpers with the code under test. `selftest` and the
//! finite-difference `gradcheck` are what the `taat selftest` and
//! `taat gradcheck` commands run.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{self, ReplayTracker, Segment};
use crate::blocks::{self, AttentionParams, BatchNorm, BlockActivation, ConvBlockParams, NonLocalParams};
use crate::dfm::{dfm_gradients, dfm_loss, DfmParams, DfmSample, Orientation, WidthConfig, DEFAULT_SLOPE};
use crate::error::Result;
use crate::siamese::{BoundingBox, LABEL_NEGATIVE, LABEL_POSITIVE};
use crate::tensor::{self, Activation, ElementwiseOp, Matrix, PoolMode, Tensor};

/// Tolerance for float primitives: `|got - want| <= TOL * max(|want|, 1)`.
pub const FLOAT_TOLERANCE: f64 = 1e-5;
/// Gradient checks pass below this relative error.
pub const GRAD_TOLERANCE: f64 = 1e-3;

fn at(t: &Tensor, n: usize, c: usize, y: usize, x: usize) -> f64 {
    let [_, ch, h, w] = t.shape();
    t.data()[((n * ch + c) * h + y) * w + x] as f64
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &[f32], stride: usize, padding: usize) -> Vec<f64> {
    let [n, cin, h, w] = input.shape();
    let [cout, _, kh, kw] = kernel.shape();
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for b in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o] as f64;
                    for i in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - padding as isize;
                                let x = (ox * stride + kx) as isize - padding as isize;
                                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                    continue;
                                }
                                acc += at(input, b, i, y as usize, x as usize) * at(kernel, o, i, ky, kx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn batchnorm(input: &Tensor, bn: &BatchNorm, eps: f32) -> Vec<f64> {
    let [n, c, h, w] = input.shape();
    let mut out = Vec::with_capacity(input.len());
    for b in 0..n {
        for ch in 0..c {
            let scale = bn.gamma[ch] as f64 / (bn.var[ch] as f64 + eps as f64).sqrt();
            for y in 0..h {
                for x in 0..w {
                    out.push(scale * (at(input, b, ch, y, x) - bn.mean[ch] as f64) + bn.beta[ch] as f64);
                }
            }
        }
    }
    out
}

pub fn activation(x: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::LeakyRelu(l) => {
            if x >= 0.0 {
                x
            } else {
                l as f64 * x
            }
        }
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
    }
}

pub fn global_pool(input: &Tensor, mode: PoolMode) -> Vec<f64> {
    let [n, c, h, w] = input.shape();
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            let mut vals = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    vals.push(at(input, b, ch, y, x));
                }
            }
            out.push(match mode {
                PoolMode::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                PoolMode::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
            });
        }
    }
    out
}

pub fn elementwise(a: &Tensor, b: &Tensor, op: ElementwiseOp) -> Vec<f64> {
    let [n, c, h, w] = a.shape();
    let mut out = Vec::new();
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (p, q) = (at(a, i, ch, y, x), at(b, i, ch, y, x));
                    out.push(match op {
                        ElementwiseOp::Add => p + q,
                        ElementwiseOp::Sub => p - q,
                        ElementwiseOp::Mul => p * q,
                    });
                }
            }
        }
    }
    out
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let [n, ca, h, w] = a.shape();
    let cb = b.channels();
    let mut out = Vec::new();
    for i in 0..n {
        for c in 0..ca + cb {
            for y in 0..h {
                for x in 0..w {
                    out.push(if c < ca { at(a, i, c, y, x) } else { at(b, i, c - ca, y, x) });
                }
            }
        }
    }
    out
}

pub fn standardize_spatial(input: &Tensor, eps: f32) -> Vec<f64> {
    let [n, c, h, w] = input.shape();
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            let mut sum = 0.0;
            for y in 0..h {
                for x in 0..w {
                    sum += at(input, b, ch, y, x);
                }
            }
            let mean = sum / (h * w) as f64;
            let mut sq = 0.0;
            for y in 0..h {
                for x in 0..w {
                    sq += (at(input, b, ch, y, x) - mean).powi(2);
                }
            }
            let std = (sq / (h * w) as f64).sqrt();
            for y in 0..h {
                for x in 0..w {
                    out.push((at(input, b, ch, y, x) - mean) / (std + eps as f64));
                }
            }
        }
    }
    out
}

pub fn xcorr_depthwise(search: &Tensor, template: &Tensor) -> Vec<f64> {
    let [n, c, sh, sw] = search.shape();
    let [_, _, th, tw] = template.shape();
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..=sh - th {
                for ox in 0..=sw - tw {
                    let mut acc = 0.0;
                    for ty in 0..th {
                        for tx in 0..tw {
                            acc += at(search, b, ch, oy + ty, ox + tx) * at(template, b, ch, ty, tx);
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn flat_similarity(q: &Tensor, k: &Tensor) -> Vec<f64> {
    let [_, c, h, w] = q.shape();
    let p = h * w;
    let mut out = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += at(q, 0, ch, i / w, i % w) * at(k, 0, ch, j / w, j % w);
            }
            out.push(acc);
        }
    }
    out
}

pub fn conv_block(input: &Tensor, p: &ConvBlockParams, stride: usize, padding: usize) -> Vec<f64> {
    let conv = conv2d(input, &p.kernel, &p.bias, stride, padding);
    let per_channel = conv.len() / (input.batch() * p.kernel.shape()[0]);
    conv.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (i / per_channel) % p.kernel.shape()[0];
            let y = p.bn.gamma[c] as f64 * (v - p.bn.mean[c] as f64) / (p.bn.var[c] as f64 + tensor::BATCHNORM_EPS as f64).sqrt()
                + p.bn.beta[c] as f64;
            match p.activation {
                BlockActivation::None => y,
                BlockActivation::Relu => activation(y, Activation::Relu),
                BlockActivation::LeakyRelu(l) => activation(y, Activation::LeakyRelu(l)),
            }
        })
        .collect()
}

pub fn channel_attention(input: &Tensor, p: &AttentionParams) -> Vec<f64> {
    let pooled = global_pool(input, p.pooling);
    let hidden: Vec<f64> = (0..p.fc1.rows)
        .map(|r| (0..p.fc1.cols).map(|c| p.fc1.at(r, c) as f64 * pooled[c]).sum::<f64>().max(0.0))
        .collect();
    (0..p.fc2.rows)
        .map(|r| {
            let z: f64 = (0..p.fc2.cols).map(|c| p.fc2.at(r, c) as f64 * hidden[c]).sum();
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

pub fn apply_attention(input: &Tensor, attn: &[f32]) -> Vec<f64> {
    let [n, c, h, w] = input.shape();
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.push(at(input, b, ch, y, x) * attn[ch] as f64);
                }
            }
        }
    }
    out
}

/// Residual non-local output, built from the reference convolutions.
pub fn non_local(qk: &Tensor, value: &Tensor, p: &NonLocalParams) -> Vec<f64> {
    let [_, _, h, w] = qk.shape();
    let np = h * w;
    let q = conv_block(qk, &p.embed_q, 1, 0);
    let k = conv_block(qk, &p.embed_k, 1, 0);
    let v = conv_block(value, &p.embed_v, 1, 0);
    let ci = q.len() / np;
    let cv = v.len() / np;
    let mut agg = vec![0.0; cv * np];
    for i in 0..np {
        let logits: Vec<f64> = (0..np).map(|j| (0..ci).map(|c| q[c * np + i] * k[c * np + j]).sum()).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..cv {
            agg[c * np + i] = (0..np).map(|j| e[j] / z * v[c * np + j]).sum();
        }
    }
    let out_c = p.project_out.kernel.shape()[0];
    let mut out = Vec::with_capacity(out_c * np);
    for o in 0..out_c {
        let bn = &p.project_out.bn;
        let scale = bn.gamma[o] as f64 / (bn.var[o] as f64 + tensor::BATCHNORM_EPS as f64).sqrt();
        for i in 0..np {
            let conv: f64 = p.project_out.bias[o] as f64
                + (0..cv).map(|c| at(&p.project_out.kernel, o, c, 0, 0) * agg[c * np + i]).sum::<f64>();
            out.push(scale * (conv - bn.mean[o] as f64) + bn.beta[o] as f64 + at(value, 0, o, i / w, i % w));
        }
    }
    out
}

/// Overlap from corner coordinates, written independently of
/// [`bench::iou`].
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax, ay, aw, ah] = a.to_xywh();
    let [bx, by, bw, bh] = b.to_xywh();
    let x0 = ax.max(bx);
    let y0 = ay.max(by);
    let x1 = (ax + aw).min(bx + bw);
    let y1 = (ay + ah).min(by + bh);
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let inter = (x1 - x0) * (y1 - y0);
    inter / (aw * ah + bw * bh - inter)
}

/// Overlap by counting the centres of a `step`-spaced pixel grid.
pub fn iou_raster(a: &BoundingBox, b: &BoundingBox, step: f64) -> f64 {
    let x0 = a.left().min(b.left());
    let y0 = a.top().min(b.top());
    let x1 = a.right().max(b.right());
    let y1 = a.bottom().max(b.bottom());
    let inside = |bb: &BoundingBox, x: f64, y: f64| x >= bb.left() && x < bb.right() && y >= bb.top() && y < bb.bottom();
    let (mut inter, mut union) = (0usize, 0usize);
    let mut y = y0 + step / 2.0;
    while y < y1 {
        let mut x = x0 + step / 2.0;
        while x < x1 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
            x += step;
        }
        y += step;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn precision(results: &[BoundingBox], gt: &[BoundingBox], threshold: f64) -> f64 {
    let mut hits = 0;
    for i in 0..gt.len() {
        let dx = results[i].cx - gt[i].cx;
        let dy = results[i].cy - gt[i].cy;
        if (dx * dx + dy * dy).sqrt() < threshold {
            hits += 1;
        }
    }
    hits as f64 / gt.len() as f64
}

pub fn success(results: &[BoundingBox], gt: &[BoundingBox], threshold: f64) -> (f64, f64) {
    let rate = |t: f64| {
        let mut hits = 0;
        for i in 0..gt.len() {
            if iou(&results[i], &gt[i]) > t {
                hits += 1;
            }
        }
        hits as f64 / gt.len() as f64
    };
    let mut auc = 0.0;
    for k in 0..=20 {
        auc += rate(k as f64 / 20.0);
    }
    (rate(threshold), auc / 21.0)
}

/// Frame-by-frame replay of the reset protocol: `(inits, failures,
/// accuracy, robustness)`.
pub fn vot_trace(results: &[BoundingBox], gt: &[BoundingBox], skip: usize) -> (Vec<usize>, Vec<usize>, f64, f64) {
    let (mut inits, mut failures) = (Vec::new(), Vec::new());
    let mut overlaps = Vec::new();
    // frames still to wait before the next initialization
    let mut wait = 0;
    let mut tracking = false;
    for t in 0..gt.len() {
        if !tracking {
            if wait > 0 {
                wait -= 1;
                continue;
            }
            inits.push(t);
            tracking = true;
            continue;
        }
        let o = iou(&results[t], &gt[t]);
        if o > 0.0 {
            overlaps.push(o);
        } else {
            failures.push(t);
            tracking = false;
            wait = skip - 1;
        }
    }
    let accuracy = if overlaps.is_empty() { 0.0 } else { overlaps.iter().sum::<f64>() / overlaps.len() as f64 };
    let robustness = 100.0 * failures.len() as f64 / gt.len() as f64;
    (inits, failures, accuracy, robustness)
}

pub fn expected_average_overlap(segments: &[Segment], lengths: &[usize]) -> f64 {
    let segs: Vec<&Segment> = segments.iter().filter(|s| !s.overlaps.is_empty()).collect();
    if segs.is_empty() || lengths.is_empty() {
        return 0.0;
    }
    let mut sorted = lengths.to_vec();
    sorted.sort();
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2] as f64
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) as f64 * 0.5
    };
    let lo = ((median * 0.5).floor() as usize).max(1);
    let hi = ((median * 1.5).ceil() as usize).max(lo);
    let mut per_length = Vec::new();
    for l in lo..=hi {
        let mut phis = Vec::new();
        for s in &segs {
            let mut padded: Vec<f64> = s.overlaps.iter().take(l).copied().collect();
            if s.failed {
                padded.resize(l, 0.0);
            }
            phis.push(padded.iter().sum::<f64>() / padded.len() as f64);
        }
        per_length.push(phis.iter().sum::<f64>() / phis.len() as f64);
    }
    per_length.iter().sum::<f64>() / per_length.len() as f64
}

/// Largest `|got - want| / max(|want|, 1)`.
pub fn max_relative_error(got: &[f32], want: &[f64]) -> f64 {
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs() / w.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// One comparison run over random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn rand_bn(rng: &mut ChaCha8Rng, c: usize) -> BatchNorm {
    BatchNorm {
        mean: rand_vec(rng, c, -0.5, 0.5),
        var: rand_vec(rng, c, 0.1, 2.0),
        gamma: rand_vec(rng, c, -1.5, 1.5),
        beta: rand_vec(rng, c, -0.5, 0.5),
    }
}

fn rand_block(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize, act: BlockActivation) -> ConvBlockParams {
    let kernel = rand_tensor(rng, [cout, cin, k, k]);
    let bias = rand_vec(rng, cout, -0.5, 0.5);
    let bn = rand_bn(rng, cout);
    ConvBlockParams::new(kernel, bias, bn, act).expect("consistent block shapes")
}

fn rand_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox::from_xywh(rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0), rng.gen_range(2.0..30.0), rng.gen_range(2.0..30.0))
}

/// Random boxes near `gt`, some overlapping, some far.
fn rand_trajectory(rng: &mut ChaCha8Rng, gt: &[BoundingBox]) -> Vec<BoundingBox> {
    gt.iter()
        .map(|g| {
            let spread = [1.0, 4.0, 12.0, 40.0].choose(rng).copied().unwrap_or(4.0);
            BoundingBox::new(
                g.cx + rng.gen_range(-spread..spread),
                g.cy + rng.gen_range(-spread..spread),
                g.w * rng.gen_range(0.6..1.5),
                g.h * rng.gen_range(0.6..1.5),
            )
        })
        .collect()
}

struct Suite {
    rng: ChaCha8Rng,
    instances: usize,
    checks: Vec<OracleCheck>,
}

impl Suite {
    fn run(&mut self, name: &'static str, tolerance: f64, mut case: impl FnMut(&mut ChaCha8Rng) -> Result<f64>) -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..self.instances {
            let e = case(&mut self.rng)?;
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        self.checks.push(OracleCheck {
            name,
            instances: self.instances,
            max_error: worst,
            tolerance,
        });
        Ok(())
    }
}

fn exact(same: bool) -> f64 {
    if same {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Every primitive against its reference on `instances` random cases.
pub fn selftest(seed: u64, instances: usize) -> Result<Vec<OracleCheck>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        instances,
        checks: Vec::new(),
    };
    let tol = FLOAT_TOLERANCE;

    s.run("conv2d", tol, |r| {
        let (cin, cout, k) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..4));
        let (h, w) = (r.gen_range(k..12), r.gen_range(k..12));
        let (stride, padding) = (r.gen_range(1..3), r.gen_range(0..2));
        let x = { let shape = [r.gen_range(1..3), cin, h, w]; rand_tensor(r, shape) };
        let kern = rand_tensor(r, [cout, cin, k, k]);
        let bias = rand_vec(r, cout, -1.0, 1.0);
        let got = tensor::conv2d(&x, &kern, &bias, stride, padding)?;
        Ok(max_relative_error(got.data(), &conv2d(&x, &kern, &bias, stride, padding)))
    })?;
    s.run("batchnorm_inference", tol, |r| {
        let c = r.gen_range(1..6);
        let x = { let shape = [r.gen_range(1..3), c, r.gen_range(1..8), r.gen_range(1..8)]; rand_tensor(r, shape) };
        let bn = rand_bn(r, c);
        let got = tensor::batchnorm_inference(&x, &bn.mean, &bn.var, &bn.gamma, &bn.beta, tensor::BATCHNORM_EPS)?;
        Ok(max_relative_error(got.data(), &batchnorm(&x, &bn, tensor::BATCHNORM_EPS)))
    })?;
    s.run("activation", tol, |r| {
        let kind = match r.gen_range(0..3) {
            0 => Activation::Relu,
            1 => Activation::LeakyRelu(r.gen_range(0.0..=1.0)),
            _ => Activation::Sigmoid,
        };
        let x = { let shape = [1, r.gen_range(1..4), r.gen_range(1..9), r.gen_range(1..9)]; rand_tensor(r, shape) }.scale(6.0);
        let got = tensor::activation(&x, kind)?;
        let want: Vec<f64> = x.data().iter().map(|&v| activation(v as f64, kind)).collect();
        Ok(max_relative_error(got.data(), &want))
    })?;
    s.run("global_pool", 0.0, |r| {
        let mode = if r.gen_bool(0.5) { PoolMode::Max } else { PoolMode::Avg };
        // small dyadic values keep the f32 mean exact
        let x = Tensor::from_fn([r.gen_range(1..3), r.gen_range(1..5), 4, 4], |_, _, _, _| r.gen_range(-64i32..64) as f32 / 8.0);
        let got = tensor::global_pool(&x, mode)?;
        Ok(max_relative_error(got.data(), &global_pool(&x, mode)))
    })?;
    s.run("elementwise", 0.0, |r| {
        let op = [ElementwiseOp::Add, ElementwiseOp::Sub, ElementwiseOp::Mul][r.gen_range(0..3)];
        let shape = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..8), r.gen_range(1..8)];
        let (a, b) = (rand_tensor(r, shape), rand_tensor(r, shape));
        let got = tensor::elementwise(&a, &b, op)?;
        // exact in f32: compare after rounding the reference
        let want: Vec<f64> = elementwise(&a, &b, op).iter().map(|&v| v as f32 as f64).collect();
        Ok(max_relative_error(got.data(), &want))
    })?;
    s.run("concat_channels", 0.0, |r| {
        let (n, h, w) = (r.gen_range(1..3), r.gen_range(1..7), r.gen_range(1..7));
        let a = { let shape = [n, r.gen_range(1..4), h, w]; rand_tensor(r, shape) };
        let b = { let shape = [n, r.gen_range(1..4), h, w]; rand_tensor(r, shape) };
        let got = tensor::concat_channels(&a, &b)?;
        Ok(max_relative_error(got.data(), &concat_channels(&a, &b)))
    })?;
    s.run("standardize_spatial", tol, |r| {
        let x = { let shape = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(2..10), r.gen_range(2..10)]; rand_tensor(r, shape) };
        let got = tensor::standardize_spatial(&x, tensor::STANDARDIZE_EPS)?;
        Ok(max_relative_error(got.data(), &standardize_spatial(&x, tensor::STANDARDIZE_EPS)))
    })?;
    s.run("xcorr_depthwise", tol, |r| {
        let (n, c) = (r.gen_range(1..3), r.gen_range(1..5));
        let (th, tw) = (r.gen_range(1..5), r.gen_range(1..5));
        let search = { let shape = [n, c, th + r.gen_range(0..8), tw + r.gen_range(0..8)]; rand_tensor(r, shape) };
        let template = rand_tensor(r, [n, c, th, tw]);
        let got = tensor::xcorr_depthwise(&search, &template)?;
        Ok(max_relative_error(got.data(), &xcorr_depthwise(&search, &template)))
    })?;
    s.run("flat_similarity", tol, |r| {
        let shape = [1, r.gen_range(1..9), r.gen_range(1..6), r.gen_range(1..6)];
        let (q, k) = (rand_tensor(r, shape), rand_tensor(r, shape));
        let got: Matrix = tensor::flat_similarity(&q, &k)?;
        Ok(max_relative_error(&got.data, &flat_similarity(&q, &k)))
    })?;
    s.run("conv_block", tol, |r| {
        let act = [BlockActivation::None, BlockActivation::Relu, BlockActivation::LeakyRelu(0.1)][r.gen_range(0..3)];
        let (cin, cout, k) = (r.gen_range(1..4), r.gen_range(1..4), [1, 3][r.gen_range(0..2)]);
        let p = rand_block(r, cout, cin, k, act);
        let x = { let shape = [1, cin, r.gen_range(3..9), r.gen_range(3..9)]; rand_tensor(r, shape) };
        let pad = k / 2;
        let got = blocks::conv_block(&x, &p, 1, pad)?;
        Ok(max_relative_error(got.data(), &conv_block(&x, &p, 1, pad)))
    })?;
    s.run("channel_attention", tol, |r| {
        let reduction = [1, 2, 4][r.gen_range(0..3)];
        let c = reduction * r.gen_range(1..4);
        let pooling = if r.gen_bool(0.5) { PoolMode::Max } else { PoolMode::Avg };
        let fc1 = Matrix::new(c / reduction, c, rand_vec(r, c * c / reduction, -1.0, 1.0))?;
        let fc2 = Matrix::new(c, c / reduction, rand_vec(r, c * c / reduction, -1.0, 1.0))?;
        let p = AttentionParams::new(fc1, fc2, reduction, pooling)?;
        let x = { let shape = [1, c, r.gen_range(1..7), r.gen_range(1..7)]; rand_tensor(r, shape) };
        Ok(max_relative_error(&blocks::channel_attention(&x, &p)?, &channel_attention(&x, &p)))
    })?;
    s.run("apply_attention", 0.0, |r| {
        let x = { let shape = [r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..6)]; rand_tensor(r, shape) };
        let attn = rand_vec(r, x.channels(), 0.0, 1.0);
        let got = blocks::apply_attention(&x, &attn)?;
        let want: Vec<f64> = apply_attention(&x, &attn).iter().map(|&v| v as f32 as f64).collect();
        Ok(max_relative_error(got.data(), &want))
    })?;
    s.run("non_local", tol, |r| {
        let (cq, cv, inner) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        let none = BlockActivation::None;
        let p = NonLocalParams::new(
            rand_block(r, inner, cq, 1, none),
            rand_block(r, inner, cq, 1, none),
            rand_block(r, inner, cv, 1, none),
            rand_block(r, cv, inner, 1, none),
        )?;
        let (h, w) = (r.gen_range(1..6), r.gen_range(1..6));
        let qk = rand_tensor(r, [1, cq, h, w]);
        let value = rand_tensor(r, [1, cv, h, w]);
        Ok(max_relative_error(blocks::non_local(&qk, &value, &p)?.data(), &non_local(&qk, &value, &p)))
    })?;

    s.run("iou (analytic)", 1e-9, |r| {
        let (a, b) = (rand_box(r), rand_box(r));
        Ok((bench::iou(&a, &b) - iou(&a, &b)).abs())
    })?;
    s.run("iou (rasterized, 1px)", 2e-2, |r| {
        // whole-pixel boxes so a 1px raster counts areas exactly
        let ib = |r: &mut ChaCha8Rng| {
            BoundingBox::from_xywh(r.gen_range(0..40) as f64, r.gen_range(0..40) as f64, r.gen_range(2..25) as f64, r.gen_range(2..25) as f64)
        };
        let (a, b) = (ib(r), ib(r));
        Ok((bench::iou(&a, &b) - iou_raster(&a, &b, 1.0)).abs())
    })?;
    s.run("precision", 0.0, |r| {
        let gt: Vec<BoundingBox> = (0..r.gen_range(1..40)).map(|_| rand_box(r)).collect();
        let res = rand_trajectory(r, &gt);
        let t = r.gen_range(1.0..20.0);
        Ok(exact(bench::precision(&res, &gt, t)? == precision(&res, &gt, t)))
    })?;
    s.run("success", 0.0, |r| {
        let gt: Vec<BoundingBox> = (0..r.gen_range(1..40)).map(|_| rand_box(r)).collect();
        let res = rand_trajectory(r, &gt);
        let t = r.gen_range(0.0..1.0);
        Ok(exact(bench::success(&res, &gt, t)? == success(&res, &gt, t)))
    })?;
    s.run("vot_eval", 0.0, |r| {
        let n = r.gen_range(2..60);
        let gt: Vec<BoundingBox> = (0..n).map(|_| rand_box(r)).collect();
        let res = rand_trajectory(r, &gt);
        let skip = r.gen_range(1..8);
        let got = bench::vot_eval(&mut ReplayTracker { boxes: res.clone() }, &gt, skip)?;
        let (inits, failures, a, rob) = vot_trace(&res, &gt, skip);
        let eao_err = (bench::expected_average_overlap(&got.segments, &[n]) - expected_average_overlap(&got.segments, &[n])).abs();
        Ok(exact(got.inits == inits && got.failures == failures && got.robustness == rob && (got.accuracy - a).abs() < 1e-12 && eao_err < 1e-12))
    })?;
    s.run("generate_sequence (blackout mean, boxes in bounds)", 0.0, |r| {
        use crate::bench::{render_sequence, Degradation, GenSpec, Scheme};
        let spec = GenSpec {
            seed: r.gen(),
            index: r.gen_range(0..4),
            frames: 12,
            ..GenSpec::default()
        };
        let clean = render_sequence(&spec, &Scheme::clean())?;
        let dark = render_sequence(&spec, &Scheme(vec![Degradation::RgbBlackout { from: 2, to: 9 }]))?;
        let mean = |v: &[u8]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let dim = (2..=9).all(|i| mean(&dark.rgb[i]) < 0.1 * mean(&clean.rgb[i]));
        let inside = clean.gt.iter().all(|b| b.left() >= 0.0 && b.top() >= 0.0 && b.right() <= spec.width as f64 && b.bottom() <= spec.height as f64);
        Ok(exact(dim && inside))
    })?;
    Ok(s.checks)
}

/// Summary of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub trials: usize,
    pub parameters: usize,
    pub max_relative_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRAD_TOLERANCE
    }
}

fn rand_sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DfmSample {
    let mut plane = || (0..h * w).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
    let (rgb_pos, rgb_neg, tir_pos, tir_neg) = (plane(), plane(), plane(), plane());
    let labels = (0..h * w)
        .map(|_| match rng.gen_range(0..6) {
            0 => LABEL_POSITIVE,
            1 => 0.0,
            _ => LABEL_NEGATIVE,
        })
        .collect();
    DfmSample {
        h,
        w,
        rgb_pos,
        rgb_neg,
        tir_pos,
        tir_neg,
        labels,
    }
}

/// Analytic fusion gradients against central differences. Each trial draws
/// a fresh block (random widths and orientation), a random batch, and
/// `per_trial` random parameters to probe.
pub fn gradcheck(seed: u64, trials: usize, per_trial: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut probed = 0;
    for _ in 0..trials {
        let widths = WidthConfig {
            guide: rng.gen_range(1..9),
            mid: rng.gen_range(1..7),
            transition: if rng.gen_bool(0.5) { Some(rng.gen_range(1..5)) } else { None },
        };
        let orientation = [Orientation::TirToRgb, Orientation::RgbToTir, Orientation::Both][rng.gen_range(0..3)];
        let params = DfmParams::init(widths, orientation, DEFAULT_SLOPE, &mut rng)?;
        let (gh, gw) = (rng.gen_range(3..8), rng.gen_range(3..8));
        let batch: Vec<DfmSample> = (0..rng.gen_range(1..4)).map(|_| rand_sample(&mut rng, gh, gw)).collect();
        let (_, grad) = dfm_gradients(&batch, &params)?;
        let base = params.flatten();
        for _ in 0..per_trial.min(base.len()) {
            let idx = rng.gen_range(0..base.len());
            let eval = |d: f64| -> Result<f64> {
                let mut q = params.clone();
                let mut v = base.clone();
                v[idx] += d;
                q.unflatten(&v)?;
                Ok(dfm_loss(&batch, &q)?.total)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let err = (numeric - grad[idx]).abs() / numeric.abs().max(grad[idx].abs()).max(1e-4);
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            probed += 1;
        }
    }
    Ok(GradCheck {
        trials,
        parameters: probed,
        max_relative_error: worst,
    })
}
