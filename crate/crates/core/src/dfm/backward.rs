//! Reverse-mode gradients of the fused classification loss with respect to
//! every fusion parameter.

use super::{block_weight, leaky_grad, rgb_weight_f64, valid_range, BlockCache, Conv3, DfmParams, GuideBlockParams, Orientation};
use crate::error::{Error, Result};
use crate::siamese::{softmax_cross_entropy, ClassLoss, LabelMaps, ResponseMaps, LABEL_NEGATIVE, LABEL_POSITIVE};

/// Classification logits of both modalities on one grid, with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DfmSample {
    pub h: usize,
    pub w: usize,
    pub rgb_pos: Vec<f64>,
    pub rgb_neg: Vec<f64>,
    pub tir_pos: Vec<f64>,
    pub tir_neg: Vec<f64>,
    pub labels: Vec<f32>,
}

impl DfmSample {
    pub fn new(rgb: &ResponseMaps, tir: &ResponseMaps, labels: &LabelMaps) -> Result<Self> {
        let shape = rgb.cls_pos.shape();
        if tir.cls_pos.shape() != shape || labels.cls_label.shape() != shape {
            return Err(Error::shape(format!(
                "fusion sample grids {:?}, {:?}, labels {:?}",
                shape,
                tir.cls_pos.shape(),
                labels.cls_label.shape()
            )));
        }
        let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        Ok(DfmSample {
            h: shape[2],
            w: shape[3],
            rgb_pos: f(rgb.cls_pos.data()),
            rgb_neg: f(rgb.cls_neg.data()),
            tir_pos: f(tir.cls_pos.data()),
            tir_neg: f(tir.cls_neg.data()),
            labels: labels.cls_label.data().to_vec(),
        })
    }

    fn check(&self) -> Result<()> {
        let n = self.h * self.w;
        if [&self.rgb_pos, &self.rgb_neg, &self.tir_pos, &self.tir_neg]
            .iter()
            .any(|v| v.len() != n)
            || self.labels.len() != n
        {
            return Err(Error::shape(format!("fusion sample planes do not match {}x{}", self.h, self.w)));
        }
        Ok(())
    }
}

/// Fused positive logits `R * W + T * (1 - W)`.
pub fn fused_positive(sample: &DfmSample, params: &DfmParams) -> Result<Vec<f64>> {
    sample.check()?;
    let wr = rgb_weight_f64(&sample.rgb_pos, &sample.tir_pos, sample.h, sample.w, params);
    Ok(wr
        .iter()
        .zip(sample.rgb_pos.iter().zip(&sample.tir_pos))
        .map(|(w, (r, t))| r * w + t * (1.0 - w))
        .collect())
}

fn sample_loss(sample: &DfmSample, params: &DfmParams) -> Result<ClassLoss> {
    let fused = fused_positive(sample, params)?;
    let mut out = ClassLoss::default();
    for i in 0..fused.len() {
        let neg = (sample.rgb_neg[i] + sample.tir_neg[i]) / 2.0;
        let l = sample.labels[i];
        if l == LABEL_POSITIVE {
            out.positive += softmax_cross_entropy(fused[i], neg, true);
            out.positives += 1;
        } else if l == LABEL_NEGATIVE {
            out.negative += softmax_cross_entropy(fused[i], neg, false);
            out.negatives += 1;
        }
    }
    let count = out.positives + out.negatives;
    if count == 0 {
        return Err(Error::Loss("no positive or negative positions to score".into()));
    }
    out.total = (out.positive + out.negative) / count as f64;
    // keep class terms as sums over the count so they add up to `total`
    out.positive /= count as f64;
    out.negative /= count as f64;
    Ok(out)
}

/// Mean over the batch of the per-sample fused cross-entropy. The
/// `positive`/`negative` fields are each sample's class sums divided by its
/// scored-position count, so `positive + negative == total`.
pub fn dfm_loss(batch: &[DfmSample], params: &DfmParams) -> Result<ClassLoss> {
    if batch.is_empty() {
        return Err(Error::Loss("empty batch".into()));
    }
    let mut acc = ClassLoss::default();
    for s in batch {
        let l = sample_loss(s, params)?;
        acc.total += l.total;
        acc.positive += l.positive;
        acc.negative += l.negative;
        acc.positives += l.positives;
        acc.negatives += l.negatives;
    }
    let k = batch.len() as f64;
    acc.total /= k;
    acc.positive /= k;
    acc.negative /= k;
    Ok(acc)
}

/// Loss and its gradient over the flattened parameters (same order as
/// [`DfmParams::flatten`]).
pub fn dfm_gradients(batch: &[DfmSample], params: &DfmParams) -> Result<(ClassLoss, Vec<f64>)> {
    let loss = dfm_loss(batch, params)?;
    let mut grad = vec![0.0; params.num_params()];
    let k = batch.len() as f64;
    for s in batch {
        accumulate_sample(s, params, 1.0 / k, &mut grad);
    }
    Ok((loss, grad))
}

fn accumulate_sample(s: &DfmSample, params: &DfmParams, scale: f64, grad: &mut [f64]) {
    let (h, w) = (s.h, s.w);
    let n = h * w;
    let fused = fused_positive(s, params).expect("checked by dfm_loss");
    let count = s.labels.iter().filter(|&&l| l == LABEL_POSITIVE || l == LABEL_NEGATIVE).count() as f64;

    // d loss / d fused positive logit
    let mut g_fused = vec![0.0; n];
    for i in 0..n {
        let l = s.labels[i];
        if l != LABEL_POSITIVE && l != LABEL_NEGATIVE {
            continue;
        }
        let neg = (s.rgb_neg[i] + s.tir_neg[i]) / 2.0;
        let p = super::sigmoid(fused[i] - neg);
        let y = if l == LABEL_POSITIVE { 1.0 } else { 0.0 };
        g_fused[i] = scale * (p - y) / count;
    }

    let branches = params.orientation.branches();
    let share = 1.0 / branches.len() as f64;
    let mut offset = 0;
    for (block, &orient) in params.blocks.iter().zip(branches) {
        let (primary, assist) = match orient {
            Orientation::TirToRgb => (&s.rgb_pos, &s.tir_pos),
            _ => (&s.tir_pos, &s.rgb_pos),
        };
        let cache = block_weight(block, primary, assist, h, w, params.slope, params.eps);
        // F = P * W + A * (1 - W) for this block, averaged across blocks
        let g_weight: Vec<f64> = (0..n).map(|i| share * g_fused[i] * (primary[i] - assist[i])).collect();
        let len: usize = block.convs().iter().map(|c| c.weight.len() + c.bias.len()).sum();
        block_backward(block, &cache, &g_weight, params.slope, params.eps, &mut grad[offset..offset + len]);
        offset += len;
    }
}

/// Gradient of a block's weight map given `dL/dW`, written into `out` in
/// flatten order.
fn block_backward(block: &GuideBlockParams, c: &BlockCache, g_weight: &[f64], slope: f64, eps: f64, out: &mut [f64]) {
    let (h, w) = (c.h, c.w);
    let g_s: Vec<f64> = g_weight.iter().zip(&c.weight).map(|(g, wv)| g * wv * (1.0 - wv)).collect();
    let g_z = standardize_backward(&c.z, &g_s, eps);

    let mut grads: Vec<Conv3> = block.convs().iter().map(|cv| Conv3::zeros(cv.out, cv.inp)).collect();
    let nt = block.transition.len();
    let fuse_idx = 3 + nt;

    let g_u = conv_backward(&block.fuse, &c.u, &g_z, h, w, &mut grads[fuse_idx], true);

    // mixing branch
    let g_c_pre: Vec<f64> = g_u.iter().zip(&c.c_pre).map(|(g, &x)| g * leaky_grad(x, slope)).collect();
    let g_m = conv_backward(&block.mix, &c.mixed, &g_c_pre, h, w, &mut grads[2], true);
    let g_a_pre: Vec<f64> = (0..g_m.len())
        .map(|i| g_m[i] * c.b[i] * leaky_grad(c.a_pre[i], slope))
        .collect();
    let g_b_pre: Vec<f64> = (0..g_m.len())
        .map(|i| g_m[i] * (c.a[i] + 1.0) * leaky_grad(c.b_pre[i], slope))
        .collect();
    conv_backward(&block.guide, &c.primary, &g_a_pre, h, w, &mut grads[0], false);
    conv_backward(&block.assist, &c.assist, &g_b_pre, h, w, &mut grads[1], false);

    // transition chain
    let mut g = g_u;
    for k in (0..nt).rev() {
        let g_pre: Vec<f64> = g.iter().zip(&c.t_pre[k]).map(|(g, &x)| g * leaky_grad(x, slope)).collect();
        let input = if k == 0 { &c.primary } else { &c.t_act[k - 1] };
        g = conv_backward(&block.transition[k], input, &g_pre, h, w, &mut grads[3 + k], k > 0);
    }

    let mut at = 0;
    for gc in grads {
        for v in gc.weight.into_iter().chain(gc.bias) {
            out[at] += v;
            at += 1;
        }
    }
}

/// Backward of `(x - mean) / (std + eps)` with population std.
pub(crate) fn standardize_backward(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let d: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let sigma = (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let s = sigma + eps;
    let g_mean = g.iter().sum::<f64>() / n;
    let gd: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
    let coef = if sigma > 0.0 { gd / (n * sigma * s * s) } else { 0.0 };
    g.iter().zip(&d).map(|(gi, di)| (gi - g_mean) / s - di * coef).collect()
}

/// Accumulates parameter gradients into `gp`; returns the input gradient
/// when `want_input` is set (otherwise an empty vector).
fn conv_backward(conv: &Conv3, input: &[f64], g_out: &[f64], h: usize, w: usize, gp: &mut Conv3, want_input: bool) -> Vec<f64> {
    let p = h * w;
    let mut g_in = if want_input { vec![0.0; conv.inp * p] } else { Vec::new() };
    for o in 0..conv.out {
        let go = &g_out[o * p..(o + 1) * p];
        gp.bias[o] += go.iter().sum::<f64>();
        for i in 0..conv.inp {
            let src = &input[i * p..(i + 1) * p];
            for ky in 0..3 {
                for kx in 0..3 {
                    let (x0, x1) = valid_range(kx, w);
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for x in x0..x1 {
                            acc += go[y * w + x] * src[sy * w + x + kx - 1];
                        }
                    }
                    gp.weight[((o * conv.inp + i) * 3 + ky) * 3 + kx] += acc;
                    if want_input {
                        let wv = conv.w(o, i, ky, kx);
                        let gi = &mut g_in[i * p..(i + 1) * p];
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let sy = sy as usize;
                            for x in x0..x1 {
                                gi[sy * w + x + kx - 1] += wv * go[y * w + x];
                            }
                        }
                    }
                }
            }
        }
    }
    g_in
}
