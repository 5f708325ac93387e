//! Single-modality Siamese tracker: stride-8 feature extractor with a 1x1
//! neck, independent anchor-free classification and regression heads,
//! ellipse label assignment, the two training losses and box decoding.

use serde::{Deserialize, Serialize};

use crate::blocks::{conv_block, BlockActivation, ConvBlockParams};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, xcorr_depthwise, Tensor};
use crate::weights::{ModelWeights, WeightArray, WeightReader};

/// Axis-aligned box in pixels, stored by centre and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox { cx, cy, w, h }
    }

    /// From top-left corner and size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox {
            cx: x + w / 2.0,
            cy: y + h / 2.0,
            w,
            h,
        }
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.left(), self.top(), self.w, self.h]
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn center_distance(&self, other: &BoundingBox) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }
}

/// Head outputs on an `S x S` grid. `reg` holds left/top/right/bottom
/// distances in search-crop pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMaps {
    pub cls_pos: Tensor,
    pub cls_neg: Tensor,
    pub reg: Tensor,
}

impl ResponseMaps {
    pub fn new(cls_pos: Tensor, cls_neg: Tensor, reg: Tensor) -> Result<Self> {
        let [_, _, h, w] = cls_pos.shape();
        let ok = cls_pos.shape() == [1, 1, h, w] && cls_neg.shape() == [1, 1, h, w] && reg.shape() == [1, 4, h, w];
        if !ok || h != w {
            return Err(Error::shape(format!(
                "response maps {:?}/{:?}/{:?} are not a consistent square grid",
                cls_pos.shape(),
                cls_neg.shape(),
                reg.shape()
            )));
        }
        Ok(ResponseMaps { cls_pos, cls_neg, reg })
    }

    pub fn size(&self) -> usize {
        self.cls_pos.height()
    }

    /// Softmax probability of the positive class at each grid position.
    pub fn positive_probability(&self) -> Vec<f64> {
        self.cls_pos
            .data()
            .iter()
            .zip(self.cls_neg.data())
            .map(|(&p, &n)| positive_probability(p as f64, n as f64))
            .collect()
    }
}

#[inline]
pub fn positive_probability(pos: f64, neg: f64) -> f64 {
    let d = pos - neg;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

pub const LABEL_POSITIVE: f32 = 1.0;
pub const LABEL_IGNORE: f32 = 0.0;
pub const LABEL_NEGATIVE: f32 = -1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMaps {
    pub cls_label: Tensor,
    pub reg_target: Tensor,
}

impl LabelMaps {
    pub fn positives(&self) -> usize {
        self.cls_label.data().iter().filter(|&&v| v == LABEL_POSITIVE).count()
    }
}

/// Maps response-grid indices to search-crop pixel coordinates. The grid is
/// centred on the crop centre with spacing `stride`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub size: usize,
    pub stride: usize,
    pub search_size: usize,
}

impl GridGeometry {
    pub fn coord(&self, index: usize) -> f64 {
        self.search_size as f64 / 2.0 + (index as f64 - (self.size as f64 - 1.0) / 2.0) * self.stride as f64
    }

    pub fn point(&self, row: usize, col: usize) -> (f64, f64) {
        (self.coord(col), self.coord(row))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostProcessConfig {
    /// Weight ω of the cosine window against the penalized score.
    pub window_influence: f64,
    /// Size smoothing α: new size = α·decoded + (1 − α)·previous.
    pub size_lr: f64,
    /// Strength of the scale/aspect change penalty.
    pub scale_penalty: f64,
}

impl Default for PostProcessConfig {
    fn default() -> Self {
        PostProcessConfig {
            window_influence: 0.3,
            size_lr: 0.3,
            scale_penalty: 0.04,
        }
    }
}

// ---------------------------------------------------------------------------
// Feature extractor
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneLayer {
    pub block: ConvBlockParams,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub layers: Vec<BackboneLayer>,
    pub neck: ConvBlockParams,
}

impl BackboneParams {
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.neck.out_channels()
    }

    pub fn load(reader: &mut WeightReader<'_>, arch: &BackboneArch) -> Result<Self> {
        let mut layers = Vec::with_capacity(arch.channels.len());
        let mut cin = arch.input_channels;
        for (i, (&cout, &stride)) in arch.channels.iter().zip(&arch.strides).enumerate() {
            let block = ConvBlockParams::load(reader, &format!("backbone/{i}"), [cout, cin, 3, 3], BlockActivation::Relu)?;
            layers.push(BackboneLayer { block, stride });
            cin = cout;
        }
        let neck = ConvBlockParams::load(reader, "neck", [arch.neck_channels, cin, 1, 1], BlockActivation::None)?;
        Ok(BackboneParams { layers, neck })
    }

    pub fn export(&self, weights: &mut ModelWeights) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.block.export(weights, &format!("backbone/{i}"))?;
        }
        self.neck.export(weights, "neck")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneArch {
    pub input_channels: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub neck_channels: usize,
}

impl Default for BackboneArch {
    fn default() -> Self {
        BackboneArch {
            input_channels: 3,
            channels: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            neck_channels: 64,
        }
    }
}

impl BackboneArch {
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }
}

/// Runs the conv stack (3x3 blocks, padding 1) and the 1x1 neck.
pub fn extract_features(image: &Tensor, params: &BackboneParams) -> Result<Tensor> {
    let stride = params.total_stride();
    if image.height() % stride != 0 || image.width() % stride != 0 {
        return Err(Error::shape(format!(
            "image {:?} is not divisible by the total stride {stride}",
            image.shape()
        )));
    }
    let mut x = image.clone();
    for layer in &params.layers {
        x = conv_block(&x, &layer.block, layer.stride, 1)?;
    }
    conv_block(&x, &params.neck, 1, 0)
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct HeadBranch {
    pub template: ConvBlockParams,
    pub search: ConvBlockParams,
    pub out_kernel: Tensor,
    pub out_bias: Vec<f32>,
}

impl HeadBranch {
    fn load(reader: &mut WeightReader<'_>, prefix: &str, channels: usize, outputs: usize) -> Result<Self> {
        Ok(HeadBranch {
            template: ConvBlockParams::load(reader, &format!("{prefix}/template"), [channels, channels, 3, 3], BlockActivation::Relu)?,
            search: ConvBlockParams::load(reader, &format!("{prefix}/search"), [channels, channels, 3, 3], BlockActivation::Relu)?,
            out_kernel: reader.tensor(&format!("{prefix}/out/kernel"), [outputs, channels, 1, 1])?,
            out_bias: reader.vector(&format!("{prefix}/out/bias"), outputs)?,
        })
    }

    fn export(&self, weights: &mut ModelWeights, prefix: &str) -> Result<()> {
        self.template.export(weights, &format!("{prefix}/template"))?;
        self.search.export(weights, &format!("{prefix}/search"))?;
        weights.insert(format!("{prefix}/out/kernel"), WeightArray::from_tensor(&self.out_kernel))?;
        weights.insert(format!("{prefix}/out/bias"), WeightArray::vector(self.out_bias.clone()))
    }

    fn forward(&self, template: &Tensor, search: &Tensor) -> Result<Tensor> {
        let t = conv_block(template, &self.template, 1, 0)?;
        let s = conv_block(search, &self.search, 1, 0)?;
        let x = xcorr_depthwise(&s, &t)?;
        conv2d(&x, &self.out_kernel, &self.out_bias, 1, 0)
    }
}

/// The search-side blocks of the two branches are the per-head input
/// transforms; the classification one doubles as CONV1 and the regression
/// one as CONV3 of the temporal module's figure.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub cls: HeadBranch,
    pub reg: HeadBranch,
    pub stride: usize,
}

impl HeadParams {
    pub fn load(reader: &mut WeightReader<'_>, channels: usize, stride: usize) -> Result<Self> {
        Ok(HeadParams {
            cls: HeadBranch::load(reader, "head/cls", channels, 2)?,
            reg: HeadBranch::load(reader, "head/reg", channels, 4)?,
            stride,
        })
    }

    pub fn export(&self, weights: &mut ModelWeights) -> Result<()> {
        self.cls.export(weights, "head/cls")?;
        self.reg.export(weights, "head/reg")
    }
}

/// Largest exponent fed to the regression `exp`, keeps offsets finite.
const REG_EXP_LIMIT: f32 = 30.0;

pub fn head_forward(template_feat: &Tensor, search_feat: &Tensor, head: &HeadParams) -> Result<ResponseMaps> {
    if template_feat.channels() != search_feat.channels() {
        return Err(Error::shape(format!(
            "template {:?} and search {:?} features differ in channels",
            template_feat.shape(),
            search_feat.shape()
        )));
    }
    let cls = head.cls.forward(template_feat, search_feat)?;
    let reg = head.reg.forward(template_feat, search_feat)?;
    let stride = head.stride as f32;
    let reg = reg.map(|v| v.min(REG_EXP_LIMIT).exp() * stride);
    ResponseMaps::new(cls.channel_slice(0, 1)?, cls.channel_slice(1, 1)?, reg)
}

// ---------------------------------------------------------------------------
// Labels and losses
// ---------------------------------------------------------------------------

/// Positive inside the inner ellipse (semi-axes w/4, h/4), ignored in the
/// ring up to the outer ellipse (w/2, h/2), negative elsewhere. `gt` is in
/// search-crop coordinates.
pub fn assign_labels(gt: &BoundingBox, grid: &GridGeometry) -> Result<LabelMaps> {
    if !gt.is_valid() {
        return Err(Error::Label(format!("degenerate groundtruth box {gt:?}")));
    }
    let extent = grid.search_size as f64;
    if gt.right() <= 0.0 || gt.bottom() <= 0.0 || gt.left() >= extent || gt.top() >= extent {
        return Err(Error::Label(format!(
            "groundtruth {gt:?} lies outside the {extent}px search region"
        )));
    }
    let s = grid.size;
    let mut cls = Tensor::full([1, 1, s, s], LABEL_NEGATIVE);
    let mut reg = Tensor::zeros([1, 4, s, s]);
    for row in 0..s {
        for col in 0..s {
            let (x, y) = grid.point(row, col);
            let dx = x - gt.cx;
            let dy = y - gt.cy;
            let inner = (dx / (gt.w / 4.0)).powi(2) + (dy / (gt.h / 4.0)).powi(2);
            let outer = (dx / (gt.w / 2.0)).powi(2) + (dy / (gt.h / 2.0)).powi(2);
            let label = if inner <= 1.0 {
                LABEL_POSITIVE
            } else if outer <= 1.0 {
                LABEL_IGNORE
            } else {
                LABEL_NEGATIVE
            };
            cls.set(0, 0, row, col, label);
            let targets = [x - gt.left(), y - gt.top(), gt.right() - x, gt.bottom() - y];
            for (c, t) in targets.into_iter().enumerate() {
                reg.set(0, c, row, col, t as f32);
            }
        }
    }
    Ok(LabelMaps {
        cls_label: cls,
        reg_target: reg,
    })
}

/// Cross-entropy of one position given raw positive/negative logits.
#[inline]
pub fn softmax_cross_entropy(pos: f64, neg: f64, positive: bool) -> f64 {
    // -log softmax, computed as softplus of the logit margin
    let margin = if positive { neg - pos } else { pos - neg };
    softplus(margin)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean cross-entropy over positive and negative positions, split by class.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassLoss {
    pub total: f64,
    pub positive: f64,
    pub negative: f64,
    pub positives: usize,
    pub negatives: usize,
}

pub fn cls_loss_terms(pos: &[f32], neg: &[f32], labels: &[f32]) -> Result<ClassLoss> {
    if pos.len() != neg.len() || pos.len() != labels.len() {
        return Err(Error::shape(format!(
            "classification loss over {}/{}/{} positions",
            pos.len(),
            neg.len(),
            labels.len()
        )));
    }
    let mut out = ClassLoss::default();
    for ((&p, &n), &l) in pos.iter().zip(neg).zip(labels) {
        if l == LABEL_POSITIVE {
            out.positive += softmax_cross_entropy(p as f64, n as f64, true);
            out.positives += 1;
        } else if l == LABEL_NEGATIVE {
            out.negative += softmax_cross_entropy(p as f64, n as f64, false);
            out.negatives += 1;
        }
    }
    let count = out.positives + out.negatives;
    if count == 0 {
        return Err(Error::Loss("no positive or negative positions to score".into()));
    }
    out.total = (out.positive + out.negative) / count as f64;
    if out.positives > 0 {
        out.positive /= out.positives as f64;
    }
    if out.negatives > 0 {
        out.negative /= out.negatives as f64;
    }
    Ok(out)
}

pub fn cls_loss(resp: &ResponseMaps, labels: &LabelMaps) -> Result<f64> {
    check_label_grid(resp, labels)?;
    Ok(cls_loss_terms(resp.cls_pos.data(), resp.cls_neg.data(), labels.cls_label.data())?.total)
}

/// IoU of two boxes given as distances (l, t, r, b) from a shared point.
pub fn offset_iou(pred: [f64; 4], target: [f64; 4]) -> f64 {
    let area = |o: [f64; 4]| (o[0] + o[2]) * (o[1] + o[3]);
    let iw = pred[0].min(target[0]) + pred[2].min(target[2]);
    let ih = pred[1].min(target[1]) + pred[3].min(target[3]);
    let inter = iw.max(0.0) * ih.max(0.0);
    let union = area(pred) + area(target) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou_loss(resp: &ResponseMaps, labels: &LabelMaps) -> Result<f64> {
    check_label_grid(resp, labels)?;
    let s = resp.size();
    let mut total = 0.0;
    let mut count = 0usize;
    for row in 0..s {
        for col in 0..s {
            if labels.cls_label.at(0, 0, row, col) != LABEL_POSITIVE {
                continue;
            }
            let pred = std::array::from_fn(|c| resp.reg.at(0, c, row, col) as f64);
            let target = std::array::from_fn(|c| labels.reg_target.at(0, c, row, col) as f64);
            total += 1.0 - offset_iou(pred, target);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Loss("IoU loss needs at least one positive position".into()));
    }
    Ok(total / count as f64)
}

fn check_label_grid(resp: &ResponseMaps, labels: &LabelMaps) -> Result<()> {
    if labels.cls_label.shape() != resp.cls_pos.shape() || labels.reg_target.shape() != resp.reg.shape() {
        return Err(Error::shape(format!(
            "labels {:?} do not match response grid {:?}",
            labels.cls_label.shape(),
            resp.cls_pos.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// `np.hanning`-style window of length `n`.
pub fn hanning(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n as f64 - 1.0)).cos())
        .collect()
}

pub fn cosine_window(n: usize) -> Vec<f64> {
    let h = hanning(n);
    let mut out = Vec::with_capacity(n * n);
    for a in &h {
        for b in &h {
            out.push(a * b);
        }
    }
    out
}

fn change(r: f64) -> f64 {
    r.max(1.0 / r)
}

fn padded_size(w: f64, h: f64) -> f64 {
    let pad = (w + h) / 2.0;
    ((w + pad) * (h + pad)).sqrt()
}

/// Box decoded at every grid position, in search-crop coordinates.
pub fn decoded_box_at(resp: &ResponseMaps, grid: &GridGeometry, row: usize, col: usize) -> BoundingBox {
    let (x, y) = grid.point(row, col);
    let [l, t, r, b]: [f64; 4] = std::array::from_fn(|c| resp.reg.at(0, c, row, col) as f64);
    BoundingBox::from_xywh(x - l, y - t, l + r, t + b)
}

/// Penalized score per position. Exposed so tests can check the argmax.
pub fn penalized_scores(resp: &ResponseMaps, grid: &GridGeometry, post: &PostProcessConfig, prev: &BoundingBox) -> Vec<f64> {
    let s = resp.size();
    let score = resp.positive_probability();
    let window = cosine_window(s);
    let prev_sz = padded_size(prev.w, prev.h);
    let prev_ratio = prev.w / prev.h;
    let mut out = Vec::with_capacity(s * s);
    for row in 0..s {
        for col in 0..s {
            let i = row * s + col;
            let b = decoded_box_at(resp, grid, row, col);
            let s_c = change(padded_size(b.w, b.h) / prev_sz);
            let r_c = change(prev_ratio / (b.w / b.h));
            let penalty = (-(r_c * s_c - 1.0) * post.scale_penalty).exp();
            let p = score[i] * penalty;
            out.push(p * (1.0 - post.window_influence) + window[i] * post.window_influence);
        }
    }
    out
}

/// Picks the best grid position and returns its smoothed box (crop
/// coordinates) together with the raw positive probability there.
pub fn decode_box(
    resp: &ResponseMaps,
    grid: &GridGeometry,
    post: &PostProcessConfig,
    prev: &BoundingBox,
) -> (BoundingBox, f64) {
    let scores = penalized_scores(resp, grid, post, prev);
    let best = argmax(&scores);
    let s = resp.size();
    let (row, col) = (best / s, best % s);
    let decoded = decoded_box_at(resp, grid, row, col);
    let confidence = positive_probability(resp.cls_pos.data()[best] as f64, resp.cls_neg.data()[best] as f64);
    let a = post.size_lr;
    let smoothed = BoundingBox::new(
        decoded.cx,
        decoded.cy,
        a * decoded.w + (1.0 - a) * prev.w,
        a * decoded.h + (1.0 - a) * prev.h,
    );
    (smoothed, confidence)
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
