//! Decision-level fusion of the two modalities' classification responses.
//!
//! A mutual-guided block looks at both positive-class maps and produces a
//! per-pixel weight `W` in (0, 1) after spatial standardization and a
//! sigmoid. The fused map is the convex combination
//! `F = R * W + T * (1 - W)`.
//!
//! The block is tiny (single-channel inputs on the response grid), so it is
//! evaluated in `f64`. That keeps the analytic gradients checkable against
//! central finite differences at tight tolerances.

mod backward;
pub mod synthetic;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backward::{dfm_gradients, dfm_loss, fused_positive, DfmSample};
pub use train::{train_dfm, EpochLog, SgdSchedule};

use crate::error::{Error, Result};
use crate::siamese::ResponseMaps;
use crate::tensor::Tensor;
use crate::weights::{ModelWeights, WeightArray, WeightReader};

pub const DEFAULT_SLOPE: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// RGB has priority and TIR assists.
    TirToRgb,
    /// TIR has priority and RGB assists.
    RgbToTir,
    /// Both blocks; their fused outputs are averaged.
    Both,
}

impl Orientation {
    fn branches(self) -> &'static [Orientation] {
        match self {
            Orientation::TirToRgb => &[Orientation::TirToRgb],
            Orientation::RgbToTir => &[Orientation::RgbToTir],
            Orientation::Both => &[Orientation::TirToRgb, Orientation::RgbToTir],
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Orientation::TirToRgb => "dfm/tir_to_rgb",
            Orientation::RgbToTir => "dfm/rgb_to_tir",
            Orientation::Both => unreachable!("composite orientation has no single prefix"),
        }
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tir_to_rgb" => Ok(Orientation::TirToRgb),
            "rgb_to_tir" => Ok(Orientation::RgbToTir),
            "both" => Ok(Orientation::Both),
            other => Err(Error::Config(format!("unknown fusion orientation {other:?}"))),
        }
    }
}

/// Channel widths of the mutual-guided block, written `1-G-M(T)-1`:
/// guide/assist convs widen to `G`, the mixing conv narrows to `M`, and the
/// priority input reaches `M` through an optional `T`-wide transition conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct WidthConfig {
    pub guide: usize,
    pub mid: usize,
    pub transition: Option<usize>,
}

impl Default for WidthConfig {
    fn default() -> Self {
        WidthConfig {
            guide: 32,
            mid: 16,
            transition: Some(8),
        }
    }
}

impl FromStr for WidthConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad width config {s:?}, expected like 1-32-16(8)-1"));
        let parts: Vec<&str> = s.trim().split('-').collect();
        if parts.len() != 4 || parts[0] != "1" || parts[3] != "1" {
            return Err(bad());
        }
        let guide: usize = parts[1].parse().map_err(|_| bad())?;
        let (mid, transition) = match parts[2].split_once('(') {
            Some((m, t)) => {
                let t = t.strip_suffix(')').ok_or_else(bad)?;
                (m.parse().map_err(|_| bad())?, Some(t.parse().map_err(|_| bad())?))
            }
            None => (parts[2].parse().map_err(|_| bad())?, None),
        };
        if guide == 0 || mid == 0 || transition == Some(0) {
            return Err(bad());
        }
        Ok(WidthConfig { guide, mid, transition })
    }
}

impl fmt::Display for WidthConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.transition {
            Some(t) => write!(f, "1-{}-{}({})-1", self.guide, self.mid, t),
            None => write!(f, "1-{}-{}-1", self.guide, self.mid),
        }
    }
}

impl TryFrom<String> for WidthConfig {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WidthConfig> for String {
    fn from(w: WidthConfig) -> String {
        w.to_string()
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3 {
    pub out: usize,
    pub inp: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3 {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Conv3 {
            out,
            inp,
            weight: vec![0.0; out * inp * 9],
            bias: vec![0.0; out],
        }
    }

    fn random(out: usize, inp: usize, rng: &mut impl Rng) -> Self {
        let s = (1.0 / (inp as f64 * 9.0)).sqrt();
        let mut c = Conv3::zeros(out, inp);
        for w in &mut c.weight {
            *w = rng.gen_range(-s..s);
        }
        c
    }

    #[inline]
    pub(crate) fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.inp + i) * 3 + ky) * 3 + kx]
    }

    /// `input` is `inp` planes of `h x w`.
    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let p = h * w;
        debug_assert_eq!(input.len(), self.inp * p);
        let mut out = vec![0.0; self.out * p];
        for o in 0..self.out {
            let dst = &mut out[o * p..(o + 1) * p];
            dst.fill(self.bias[o]);
            for i in 0..self.inp {
                let src = &input[i * p..(i + 1) * p];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = self.w(o, i, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                            let drow = &mut dst[y * w..(y + 1) * w];
                            let (x0, x1) = valid_range(kx, w);
                            for x in x0..x1 {
                                drow[x] += wv * srow[x + kx - 1];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn export(&self, weights: &mut ModelWeights, prefix: &str) -> Result<()> {
        weights.insert(
            format!("{prefix}/kernel"),
            WeightArray::new(vec![self.out, self.inp, 3, 3], self.weight.iter().map(|&v| v as f32).collect())?,
        )?;
        weights.insert(
            format!("{prefix}/bias"),
            WeightArray::vector(self.bias.iter().map(|&v| v as f32).collect()),
        )
    }

    fn load(reader: &mut WeightReader<'_>, prefix: &str, out: usize, inp: usize) -> Result<Self> {
        let weight = reader.take(&format!("{prefix}/kernel"), &[out, inp, 3, 3])?.values;
        let bias = reader.vector(&format!("{prefix}/bias"), out)?;
        Ok(Conv3 {
            out,
            inp,
            weight: weight.into_iter().map(f64::from).collect(),
            bias: bias.into_iter().map(f64::from).collect(),
        })
    }
}

/// Output columns `x` for which `x + kx - 1` is inside `[0, w)`.
#[inline]
pub(crate) fn valid_range(kx: usize, w: usize) -> (usize, usize) {
    match kx {
        0 => (1, w),
        1 => (0, w),
        _ => (0, w.saturating_sub(1)),
    }
}

/// One mutual-guided block plus its output conv.
#[derive(Clone, Debug, PartialEq)]
pub struct GuideBlockParams {
    /// Attention from the priority map.
    pub guide: Conv3,
    /// Lifts the assisting map.
    pub assist: Conv3,
    /// Mixes the guided assisting features down to the mid width.
    pub mix: Conv3,
    /// One or two convs lifting the priority map to the mid width.
    pub transition: Vec<Conv3>,
    /// Mid width to the single pre-standardization channel.
    pub fuse: Conv3,
}

impl GuideBlockParams {
    fn shapes(widths: &WidthConfig) -> Vec<(&'static str, usize, usize)> {
        let mut v = vec![
            ("guide", widths.guide, 1),
            ("assist", widths.guide, 1),
            ("mix", widths.mid, widths.guide),
        ];
        match widths.transition {
            Some(t) => {
                v.push(("transition0", t, 1));
                v.push(("transition1", widths.mid, t));
            }
            None => v.push(("transition0", widths.mid, 1)),
        }
        v.push(("fuse", 1, widths.mid));
        v
    }

    fn from_convs(mut convs: Vec<Conv3>) -> Self {
        let fuse = convs.pop().expect("fuse conv");
        let transition = convs.split_off(3);
        let mix = convs.pop().expect("mix conv");
        let assist = convs.pop().expect("assist conv");
        let guide = convs.pop().expect("guide conv");
        GuideBlockParams {
            guide,
            assist,
            mix,
            transition,
            fuse,
        }
    }

    pub fn init(widths: &WidthConfig, rng: &mut impl Rng) -> Self {
        Self::from_convs(
            Self::shapes(widths)
                .into_iter()
                .map(|(_, o, i)| Conv3::random(o, i, rng))
                .collect(),
        )
    }

    pub fn convs(&self) -> Vec<&Conv3> {
        let mut v = vec![&self.guide, &self.assist, &self.mix];
        v.extend(self.transition.iter());
        v.push(&self.fuse);
        v
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv3> {
        let mut v = vec![&mut self.guide, &mut self.assist, &mut self.mix];
        v.extend(self.transition.iter_mut());
        v.push(&mut self.fuse);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DfmParams {
    pub widths: WidthConfig,
    pub orientation: Orientation,
    /// LeakyReLU negative slope λ.
    pub slope: f64,
    pub eps: f64,
    /// One block per orientation branch, in `Orientation::branches` order.
    pub blocks: Vec<GuideBlockParams>,
}

impl DfmParams {
    pub fn init(widths: WidthConfig, orientation: Orientation, slope: f64, rng: &mut impl Rng) -> Result<Self> {
        check_slope(slope)?;
        let blocks = orientation
            .branches()
            .iter()
            .map(|_| GuideBlockParams::init(&widths, rng))
            .collect();
        Ok(DfmParams {
            widths,
            orientation,
            slope,
            eps: DEFAULT_EPS,
            blocks,
        })
    }

    pub fn set_slope(&mut self, slope: f64) -> Result<()> {
        check_slope(slope)?;
        self.slope = slope;
        Ok(())
    }

    /// All trainable values, block by block, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for c in b.convs() {
                out.extend_from_slice(&c.weight);
                out.extend_from_slice(&c.bias);
            }
        }
        out
    }

    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} values for {} fusion parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for b in &mut self.blocks {
            for c in b.convs_mut() {
                let n = c.weight.len();
                c.weight.copy_from_slice(&values[at..at + n]);
                at += n;
                let n = c.bias.len();
                c.bias.copy_from_slice(&values[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.convs())
            .map(|c| c.weight.len() + c.bias.len())
            .sum()
    }

    /// Name of every flattened parameter, for diagnostics.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (block, &orient) in self.blocks.iter().zip(self.orientation.branches()) {
            let shapes = GuideBlockParams::shapes(&self.widths);
            for (conv, (name, _, _)) in block.convs().into_iter().zip(shapes) {
                for i in 0..conv.weight.len() {
                    out.push(format!("{}/{name}/kernel[{i}]", orient.prefix()));
                }
                for i in 0..conv.bias.len() {
                    out.push(format!("{}/{name}/bias[{i}]", orient.prefix()));
                }
            }
        }
        out
    }

    /// Serializes every block under the `dfm/` prefix.
    pub fn export(&self, weights: &mut ModelWeights) -> Result<()> {
        for (block, &orient) in self.blocks.iter().zip(self.orientation.branches()) {
            let shapes = GuideBlockParams::shapes(&self.widths);
            for (conv, (name, _, _)) in block.convs().into_iter().zip(shapes) {
                conv.export(weights, &format!("{}/{name}", orient.prefix()))?;
            }
        }
        Ok(())
    }

    pub fn to_weights(&self) -> Result<ModelWeights> {
        let mut w = ModelWeights::new();
        self.export(&mut w)?;
        Ok(w)
    }

    pub fn load(reader: &mut WeightReader<'_>, widths: WidthConfig, orientation: Orientation, slope: f64) -> Result<Self> {
        check_slope(slope)?;
        let mut blocks = Vec::new();
        for &orient in orientation.branches() {
            let convs = GuideBlockParams::shapes(&widths)
                .into_iter()
                .map(|(name, o, i)| Conv3::load(reader, &format!("{}/{name}", orient.prefix()), o, i))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(GuideBlockParams::from_convs(convs));
        }
        Ok(DfmParams {
            widths,
            orientation,
            slope,
            eps: DEFAULT_EPS,
            blocks,
        })
    }
}

fn check_slope(slope: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&slope) {
        return Err(Error::param(format!("leaky relu slope {slope} outside [0, 1]")));
    }
    Ok(())
}

#[inline]
pub(crate) fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x + 0.0
    }
}

#[inline]
pub(crate) fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intermediates of one guided block, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BlockCache {
    pub h: usize,
    pub w: usize,
    pub primary: Vec<f64>,
    pub assist: Vec<f64>,
    pub a_pre: Vec<f64>,
    pub a: Vec<f64>,
    pub b_pre: Vec<f64>,
    pub b: Vec<f64>,
    pub mixed: Vec<f64>,
    pub c_pre: Vec<f64>,
    /// Pre-activations and activations of each transition conv.
    pub t_pre: Vec<Vec<f64>>,
    pub t_act: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub weight: Vec<f64>,
}

/// Guided-block output before the fuse conv: `transition(P) + mix(G(P) * A' + A')`.
pub(crate) fn guide_forward(block: &GuideBlockParams, primary: &[f64], assist: &[f64], h: usize, w: usize, slope: f64) -> BlockCache {
    let act = |v: Vec<f64>| v.iter().map(|&x| leaky(x, slope)).collect::<Vec<_>>();
    let a_pre = block.guide.forward(primary, h, w);
    let a = act(a_pre.clone());
    let b_pre = block.assist.forward(assist, h, w);
    let b = act(b_pre.clone());
    let mixed: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y + y).collect();
    let c_pre = block.mix.forward(&mixed, h, w);
    let mut t_pre = Vec::new();
    let mut t_act = Vec::new();
    let mut t_in = primary.to_vec();
    for conv in &block.transition {
        let pre = conv.forward(&t_in, h, w);
        let post = act(pre.clone());
        t_pre.push(pre);
        t_act.push(post.clone());
        t_in = post;
    }
    let u: Vec<f64> = t_in.iter().zip(&c_pre).map(|(t, &c)| t + leaky(c, slope)).collect();
    BlockCache {
        h,
        w,
        primary: primary.to_vec(),
        assist: assist.to_vec(),
        a_pre,
        a,
        b_pre,
        b,
        mixed,
        c_pre,
        t_pre,
        t_act,
        u,
        z: Vec::new(),
        weight: Vec::new(),
    }
}

/// Runs one block through fuse conv, standardization and sigmoid; returns
/// the weight on the block's priority modality.
pub(crate) fn block_weight(block: &GuideBlockParams, primary: &[f64], assist: &[f64], h: usize, w: usize, slope: f64, eps: f64) -> BlockCache {
    let mut cache = guide_forward(block, primary, assist, h, w, slope);
    cache.z = block.fuse.forward(&cache.u, h, w);
    cache.weight = standardize(&cache.z, eps).into_iter().map(sigmoid).collect();
    cache
}

/// Subtract mean, divide by population std + eps.
pub(crate) fn standardize(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    x.iter().map(|v| (v - mean) / denom).collect()
}

fn single_plane(t: &Tensor, what: &str) -> Result<(usize, usize, Vec<f64>)> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 1 {
        return Err(Error::shape(format!("{what} must be a single-channel map, got {:?}", t.shape())));
    }
    Ok((h, w, t.data().iter().map(|&v| v as f64).collect()))
}

fn to_tensor(h: usize, w: usize, v: &[f64]) -> Tensor {
    Tensor::new([1, 1, h, w], v.iter().map(|&x| x as f32).collect()).expect("plane size")
}

/// Output of the guided block (mid width channels) for a priority and an
/// assisting single-channel map.
pub fn mutual_guide(primary: &Tensor, assist: &Tensor, block: &GuideBlockParams, slope: f64) -> Result<Tensor> {
    check_slope(slope)?;
    let (h, w, p) = single_plane(primary, "priority map")?;
    let (ah, aw, a) = single_plane(assist, "assisting map")?;
    if (h, w) != (ah, aw) {
        return Err(Error::shape(format!(
            "guided block inputs {:?} and {:?} differ",
            primary.shape(),
            assist.shape()
        )));
    }
    let cache = guide_forward(block, &p, &a, h, w, slope);
    Tensor::new(
        [1, block.fuse.inp, h, w],
        cache.u.iter().map(|&v| v as f32).collect(),
    )
}

/// Effective per-pixel weight on the RGB map, computed in f64.
pub(crate) fn rgb_weight_f64(rgb_pos: &[f64], tir_pos: &[f64], h: usize, w: usize, params: &DfmParams) -> Vec<f64> {
    let branches = params.orientation.branches();
    let mut acc = vec![0.0; h * w];
    for (block, &orient) in params.blocks.iter().zip(branches) {
        let cache = match orient {
            Orientation::TirToRgb => block_weight(block, rgb_pos, tir_pos, h, w, params.slope, params.eps),
            _ => block_weight(block, tir_pos, rgb_pos, h, w, params.slope, params.eps),
        };
        for (a, &wv) in acc.iter_mut().zip(&cache.weight) {
            *a += match orient {
                Orientation::TirToRgb => wv,
                _ => 1.0 - wv,
            };
        }
    }
    let k = branches.len() as f64;
    acc.iter().map(|v| v / k).collect()
}

/// `W_P`: the weight on the RGB positive map at each pixel.
pub fn fusion_weight(rgb_cls_pos: &Tensor, tir_cls_pos: &Tensor, params: &DfmParams) -> Result<Tensor> {
    let (h, w, r) = single_plane(rgb_cls_pos, "RGB positive map")?;
    let (th, tw, t) = single_plane(tir_cls_pos, "TIR positive map")?;
    if (h, w) != (th, tw) {
        return Err(Error::shape(format!(
            "positive maps {:?} and {:?} differ",
            rgb_cls_pos.shape(),
            tir_cls_pos.shape()
        )));
    }
    let (lo, hi) = crate::tensor::OPEN_UNIT;
    let wv: Vec<f64> = rgb_weight_f64(&r, &t, h, w, params)
        .into_iter()
        .map(|v| v.clamp(lo as f64, hi as f64))
        .collect();
    Ok(to_tensor(h, w, &wv))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedResponse {
    pub cls_pos_fused: Tensor,
    pub cls_neg_fused: Tensor,
    pub reg_fused: Tensor,
    /// Weight on the RGB side at each pixel.
    pub weight_map: Tensor,
}

impl FusedResponse {
    pub fn into_response(self) -> Result<ResponseMaps> {
        ResponseMaps::new(self.cls_pos_fused, self.cls_neg_fused, self.reg_fused)
    }
}

/// Convex combination with a given RGB weight map: positives and regression
/// blend per pixel, negatives are averaged.
pub fn fuse_with_weight(rgb: &ResponseMaps, tir: &ResponseMaps, weight: &Tensor) -> Result<FusedResponse> {
    if rgb.cls_pos.shape() != tir.cls_pos.shape() || weight.shape() != rgb.cls_pos.shape() {
        return Err(Error::shape(format!(
            "cannot fuse grids {:?} and {:?} with weight {:?}",
            rgb.cls_pos.shape(),
            tir.cls_pos.shape(),
            weight.shape()
        )));
    }
    let wv = weight.data();
    // blended in f64 and rounded once, so the result never leaves
    // [min(r, t), max(r, t)] through f32 rounding
    let blend = |r: &[f32], t: &[f32]| -> Vec<f32> {
        r.iter()
            .zip(t)
            .zip(wv.iter().cycle())
            .map(|((&r, &t), &w)| {
                let w = w as f64;
                (r as f64 * w + t as f64 * (1.0 - w)) as f32
            })
            .collect()
    };
    let s = rgb.size();
    Ok(FusedResponse {
        cls_pos_fused: Tensor::new([1, 1, s, s], blend(rgb.cls_pos.data(), tir.cls_pos.data()))?,
        cls_neg_fused: Tensor::new(
            [1, 1, s, s],
            rgb.cls_neg.data().iter().zip(tir.cls_neg.data()).map(|(a, b)| (a + b) / 2.0).collect(),
        )?,
        reg_fused: Tensor::new([1, 4, s, s], blend(rgb.reg.data(), tir.reg.data()))?,
        weight_map: weight.clone(),
    })
}

/// Plain averaging of the two modalities.
pub fn average_fusion(rgb: &ResponseMaps, tir: &ResponseMaps) -> Result<FusedResponse> {
    fuse_with_weight(rgb, tir, &Tensor::full(rgb.cls_pos.shape(), 0.5))
}

pub fn fuse(rgb: &ResponseMaps, tir: &ResponseMaps, params: &DfmParams) -> Result<FusedResponse> {
    if rgb.cls_pos.shape() != tir.cls_pos.shape() {
        return Err(Error::shape(format!(
            "cannot fuse grids {:?} and {:?}",
            rgb.cls_pos.shape(),
            tir.cls_pos.shape()
        )));
    }
    let weight = fusion_weight(&rgb.cls_pos, &tir.cls_pos, params)?;
    fuse_with_weight(rgb, tir, &weight)
}
