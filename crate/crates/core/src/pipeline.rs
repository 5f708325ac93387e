//! Online tracking loop over paired RGB/TIR frames.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dfm::{self, DfmSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::siamese::{assign_labels, decode_box, extract_features, head_forward, BoundingBox, GridGeometry, PostProcessConfig, ResponseMaps};
use crate::tensor::Tensor;
use crate::tiam::{tiam_forward, FrameFeatures, TiamFlags};

/// Which modalities reach the heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Tir,
    Rgbt,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "tir" => Ok(Modality::Tir),
            "rgbt" => Ok(Modality::Rgbt),
            other => Err(Error::Config(format!("unknown modality {other:?} (rgb, tir, rgbt)"))),
        }
    }
}

/// How the two response maps are merged in `rgbt` mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Dfm,
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    pub template_size: usize,
    pub search_size: usize,
    pub context_factor: f64,
    pub post: PostProcessConfig,
    pub modality: Modality,
    pub fusion: FusionMode,
    /// When off the heads see the raw neck features.
    pub tiam: bool,
    pub tiam_flags: TiamFlags,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            template_size: 64,
            search_size: 128,
            context_factor: 0.5,
            post: PostProcessConfig::default(),
            modality: Modality::Rgbt,
            fusion: FusionMode::Dfm,
            tiam: true,
            tiam_flags: TiamFlags::default(),
        }
    }
}

impl TrackConfig {
    pub fn validate(&self, stride: usize) -> Result<()> {
        if self.search_size <= self.template_size {
            return Err(Error::Config(format!(
                "search size {} must exceed template size {}",
                self.search_size, self.template_size
            )));
        }
        if stride == 0 || self.search_size % stride != 0 || self.template_size % stride != 0 {
            return Err(Error::Config(format!(
                "template {} and search {} sizes must be divisible by the stride {stride}",
                self.template_size, self.search_size
            )));
        }
        if self.template_size / stride < 3 {
            return Err(Error::Config(format!("template size {} too small for stride {stride}", self.template_size)));
        }
        if !(self.context_factor >= 0.0) {
            return Err(Error::Config(format!("context factor {} must be non-negative", self.context_factor)));
        }
        let p = &self.post;
        if !(0.0..=1.0).contains(&p.window_influence) || !(0.0..=1.0).contains(&p.size_lr) || p.scale_penalty < 0.0 {
            return Err(Error::Config(format!("post-processing parameters out of range: {p:?}")));
        }
        if !self.tiam_flags.r2 {
            return Err(Error::Config("tiam_flags.r2 cannot be disabled".into()));
        }
        Ok(())
    }

    /// Response grid for a backbone of the given total stride.
    pub fn grid(&self, stride: usize) -> GridGeometry {
        let t = self.template_size / stride - 2;
        let s = self.search_size / stride - 2;
        GridGeometry {
            size: s - t + 1,
            stride,
            search_size: self.search_size,
        }
    }

    pub fn template_side(&self, target: &BoundingBox) -> f64 {
        target.w.max(target.h) * (1.0 + 2.0 * self.context_factor)
    }

    pub fn search_side(&self, target: &BoundingBox) -> f64 {
        self.template_side(target) * self.search_size as f64 / self.template_size as f64
    }
}

/// Square crop of side `side` centred on `(cx, cy)`, bilinearly resampled
/// to `out x out`. Samples falling outside the image take the per-channel
/// image mean.
pub fn crop_resize(image: &Tensor, cx: f64, cy: f64, side: f64, out: usize) -> Result<Tensor> {
    if out < 2 {
        return Err(Error::param(format!("crop output size {out} must be at least 2")));
    }
    if image.batch() != 1 {
        return Err(Error::shape(format!("crop expects a single image, got {:?}", image.shape())));
    }
    if !(side > 0.0) || !cx.is_finite() || !cy.is_finite() {
        return Err(Error::param(format!("crop side {side} at ({cx}, {cy})")));
    }
    let [_, c, h, w] = image.shape();
    let x0 = cx - side / 2.0;
    let y0 = cy - side / 2.0;
    let step = side / out as f64;
    // source index pair and fractional weight for each output coordinate
    let taps = |origin: f64| -> Vec<(isize, isize, f64)> {
        (0..out)
            .map(|i| {
                let s = origin + (i as f64 + 0.5) * step - 0.5;
                let f = s.floor();
                (f as isize, f as isize + 1, s - f)
            })
            .collect()
    };
    let xs = taps(x0);
    let ys = taps(y0);
    let mut result = Tensor::zeros([1, c, out, out]);
    for ch in 0..c {
        let plane = image.plane(0, ch);
        let mean = (plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64) as f32;
        let px = |y: isize, x: isize| -> f32 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                mean
            } else {
                plane[y as usize * w + x as usize]
            }
        };
        let dst = result.plane_mut(0, ch);
        for (oy, &(ya, yb, fy)) in ys.iter().enumerate() {
            for (ox, &(xa, xb, fx)) in xs.iter().enumerate() {
                let (fx, fy) = (fx as f32, fy as f32);
                let top = if fx == 0.0 { px(ya, xa) } else { px(ya, xa) * (1.0 - fx) + px(ya, xb) * fx };
                let v = if fy == 0.0 {
                    top
                } else {
                    let bottom = if fx == 0.0 { px(yb, xa) } else { px(yb, xa) * (1.0 - fx) + px(yb, xb) * fx };
                    top * (1.0 - fy) + bottom * fy
                };
                dst[oy * out + ox] = v;
            }
        }
    }
    Ok(result)
}

/// Repeats a single-plane image to `channels` planes.
fn replicate(image: Tensor, channels: usize) -> Tensor {
    if image.channels() == channels {
        return image;
    }
    let [n, _, h, w] = image.shape();
    let plane = image.into_data();
    let mut data = Vec::with_capacity(channels * plane.len());
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    Tensor::new([n, channels, h, w], data).expect("sized above")
}

/// Search crops of both modalities around `gt`, TIR replicated to
/// `channels`; the inputs for batch-norm calibration.
pub fn calibration_crops(config: &TrackConfig, rgb: &Tensor, tir: &Tensor, gt: &BoundingBox, channels: usize) -> Result<[Tensor; 2]> {
    let side = config.search_side(gt);
    Ok([
        replicate(crop_resize(rgb, gt.cx, gt.cy, side, config.search_size)?, channels),
        replicate(crop_resize(tir, gt.cx, gt.cy, side, config.search_size)?, channels),
    ])
}

/// Per-modality tracker memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityState {
    pub template_feat: Tensor,
    pub prev_feat: FrameFeatures,
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub rgb: Option<ModalityState>,
    pub tir: Option<ModalityState>,
    pub prev_box: BoundingBox,
    pub frame_index: usize,
    pub config: TrackConfig,
    image_size: (usize, usize),
}

/// Box and confidence for one frame, plus the per-modality response maps
/// (in crop coordinates) for inspection.
#[derive(Clone, Debug)]
pub struct TrackOutput {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub response: ResponseMaps,
    pub weight_map: Option<Tensor>,
}

fn check_frames(rgb: &Tensor, tir: &Tensor) -> Result<(usize, usize)> {
    let [n, c, h, w] = rgb.shape();
    let [tn, tc, th, tw] = tir.shape();
    if n != 1 || tn != 1 || c != 3 || tc != 1 || (h, w) != (th, tw) {
        return Err(Error::shape(format!(
            "expected a 3-plane RGB and 1-plane TIR frame of equal size, got {:?} and {:?}",
            rgb.shape(),
            tir.shape()
        )));
    }
    Ok((h, w))
}

fn uses(m: Modality) -> (bool, bool) {
    match m {
        Modality::Rgb => (true, false),
        Modality::Tir => (false, true),
        Modality::Rgbt => (true, true),
    }
}

impl TrackerState {
    pub fn init(model: &Model, config: &TrackConfig, rgb: &Tensor, tir: &Tensor, gt: &BoundingBox) -> Result<Self> {
        let stride = model.backbone.total_stride();
        config.validate(stride)?;
        let (h, w) = check_frames(rgb, tir)?;
        if !gt.is_valid() || gt.left() < 0.0 || gt.top() < 0.0 || gt.right() > w as f64 || gt.bottom() > h as f64 {
            return Err(Error::Init(format!("initial box {gt:?} is not inside the {w}x{h} frame")));
        }
        if config.modality == Modality::Rgbt && config.fusion == FusionMode::Dfm && model.dfm.is_none() {
            return Err(Error::Init("fusion by the learned module needs dfm/ weights".into()));
        }
        let (use_rgb, use_tir) = uses(config.modality);
        let t_side = config.template_side(gt);
        let s_side = config.search_side(gt);
        let ch = model.backbone.layers[0].block.in_channels();
        let make = |frame: &Tensor| -> Result<ModalityState> {
            let t = replicate(crop_resize(frame, gt.cx, gt.cy, t_side, config.template_size)?, ch);
            let s = replicate(crop_resize(frame, gt.cx, gt.cy, s_side, config.search_size)?, ch);
            Ok(ModalityState {
                template_feat: extract_features(&t, &model.backbone)?,
                prev_feat: FrameFeatures {
                    raw: extract_features(&s, &model.backbone)?,
                    frame_index: 0,
                },
            })
        };
        Ok(TrackerState {
            rgb: if use_rgb { Some(make(rgb)?) } else { None },
            tir: if use_tir { Some(make(tir)?) } else { None },
            prev_box: *gt,
            frame_index: 0,
            config: config.clone(),
            image_size: (h, w),
        })
    }

    pub fn track(&mut self, model: &Model, rgb: &Tensor, tir: &Tensor) -> Result<TrackOutput> {
        let size = check_frames(rgb, tir)?;
        if size != self.image_size {
            return Err(Error::shape(format!("frame size changed from {:?} to {size:?}", self.image_size)));
        }
        let cfg = self.config.clone();
        let stride = model.backbone.total_stride();
        let grid = cfg.grid(stride);
        let prev = self.prev_box;
        let side = cfg.search_side(&prev);
        let scale = side / cfg.search_size as f64;
        let index = self.frame_index + 1;
        let mut tiam = model.tiam.clone();
        tiam.set_flags(cfg.tiam_flags)?;
        let ch = model.backbone.layers[0].block.in_channels();

        let respond = |state: &mut ModalityState, frame: &Tensor| -> Result<ResponseMaps> {
            let crop = replicate(crop_resize(frame, prev.cx, prev.cy, side, cfg.search_size)?, ch);
            let cur = FrameFeatures {
                raw: extract_features(&crop, &model.backbone)?,
                frame_index: index,
            };
            let feat = if cfg.tiam { tiam_forward(&cur, &state.prev_feat, &tiam)? } else { cur.raw.clone() };
            let resp = head_forward(&state.template_feat, &feat, &model.head)?;
            state.prev_feat = cur;
            Ok(resp)
        };
        let r = match self.rgb.as_mut() {
            Some(s) => Some(respond(s, rgb)?),
            None => None,
        };
        let t = match self.tir.as_mut() {
            Some(s) => Some(respond(s, tir)?),
            None => None,
        };
        let (response, weight_map) = match (r, t) {
            (Some(r), Some(t)) => {
                let fused = match cfg.fusion {
                    FusionMode::Dfm => dfm::fuse(&r, &t, model.dfm.as_ref().ok_or_else(|| Error::Weights("missing dfm/ weights".into()))?)?,
                    FusionMode::Average => dfm::average_fusion(&r, &t)?,
                };
                let w = fused.weight_map.clone();
                (fused.into_response()?, Some(w))
            }
            (Some(r), None) => (r, None),
            (None, Some(t)) => (t, None),
            (None, None) => unreachable!("at least one modality is active"),
        };

        let half = cfg.search_size as f64 / 2.0;
        let prev_crop = BoundingBox::new(half, half, prev.w / scale, prev.h / scale);
        let (b, confidence) = decode_box(&response, &grid, &cfg.post, &prev_crop);
        let (h, w) = (self.image_size.0 as f64, self.image_size.1 as f64);
        let bw = (b.w * scale).clamp(4.0, w);
        let bh = (b.h * scale).clamp(4.0, h);
        let cx = (prev.cx + (b.cx - half) * scale).clamp(0.0, w);
        let cy = (prev.cy + (b.cy - half) * scale).clamp(0.0, h);
        let bbox = BoundingBox::new(cx, cy, bw, bh);
        self.prev_box = bbox;
        self.frame_index = index;
        Ok(TrackOutput {
            bbox,
            confidence,
            response,
            weight_map,
        })
    }
}

/// Runs a whole sequence; entry 0 is the initial box with confidence 1.
pub fn track_sequence(
    model: &Model,
    config: &TrackConfig,
    frames: impl IntoIterator<Item = Result<(Tensor, Tensor)>>,
    init: &BoundingBox,
) -> Result<Vec<(BoundingBox, f64)>> {
    let mut frames = frames.into_iter();
    let (rgb, tir) = frames.next().ok_or_else(|| Error::Init("empty sequence".into()))??;
    let mut state = TrackerState::init(model, config, &rgb, &tir, init)?;
    let mut out = vec![(*init, 1.0)];
    for f in frames {
        let (rgb, tir) = f?;
        let o = state.track(model, &rgb, &tir)?;
        out.push((o.bbox, o.confidence));
    }
    Ok(out)
}

/// Fusion training samples from one sequence: for random frames, both
/// modalities' responses on a search crop centred near the groundtruth,
/// with the temporal module fed the previous frame at the same crop.
#[allow(clippy::too_many_arguments)]
pub fn collect_fusion_samples(
    model: &Model,
    config: &TrackConfig,
    frames: &[(Tensor, Tensor)],
    gt: &[BoundingBox],
    count: usize,
    max_shift: f64,
    rng: &mut impl Rng,
) -> Result<Vec<DfmSample>> {
    if frames.len() != gt.len() || frames.len() < 2 {
        return Err(Error::Train(format!("{} frames with {} boxes", frames.len(), gt.len())));
    }
    let stride = model.backbone.total_stride();
    config.validate(stride)?;
    let grid = config.grid(stride);
    let mut tiam = model.tiam.clone();
    tiam.set_flags(config.tiam_flags)?;
    let ch = model.backbone.layers[0].block.in_channels();
    let init = &gt[0];
    let t_side = config.template_side(init);
    let templates = [
        replicate(crop_resize(&frames[0].0, init.cx, init.cy, t_side, config.template_size)?, ch),
        replicate(crop_resize(&frames[0].1, init.cx, init.cy, t_side, config.template_size)?, ch),
    ]
    .map(|t| extract_features(&t, &model.backbone));
    let [t_rgb, t_tir] = templates;
    let (t_rgb, t_tir) = (t_rgb?, t_tir?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let i = rng.gen_range(1..frames.len());
        let target = gt[i];
        let side = config.search_side(&gt[i - 1]);
        let scale = side / config.search_size as f64;
        let cx = target.cx + rng.gen_range(-max_shift..=max_shift) * scale;
        let cy = target.cy + rng.gen_range(-max_shift..=max_shift) * scale;
        let half = config.search_size as f64 / 2.0;
        let in_crop = BoundingBox::new(
            half + (target.cx - cx) / scale,
            half + (target.cy - cy) / scale,
            target.w / scale,
            target.h / scale,
        );
        let labels = assign_labels(&in_crop, &grid)?;
        let respond = |cur_frame: &Tensor, prev_frame: &Tensor, template: &Tensor| -> Result<ResponseMaps> {
            let feat = |f: &Tensor, idx| -> Result<FrameFeatures> {
                let crop = replicate(crop_resize(f, cx, cy, side, config.search_size)?, ch);
                Ok(FrameFeatures {
                    raw: extract_features(&crop, &model.backbone)?,
                    frame_index: idx,
                })
            };
            let cur = feat(cur_frame, i)?;
            let pred = if config.tiam {
                tiam_forward(&cur, &feat(prev_frame, i - 1)?, &tiam)?
            } else {
                cur.raw
            };
            head_forward(template, &pred, &model.head)
        };
        let r = respond(&frames[i].0, &frames[i - 1].0, &t_rgb)?;
        let t = respond(&frames[i].1, &frames[i - 1].1, &t_tir)?;
        out.push(DfmSample::new(&r, &t, &labels)?);
    }
    Ok(out)
}

/// One `x,y,w,h,confidence` line per frame, top-left convention.
pub fn format_results(results: &[(BoundingBox, f64)]) -> String {
    let mut s = String::new();
    for (b, c) in results {
        let [x, y, w, h] = b.to_xywh();
        writeln!(s, "{x:.3},{y:.3},{w:.3},{h:.3},{c:.6}").expect("writing to a string");
    }
    s
}

pub fn parse_results(text: &str) -> Result<Vec<(BoundingBox, f64)>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.trim().split(',').collect();
        let bad = |m: &str| Error::format(offset, format!("result line {}: {m}", n + 1));
        if fields.len() != 5 {
            return Err(bad(&format!("expected 5 fields, found {}", fields.len())));
        }
        let v: Vec<f64> = fields
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| bad(&format!("{f:?} is not a number"))))
            .collect::<Result<_>>()?;
        out.push((BoundingBox::from_xywh(v[0], v[1], v[2], v[3]), v[4]));
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

pub fn write_results(path: impl AsRef<Path>, results: &[(BoundingBox, f64)]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_results(results)).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<(BoundingBox, f64)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text)
}
