//! Synthetic paired RGB/TIR sequences with scheduled degradations.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{FrameEntry, SequenceManifest};
use crate::error::{Error, Result};
use crate::siamese::BoundingBox;
use crate::tensor::Tensor;

/// One scheduled degradation over the inclusive frame range `from..=to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Degradation {
    /// RGB intensities scaled toward zero.
    RgbBlackout { from: usize, to: usize },
    /// TIR target rendered at the background temperature.
    TirCrossover { from: usize, to: usize },
}

impl Degradation {
    fn range(&self) -> (usize, usize) {
        match *self {
            Degradation::RgbBlackout { from, to } | Degradation::TirCrossover { from, to } => (from, to),
        }
    }

    pub fn covers(&self, frame: usize) -> bool {
        let (a, b) = self.range();
        (a..=b).contains(&frame)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Degradation::RgbBlackout { .. } => "rgb_blackout",
            Degradation::TirCrossover { .. } => "tir_crossover",
        }
    }
}

/// `clean`, or degradations joined with `+`, e.g.
/// `rgb_blackout(1,49)+tir_crossover(50,99)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Scheme(pub Vec<Degradation>);

impl Scheme {
    pub fn clean() -> Self {
        Scheme(Vec::new())
    }

    /// Ranges must lie inside the sequence and spare the first frame, which
    /// trackers initialize on.
    pub fn validate(&self, frames: usize) -> Result<()> {
        for d in &self.0 {
            let (a, b) = d.range();
            if a > b || b >= frames || a == 0 {
                return Err(Error::Config(format!(
                    "{}({a},{b}) is not a valid range for {frames} frames (first frame must stay clean)",
                    d.name()
                )));
            }
        }
        Ok(())
    }

    pub fn active(&self, frame: usize) -> Vec<&'static str> {
        self.0.iter().filter(|d| d.covers(frame)).map(|d| d.name()).collect()
    }

    fn blackout(&self, frame: usize) -> bool {
        self.0.iter().any(|d| matches!(d, Degradation::RgbBlackout { .. }) && d.covers(frame))
    }

    fn crossover(&self, frame: usize) -> bool {
        self.0.iter().any(|d| matches!(d, Degradation::TirCrossover { .. }) && d.covers(frame))
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "clean" {
            return Ok(Scheme::clean());
        }
        let mut out = Vec::new();
        for part in s.split('+') {
            let part = part.trim();
            let bad = || Error::Config(format!("unknown degradation scheme {part:?}"));
            let (name, args) = part.split_once('(').ok_or_else(bad)?;
            let args = args.strip_suffix(')').ok_or_else(bad)?;
            let (a, b) = args.split_once(',').ok_or_else(bad)?;
            let from: usize = a.trim().parse().map_err(|_| bad())?;
            let to: usize = b.trim().parse().map_err(|_| bad())?;
            out.push(match name.trim() {
                "rgb_blackout" => Degradation::RgbBlackout { from, to },
                "tir_crossover" => Degradation::TirCrossover { from, to },
                _ => return Err(bad()),
            });
        }
        Ok(Scheme(out))
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "clean");
        }
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "+")?;
            }
            let (a, b) = d.range();
            write!(f, "{}({a},{b})", d.name())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub seed: u64,
    /// Stream index, so sequences sharing a seed differ.
    pub index: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Target side range in pixels.
    pub target_min: f64,
    pub target_max: f64,
    /// Largest per-frame displacement.
    pub max_speed: f64,
    pub distractors: usize,
    /// Fraction of the clean RGB intensity kept during blackout.
    pub blackout_gain: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 0,
            index: 0,
            frames: 60,
            width: 240,
            height: 180,
            target_min: 24.0,
            target_max: 36.0,
            max_speed: 2.5,
            distractors: 3,
            blackout_gain: 0.05,
        }
    }
}

/// A moving rectangle with its own appearance in both modalities.
#[derive(Clone, Debug)]
struct Sprite {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    colors: [[f64; 3]; 2],
    /// 3x3 block pattern selecting between the two colours.
    pattern: [bool; 9],
    heat: f64,
    /// Cooling of the middle horizontal band; distractors are uniform.
    heat_stripes: f64,
}

impl Sprite {
    fn random(spec: &GenSpec, rng: &mut impl Rng, target: bool) -> Self {
        let w = rng.gen_range(spec.target_min..=spec.target_max);
        let h = rng.gen_range(spec.target_min..=spec.target_max);
        let margin = w.max(h);
        let speed = rng.gen_range(0.3..=1.0) * spec.max_speed;
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let first: [f64; 3] = std::array::from_fn(|_| rng.gen_range(20.0..235.0));
        // the target's pattern always has visible contrast
        let second = if target {
            first.map(|v| (255.0 - v + rng.gen_range(-20.0..20.0)).clamp(0.0, 255.0))
        } else {
            std::array::from_fn(|_| rng.gen_range(20.0..235.0))
        };
        let colors = [first, second];
        Sprite {
            cx: rng.gen_range(margin..spec.width as f64 - margin),
            cy: rng.gen_range(margin..spec.height as f64 - margin),
            w,
            h,
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            colors,
            pattern: loop {
                let p: [bool; 9] = std::array::from_fn(|_| rng.gen_bool(0.5));
                let ones = p.iter().filter(|&&b| b).count();
                if (3..=6).contains(&ones) {
                    break p;
                }
            },
            heat: if target { 200.0 } else { rng.gen_range(120.0..170.0) },
            heat_stripes: if target { 40.0 } else { 0.0 },
        }
    }

    fn bbox(&self) -> BoundingBox {
        BoundingBox::new(self.cx, self.cy, self.w, self.h)
    }

    fn step(&mut self, spec: &GenSpec, rng: &mut impl Rng) {
        self.vx += rng.gen_range(-0.3..0.3);
        self.vy += rng.gen_range(-0.3..0.3);
        let speed = self.vx.hypot(self.vy);
        if speed > spec.max_speed {
            self.vx *= spec.max_speed / speed;
            self.vy *= spec.max_speed / speed;
        }
        self.cx += self.vx;
        self.cy += self.vy;
        let (lo_x, hi_x) = (self.w / 2.0, spec.width as f64 - self.w / 2.0);
        let (lo_y, hi_y) = (self.h / 2.0, spec.height as f64 - self.h / 2.0);
        if self.cx < lo_x || self.cx > hi_x {
            self.vx = -self.vx;
            self.cx = self.cx.clamp(lo_x, hi_x);
        }
        if self.cy < lo_y || self.cy > hi_y {
            self.vy = -self.vy;
            self.cy = self.cy.clamp(lo_y, hi_y);
        }
    }

    /// Pixel rectangle covered (pixel centres inside the box).
    fn pixels(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let b = self.bbox();
        let x0 = (b.left() - 0.5).ceil().max(0.0) as usize;
        let y0 = (b.top() - 0.5).ceil().max(0.0) as usize;
        let x1 = ((b.right() - 0.5).floor() + 1.0).clamp(0.0, width as f64) as usize;
        let y1 = ((b.bottom() - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;
        (x0, y0, x1, y1)
    }
}

/// Low-frequency field: bilinear upsampling of a coarse random grid.
fn smooth_field(width: usize, height: usize, cell: usize, amplitude: f64, rng: &mut impl Rng) -> Vec<f64> {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-amplitude..amplitude)).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = y as f64 / cell as f64;
        let (gy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..width {
            let fx = x as f64 / cell as f64;
            let (gx, tx) = (fx.floor() as usize, fx.fract());
            let at = |r: usize, c: usize| grid[r * gw + c];
            let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
            let bottom = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Rendered frames of one sequence, planar u8.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSequence {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<Vec<u8>>,
    pub tir: Vec<Vec<u8>>,
    pub gt: Vec<BoundingBox>,
    pub scheme: Scheme,
}

impl RenderedSequence {
    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    /// Frame `i` as `([1,3,H,W], [1,1,H,W])` tensors, like [`Sequence::frame`].
    ///
    /// [`Sequence::frame`]: super::Sequence::frame
    pub fn frame(&self, i: usize) -> (Tensor, Tensor) {
        let (w, h) = (self.width, self.height);
        let plane = |bytes: &[u8], c| Tensor::new([1, c, h, w], bytes.iter().map(|&b| f32::from(b)).collect()).expect("rendered sizes");
        (plane(&self.rgb[i], 3), plane(&self.tir[i], 1))
    }

    pub fn frames(&self) -> Vec<(Tensor, Tensor)> {
        (0..self.len()).map(|i| self.frame(i)).collect()
    }
}

/// Renders a sequence in memory; deterministic given `spec`.
pub fn render_sequence(spec: &GenSpec, scheme: &Scheme) -> Result<RenderedSequence> {
    if spec.frames < 10 {
        return Err(Error::Config(format!("sequences need at least 10 frames, got {}", spec.frames)));
    }
    if spec.target_min <= 2.0 || spec.target_max < spec.target_min {
        return Err(Error::Config(format!(
            "target size range {}..{} is invalid",
            spec.target_min, spec.target_max
        )));
    }
    if (spec.width as f64) < 4.0 * spec.target_max || (spec.height as f64) < 4.0 * spec.target_max {
        return Err(Error::Config(format!(
            "{}x{} frame too small for targets up to {}",
            spec.width, spec.height, spec.target_max
        )));
    }
    if !(0.0..1.0).contains(&spec.blackout_gain) {
        return Err(Error::Config(format!("blackout gain {} outside [0, 1)", spec.blackout_gain)));
    }
    scheme.validate(spec.frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.index);
    let (w, h) = (spec.width, spec.height);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(70.0..150.0));
    let rgb_bg: Vec<Vec<f64>> = (0..3).map(|c| {
        let f = smooth_field(w, h, 24, 40.0, &mut rng);
        f.into_iter().map(|v| base[c] + v).collect()
    }).collect();
    let tir_level = rng.gen_range(60.0..90.0);
    let tir_bg: Vec<f64> = smooth_field(w, h, 32, 15.0, &mut rng).into_iter().map(|v| tir_level + v).collect();
    let mut target = Sprite::random(spec, &mut rng, true);
    let mut others: Vec<Sprite> = (0..spec.distractors).map(|_| Sprite::random(spec, &mut rng, false)).collect();

    let mut out = RenderedSequence {
        width: w,
        height: h,
        rgb: Vec::with_capacity(spec.frames),
        tir: Vec::with_capacity(spec.frames),
        gt: Vec::with_capacity(spec.frames),
        scheme: scheme.clone(),
    };
    for frame in 0..spec.frames {
        if frame > 0 {
            target.step(spec, &mut rng);
            for d in &mut others {
                d.step(spec, &mut rng);
            }
        }
        let mut rgb: Vec<Vec<f64>> = rgb_bg.clone();
        let mut tir = tir_bg.clone();
        // distractors first, target on top
        for (k, s) in others.iter().chain(std::iter::once(&target)).enumerate() {
            let is_target = k == others.len();
            let (x0, y0, x1, y1) = s.pixels(w, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let lx = x as f64 + 0.5 - s.bbox().left();
                    let ly = y as f64 + 0.5 - s.bbox().top();
                    let bx = ((3.0 * lx / s.w) as usize).min(2);
                    let by = ((3.0 * ly / s.h) as usize).min(2);
                    let parity = s.pattern[by * 3 + bx] as usize;
                    for c in 0..3 {
                        rgb[c][y * w + x] = s.colors[parity][c];
                    }
                    let stripe = if by == 1 { s.heat_stripes } else { 0.0 };
                    tir[y * w + x] = if is_target && scheme.crossover(frame) {
                        tir_bg[y * w + x]
                    } else {
                        s.heat - stripe
                    };
                }
            }
        }
        let blackout = scheme.blackout(frame);
        let mut rgb_bytes = Vec::with_capacity(3 * w * h);
        for plane in &rgb {
            for &v in plane {
                let v = v + rng.gen_range(-6.0..6.0);
                rgb_bytes.push(to_u8(if blackout { v * spec.blackout_gain } else { v }));
            }
        }
        let tir_bytes = tir.iter().map(|&v| to_u8(v + rng.gen_range(-4.0..4.0))).collect();
        out.rgb.push(rgb_bytes);
        out.tir.push(tir_bytes);
        out.gt.push(target.bbox());
    }
    Ok(out)
}

/// Writes frames under `out_dir/<name>/` and the manifest to
/// `out_dir/<name>.toml`.
pub fn generate_sequence(spec: &GenSpec, scheme: &Scheme, name: &str, out_dir: &Path) -> Result<SequenceManifest> {
    let seq = render_sequence(spec, scheme)?;
    let dir = out_dir.join(name);
    for sub in ["rgb", "tir"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut frames = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let rgb = format!("{name}/rgb/{i:05}.raw");
        let tir = format!("{name}/tir/{i:05}.raw");
        for (rel, bytes) in [(&rgb, &seq.rgb[i]), (&tir, &seq.tir[i])] {
            let p = out_dir.join(rel);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        frames.push(FrameEntry {
            rgb,
            tir,
            gt: seq.gt[i].to_xywh(),
            degraded: scheme.active(i).into_iter().map(String::from).collect(),
        });
    }
    let manifest = SequenceManifest {
        name: name.to_string(),
        frame_count: spec.frames,
        width: spec.width,
        height: spec.height,
        seed: spec.seed,
        index: spec.index,
        scheme: scheme.to_string(),
        frames,
    };
    manifest.save(&out_dir.join(format!("{name}.toml")))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_grammar() {
        let s: Scheme = "rgb_blackout(1,49)+tir_crossover(50,99)".parse().unwrap();
        assert_eq!(s.0.len(), 2);
        assert_eq!(s.to_string(), "rgb_blackout(1,49)+tir_crossover(50,99)");
        assert_eq!("clean".parse::<Scheme>().unwrap(), Scheme::clean());
        for bad in ["fog(1,2)", "rgb_blackout(1)", "rgb_blackout", "tir_crossover(a,3)"] {
            assert!(bad.parse::<Scheme>().is_err(), "{bad}");
        }
        assert!("rgb_blackout(5,3)".parse::<Scheme>().unwrap().validate(10).is_err());
        assert!("rgb_blackout(3,10)".parse::<Scheme>().unwrap().validate(10).is_err());
        assert!("rgb_blackout(0,3)".parse::<Scheme>().unwrap().validate(10).is_err());
    }

    #[test]
    fn boxes_stay_inside() {
        let spec = GenSpec { frames: 200, max_speed: 6.0, ..Default::default() };
        let seq = render_sequence(&spec, &Scheme::clean()).unwrap();
        for b in &seq.gt {
            assert!(b.left() >= 0.0 && b.top() >= 0.0);
            assert!(b.right() <= spec.width as f64 && b.bottom() <= spec.height as f64);
        }
    }

    #[test]
    fn blackout_darkens_rgb() {
        let spec = GenSpec { frames: 12, ..Default::default() };
        let seq = render_sequence(&spec, &"rgb_blackout(4,8)".parse().unwrap()).unwrap();
        let mean = |v: &[u8]| v.iter().map(|&b| b as f64).sum::<f64>() / v.len() as f64;
        let clean = mean(&seq.rgb[2]);
        for f in 4..=8 {
            assert!(mean(&seq.rgb[f]) < 0.1 * clean);
        }
        assert!(mean(&seq.rgb[9]) > 0.5 * clean);
    }

    #[test]
    fn crossover_hides_target_in_tir_only() {
        let spec = GenSpec { frames: 12, distractors: 0, ..Default::default() };
        let clean = render_sequence(&spec, &Scheme::clean()).unwrap();
        let cross = render_sequence(&spec, &"tir_crossover(3,5)".parse().unwrap()).unwrap();
        assert_eq!(clean.rgb, cross.rgb);
        let b = clean.gt[4];
        let at = |img: &[u8]| img[b.cy as usize * spec.width + b.cx as usize] as f64;
        assert!(at(&clean.tir[4]) > 140.0);
        assert!(at(&cross.tir[4]) < 120.0);
    }
}
