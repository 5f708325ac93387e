//! Response-map pairs where exactly one modality carries the target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{rgb_weight_f64, DfmParams, DfmSample};
use crate::error::{Error, Result};
use crate::siamese::{assign_labels, BoundingBox, GridGeometry, LABEL_POSITIVE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Tir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticMapConfig {
    pub grid_size: usize,
    pub stride: usize,
    pub search_size: usize,
    /// Peak-to-floor logit range of the clean response.
    pub peak: f64,
    /// Noise added to the clean response.
    pub clean_noise: f64,
    /// Standard deviation of the noise-only response.
    pub noise_std: f64,
    /// Largest target offset from the crop center, in pixels.
    pub max_shift: f64,
}

impl Default for SyntheticMapConfig {
    fn default() -> Self {
        SyntheticMapConfig {
            grid_size: 13,
            stride: 8,
            search_size: 160,
            peak: 6.0,
            clean_noise: 0.3,
            noise_std: 2.0,
            max_shift: 24.0,
        }
    }
}

impl SyntheticMapConfig {
    pub fn grid(&self) -> GridGeometry {
        GridGeometry {
            size: self.grid_size,
            stride: self.stride,
            search_size: self.search_size,
        }
    }
}

/// One sample: the reliable modality peaks over the target, the other is
/// independent noise around the same mean logit, so only the shape of a
/// map tells which one to trust.
pub fn synthetic_sample(cfg: &SyntheticMapConfig, reliable: Modality, rng: &mut impl Rng) -> Result<DfmSample> {
    let grid = cfg.grid();
    let half = cfg.search_size as f64 / 2.0;
    let side = cfg.search_size as f64 / 4.0;
    let gt = BoundingBox::new(
        half + rng.gen_range(-cfg.max_shift..=cfg.max_shift),
        half + rng.gen_range(-cfg.max_shift..=cfg.max_shift),
        side * rng.gen_range(0.8..1.25),
        side * rng.gen_range(0.8..1.25),
    );
    let labels = assign_labels(&gt, &grid)?;
    let normal = |s: f64| Normal::new(0.0, s).map_err(|e| Error::Sampling(e.to_string()));
    let clean_n = normal(cfg.clean_noise)?;
    let noise_n = normal(cfg.noise_std)?;
    let n = cfg.grid_size;
    let (mut clean_pos, mut clean_neg) = (Vec::with_capacity(n * n), Vec::with_capacity(n * n));
    let (mut noisy_pos, mut noisy_neg) = (Vec::with_capacity(n * n), Vec::with_capacity(n * n));
    let sx = gt.w / 4.0;
    let sy = gt.h / 4.0;
    for row in 0..n {
        for col in 0..n {
            let (x, y) = grid.point(row, col);
            let g = (-0.5 * (((x - gt.cx) / sx).powi(2) + ((y - gt.cy) / sy).powi(2))).exp();
            let logit = cfg.peak * (g - 0.5);
            clean_pos.push(logit + clean_n.sample(rng));
            clean_neg.push(-logit + clean_n.sample(rng));
            noisy_pos.push(noise_n.sample(rng));
        }
    }
    let mean = clean_pos.iter().sum::<f64>() / clean_pos.len() as f64;
    for v in &mut noisy_pos {
        *v += mean;
        noisy_neg.push(-*v);
    }
    let (rgb_pos, rgb_neg, tir_pos, tir_neg) = match reliable {
        Modality::Rgb => (clean_pos, clean_neg, noisy_pos, noisy_neg),
        Modality::Tir => (noisy_pos, noisy_neg, clean_pos, clean_neg),
    };
    Ok(DfmSample {
        h: n,
        w: n,
        rgb_pos,
        rgb_neg,
        tir_pos,
        tir_neg,
        labels: labels.cls_label.data().to_vec(),
    })
}

/// `count` samples alternating the reliable modality, seeded.
pub fn synthetic_set(cfg: &SyntheticMapConfig, count: usize, seed: u64) -> Result<Vec<(DfmSample, Modality)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let m = if i % 2 == 0 { Modality::Rgb } else { Modality::Tir };
            synthetic_sample(cfg, m, &mut rng).map(|s| (s, m))
        })
        .collect()
}

/// Mean weight given to `reliable` over the sample's positive positions,
/// where the decision is made. (Spatial standardization pins the map-wide
/// mean of the weight near one half, so a whole-map average carries no
/// signal.)
pub fn reliable_weight(sample: &DfmSample, reliable: Modality, params: &DfmParams) -> f64 {
    let w = rgb_weight_f64(&sample.rgb_pos, &sample.tir_pos, sample.h, sample.w, params);
    let (sum, count) = w
        .iter()
        .zip(&sample.labels)
        .filter(|(_, &l)| l == LABEL_POSITIVE)
        .fold((0.0, 0usize), |(s, c), (&wv, _)| {
            (s + if reliable == Modality::Rgb { wv } else { 1.0 - wv }, c + 1)
        });
    if count == 0 {
        0.5
    } else {
        sum / count as f64
    }
}
