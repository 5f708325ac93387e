//! Reset-based evaluation: a tracker that loses the target (zero overlap)
//! is re-initialized on groundtruth a fixed number of frames later.

use serde::{Deserialize, Serialize};

use super::metrics::iou;
use crate::error::{Error, Result};
use crate::siamese::BoundingBox;

pub const DEFAULT_SKIP: usize = 5;

/// A tracker that can be (re)started on any frame.
pub trait ResetTracker {
    fn init(&mut self, frame: usize, gt: &BoundingBox) -> Result<()>;
    fn update(&mut self, frame: usize) -> Result<BoundingBox>;
}

/// Replays precomputed boxes; `init` is a no-op.
pub struct ReplayTracker {
    pub boxes: Vec<BoundingBox>,
}

impl ResetTracker for ReplayTracker {
    fn init(&mut self, _frame: usize, _gt: &BoundingBox) -> Result<()> {
        Ok(())
    }

    fn update(&mut self, frame: usize) -> Result<BoundingBox> {
        self.boxes
            .get(frame)
            .copied()
            .ok_or_else(|| Error::Eval(format!("no replayed box for frame {frame}")))
    }
}

/// Overlaps from one (re)initialization up to a failure or the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub overlaps: Vec<f64>,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VotResult {
    pub frames: usize,
    /// Mean overlap over tracked frames, excluding initialization and
    /// failure frames.
    pub accuracy: f64,
    /// Failures per 100 frames.
    pub robustness: f64,
    pub inits: Vec<usize>,
    pub failures: Vec<usize>,
    pub segments: Vec<Segment>,
}

pub fn vot_eval(tracker: &mut dyn ResetTracker, gt: &[BoundingBox], skip: usize) -> Result<VotResult> {
    if skip == 0 {
        return Err(Error::Config("reinitialization skip must be at least 1".into()));
    }
    if gt.len() < 2 {
        return Err(Error::Eval(format!("reset protocol needs at least 2 frames, got {}", gt.len())));
    }
    let n = gt.len();
    let mut inits = Vec::new();
    let mut failures = Vec::new();
    let mut segments = Vec::new();
    let (mut sum, mut count) = (0.0, 0usize);
    let mut t = 0;
    while t < n {
        tracker.init(t, &gt[t])?;
        inits.push(t);
        let mut seg = Segment {
            start: t,
            overlaps: Vec::new(),
            failed: false,
        };
        t += 1;
        while t < n {
            let o = iou(&tracker.update(t)?, &gt[t]);
            seg.overlaps.push(o);
            if o <= 0.0 {
                seg.failed = true;
                failures.push(t);
                t += skip;
                break;
            }
            sum += o;
            count += 1;
            t += 1;
        }
        segments.push(seg);
    }
    Ok(VotResult {
        frames: n,
        accuracy: if count == 0 { 0.0 } else { sum / count as f64 },
        robustness: failures.len() as f64 * 100.0 / n as f64,
        inits,
        failures,
        segments,
    })
}

/// Simplified expected average overlap. For each length `L` between half
/// and one and a half times the median sequence length, every segment
/// contributes its mean overlap over its first `L` frames: failed segments
/// are zero-padded to `L`, unfinished ones are averaged over the frames
/// they have. The result is the mean over `L`.
pub fn expected_average_overlap(segments: &[Segment], sequence_lengths: &[usize]) -> f64 {
    let usable: Vec<&Segment> = segments.iter().filter(|s| !s.overlaps.is_empty()).collect();
    if usable.is_empty() || sequence_lengths.is_empty() {
        return 0.0;
    }
    let mut lengths = sequence_lengths.to_vec();
    lengths.sort_unstable();
    let m = lengths.len();
    let median = if m % 2 == 1 {
        lengths[m / 2] as f64
    } else {
        (lengths[m / 2 - 1] + lengths[m / 2]) as f64 / 2.0
    };
    let lo = ((0.5 * median).floor() as usize).max(1);
    let hi = ((1.5 * median).ceil() as usize).max(lo);
    let mut total = 0.0;
    for l in lo..=hi {
        let phi: f64 = usable
            .iter()
            .map(|s| {
                let k = l.min(s.overlaps.len());
                let head: f64 = s.overlaps[..k].iter().sum();
                if s.failed {
                    head / l as f64
                } else {
                    head / k as f64
                }
            })
            .sum();
        total += phi / usable.len() as f64;
    }
    total / (hi - lo + 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(n: usize) -> Vec<BoundingBox> {
        (0..n).map(|i| BoundingBox::from_xywh(i as f64, 10.0, 20.0, 20.0)).collect()
    }

    #[test]
    fn perfect_tracker() {
        let g = gt(30);
        let mut t = ReplayTracker { boxes: g.clone() };
        let r = vot_eval(&mut t, &g, 5).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.robustness, 0.0);
        assert_eq!(r.inits, vec![0]);
        assert_eq!(expected_average_overlap(&r.segments, &[30]), 1.0);
    }

    #[test]
    fn zero_skip_rejected() {
        let g = gt(10);
        assert!(vot_eval(&mut ReplayTracker { boxes: g.clone() }, &g, 0).is_err());
    }
}
