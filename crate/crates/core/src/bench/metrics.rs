//! One-pass evaluation metrics.

use crate::error::{Error, Result};
use crate::siamese::BoundingBox;

pub const DEFAULT_PRECISION_THRESHOLD: f64 = 5.0;
pub const DEFAULT_SUCCESS_THRESHOLD: f64 = 0.6;
/// Overlap thresholds 0.00, 0.05, ..., 1.00 for the success AUC.
pub const AUC_STEPS: usize = 21;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn check_lengths(results: &[BoundingBox], gt: &[BoundingBox]) -> Result<()> {
    if results.len() != gt.len() {
        return Err(Error::Eval(format!("{} results for {} groundtruth frames", results.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::Eval("no frames to evaluate".into()));
    }
    Ok(())
}

/// Fraction of frames whose centre error is strictly below `threshold`.
pub fn precision(results: &[BoundingBox], gt: &[BoundingBox], threshold: f64) -> Result<f64> {
    check_lengths(results, gt)?;
    let hits = results.iter().zip(gt).filter(|(r, g)| r.center_distance(g) < threshold).count();
    Ok(hits as f64 / gt.len() as f64)
}

pub fn auc_thresholds() -> impl Iterator<Item = f64> {
    (0..AUC_STEPS).map(|k| k as f64 / (AUC_STEPS - 1) as f64)
}

/// `(rate, auc)`: the fraction of frames with IoU strictly above
/// `threshold`, and the mean of that fraction over [`auc_thresholds`].
pub fn success(results: &[BoundingBox], gt: &[BoundingBox], threshold: f64) -> Result<(f64, f64)> {
    check_lengths(results, gt)?;
    let overlaps: Vec<f64> = results.iter().zip(gt).map(|(r, g)| iou(r, g)).collect();
    let rate_at = |t: f64| overlaps.iter().filter(|&&o| o > t).count() as f64 / overlaps.len() as f64;
    let auc = auc_thresholds().map(rate_at).sum::<f64>() / AUC_STEPS as f64;
    Ok((rate_at(threshold), auc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes() {
        let b = vec![BoundingBox::from_xywh(3.0, 4.0, 10.0, 20.0); 7];
        assert_eq!(precision(&b, &b, 5.0).unwrap(), 1.0);
        let (rate, auc) = success(&b, &b, 0.6).unwrap();
        assert_eq!(rate, 1.0);
        assert!((auc - 20.0 / 21.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_and_nested() {
        let a = [BoundingBox::from_xywh(0.0, 0.0, 10.0, 10.0)];
        let far = [BoundingBox::from_xywh(200.0, 0.0, 10.0, 10.0)];
        assert_eq!(success(&a, &far, 0.6).unwrap(), (0.0, 0.0));
        assert_eq!(precision(&a, &far, 5.0).unwrap(), 0.0);
        // same centre, half the area
        let half = [BoundingBox::new(5.0, 5.0, 10.0, 5.0)];
        assert!((iou(&a[0], &half[0]) - 0.5).abs() < 1e-15);
        assert_eq!(success(&half, &a, 0.6).unwrap().0, 0.0);
    }

    #[test]
    fn length_mismatch() {
        let a = [BoundingBox::from_xywh(0.0, 0.0, 1.0, 1.0)];
        assert!(matches!(precision(&a, &[], 5.0), Err(Error::Eval(_))));
        assert!(matches!(success(&[], &a, 0.6), Err(Error::Eval(_))));
    }
}
