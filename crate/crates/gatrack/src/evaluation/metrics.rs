//! Benchmark metrics: one-pass-evaluation success/precision and average
//! overlap. Conventions are pinned here once: the success curve counts
//! IoU >= t at 21 thresholds 0, 0.05, ..., 1.0; precision counts center
//! error <= threshold; the overlap success rates SR_t use strict IoU > t.

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

pub const SUCCESS_STEPS: usize = 21;
pub const PRECISION_PX: f64 = 20.0;

fn check_series(name: &str, xs: &[f64], lo: f64, hi: f64) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument(format!("{name}: empty series")));
    }
    for (i, &v) in xs.iter().enumerate() {
        if !(v.is_finite() && (lo..=hi).contains(&v)) {
            return Err(Error::InvalidArgument(format!(
                "{name}: value {v} at index {i} outside [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

/// The 21-point success curve: (threshold, fraction of frames with
/// IoU >= threshold).
pub fn success_curve(ious: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_series("success_curve", ious, 0.0, 1.0)?;
    let n = ious.len() as f64;
    Ok((0..SUCCESS_STEPS)
        .map(|i| {
            let t = i as f64 / (SUCCESS_STEPS - 1) as f64;
            let frac = ious.iter().filter(|&&v| v >= t).count() as f64 / n;
            (t, frac)
        })
        .collect())
}

/// Area under the success curve: the mean of the 21 curve samples.
pub fn success_auc(ious: &[f64]) -> Result<f64> {
    let curve = success_curve(ious)?;
    Ok(curve.iter().map(|(_, f)| f).sum::<f64>() / curve.len() as f64)
}

/// Fraction of frames whose center error is within `threshold` pixels.
pub fn precision_at(center_errors: &[f64], threshold: f64) -> Result<f64> {
    check_series("precision_at", center_errors, 0.0, f64::INFINITY)?;
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "precision threshold must be >= 0, got {threshold}"
        )));
    }
    let hits = center_errors.iter().filter(|&&e| e <= threshold).count();
    Ok(hits as f64 / center_errors.len() as f64)
}

/// Precision curve over integer pixel thresholds 0..=50.
pub fn precision_curve(center_errors: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_series("precision_curve", center_errors, 0.0, f64::INFINITY)?;
    (0..=50)
        .map(|px| Ok((px as f64, precision_at(center_errors, px as f64)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AoSr {
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
}

/// Average overlap plus the two standard success rates. SR is strict:
/// a frame at exactly IoU 0.5 does not count for SR_0.5.
pub fn ao_sr(ious: &[f64]) -> Result<AoSr> {
    check_series("ao_sr", ious, 0.0, 1.0)?;
    let n = ious.len() as f64;
    let sr = |t: f64| ious.iter().filter(|&&v| v > t).count() as f64 / n;
    Ok(AoSr {
        ao: ious.iter().sum::<f64>() / n,
        sr50: sr(0.5),
        sr75: sr(0.75),
    })
}

/// Per-frame IoU between prediction and ground truth.
pub fn iou_series(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::CountMismatch {
            left: pred.len(),
            left_name: "predictions".into(),
            right: gt.len(),
            right_name: "ground truth".into(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("iou_series: empty series".into()));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect())
}

/// Per-frame Euclidean distance between box centers.
pub fn center_error_series(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::CountMismatch {
            left: pred.len(),
            left_name: "predictions".into(),
            right: gt.len(),
            right_name: "ground truth".into(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument(
            "center_error_series: empty series".into(),
        ));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.center_distance(g))
        .collect())
}
