//! Benchmark plumbing: metrics, sequence directories, synthetic clips, and
//! the aggregate report. Multi-sequence aggregates are the mean of
//! per-sequence metrics, not a pool over all frames; the distinction only
//! matters when sequence lengths differ and is pinned by a test.

pub mod metrics;
pub mod sequence;
pub mod synth;

pub use metrics::{
    ao_sr, center_error_series, iou_series, precision_at, precision_curve, success_auc,
    success_curve, AoSr, PRECISION_PX, SUCCESS_STEPS,
};
pub use sequence::{load_boxes, load_sequence, save_boxes, Sequence};
pub use synth::{synth_sequence, SynthResult, SynthSpec};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// One tracked sequence scored against its ground truth.
#[derive(Debug, Clone)]
pub struct SequenceEval {
    pub name: String,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    pub success_auc: f64,
    pub precision_20: f64,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
}

impl SequenceEval {
    pub fn new(name: &str, pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<Self> {
        let ious = iou_series(pred, gt)?;
        let center_errors = center_error_series(pred, gt)?;
        let AoSr { ao, sr50, sr75 } = ao_sr(&ious)?;
        Ok(SequenceEval {
            name: name.to_string(),
            success_auc: success_auc(&ious)?,
            precision_20: precision_at(&center_errors, PRECISION_PX)?,
            ao,
            sr50,
            sr75,
            ious,
            center_errors,
        })
    }
}

/// Aggregate over sequences: each headline number is the mean of the
/// per-sequence value.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub sequences: Vec<SequenceEval>,
    pub success_auc: f64,
    pub precision_20: f64,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
}

impl EvalReport {
    pub fn from_sequences(sequences: Vec<SequenceEval>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::InvalidArgument(
                "a report needs at least one sequence".into(),
            ));
        }
        let n = sequences.len() as f64;
        let mean = |f: fn(&SequenceEval) -> f64| sequences.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            success_auc: mean(|s| s.success_auc),
            precision_20: mean(|s| s.precision_20),
            ao: mean(|s| s.ao),
            sr50: mean(|s| s.sr50),
            sr75: mean(|s| s.sr75),
            sequences,
        })
    }

    /// Key:value lines, aggregates first, then one block per sequence.
    /// With `curves`, appends mean success and precision curve tables as
    /// "threshold,value" lines.
    pub fn render(&self, curves: bool) -> String {
        let mut out = String::new();
        out.push_str(&format!("sequences: {}\n", self.sequences.len()));
        out.push_str(&format!("success_auc: {}\n", self.success_auc));
        out.push_str(&format!("precision_20: {}\n", self.precision_20));
        out.push_str(&format!("ao: {}\n", self.ao));
        out.push_str(&format!("sr_0.50: {}\n", self.sr50));
        out.push_str(&format!("sr_0.75: {}\n", self.sr75));
        for s in &self.sequences {
            out.push_str(&format!("{}.success_auc: {}\n", s.name, s.success_auc));
            out.push_str(&format!("{}.precision_20: {}\n", s.name, s.precision_20));
            out.push_str(&format!("{}.ao: {}\n", s.name, s.ao));
            out.push_str(&format!("{}.sr_0.50: {}\n", s.name, s.sr50));
            out.push_str(&format!("{}.sr_0.75: {}\n", s.name, s.sr75));
        }
        if curves {
            out.push_str("# success curve (threshold,value)\n");
            for (t, v) in self.mean_success_curve() {
                out.push_str(&format!("{t},{v}\n"));
            }
            out.push_str("# precision curve (threshold,value)\n");
            for (t, v) in self.mean_precision_curve() {
                out.push_str(&format!("{t},{v}\n"));
            }
        }
        out
    }

    fn mean_success_curve(&self) -> Vec<(f64, f64)> {
        let mut acc = vec![0.0; SUCCESS_STEPS];
        let mut ts = vec![0.0; SUCCESS_STEPS];
        for s in &self.sequences {
            let curve = success_curve(&s.ious).expect("scored sequence");
            for (k, (t, v)) in curve.into_iter().enumerate() {
                ts[k] = t;
                acc[k] += v;
            }
        }
        let n = self.sequences.len() as f64;
        ts.into_iter().zip(acc.into_iter().map(|v| v / n)).collect()
    }

    fn mean_precision_curve(&self) -> Vec<(f64, f64)> {
        let mut acc = vec![0.0; 51];
        let mut ts = vec![0.0; 51];
        for s in &self.sequences {
            let curve = precision_curve(&s.center_errors).expect("scored sequence");
            for (k, (t, v)) in curve.into_iter().enumerate() {
                ts[k] = t;
                acc[k] += v;
            }
        }
        let n = self.sequences.len() as f64;
        ts.into_iter().zip(acc.into_iter().map(|v| v / n)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxes(specs: &[(f64, f64)]) -> Vec<BoundingBox> {
        specs
            .iter()
            .map(|&(cx, cy)| BoundingBox::new(cx, cy, 20.0, 20.0).unwrap())
            .collect()
    }

    #[test]
    fn perfect_predictions_score_ones() {
        let gt = boxes(&[(50.0, 50.0), (60.0, 52.0), (70.0, 54.0)]);
        let eval = SequenceEval::new("perfect", &gt, &gt).unwrap();
        assert_eq!(eval.success_auc, 1.0);
        assert_eq!(eval.precision_20, 1.0);
        assert_eq!(eval.ao, 1.0);
        assert_eq!((eval.sr50, eval.sr75), (1.0, 1.0));
    }

    #[test]
    fn aggregation_is_sequence_mean_not_frame_pool() {
        // One 1-frame-equivalent perfect sequence, one longer mediocre one.
        let gt_a = boxes(&[(50.0, 50.0), (60.0, 50.0)]);
        let a = SequenceEval::new("a", &gt_a, &gt_a).unwrap();

        let gt_b = boxes(&[(50.0, 50.0); 6]);
        // Offset by 10 px on one axis: IoU = 10*20 / (2*400 - 200) = 1/3.
        let pred_b = boxes(&[(60.0, 50.0); 6]);
        let b = SequenceEval::new("b", &pred_b, &gt_b).unwrap();
        assert!((b.ao - 1.0 / 3.0).abs() < 1e-12);

        let report = EvalReport::from_sequences(vec![a, b]).unwrap();
        // Sequence mean: (1 + 1/3) / 2, regardless of the length imbalance.
        assert!((report.ao - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!(report.ao <= 1.0 && report.ao >= 0.0);
    }

    #[test]
    fn report_renders_parseable_lines() {
        let gt = boxes(&[(50.0, 50.0), (60.0, 52.0)]);
        let eval = SequenceEval::new("s1", &gt, &gt).unwrap();
        let report = EvalReport::from_sequences(vec![eval]).unwrap();
        let text = report.render(true);
        assert!(text.contains("ao: 1\n"));
        assert!(text.contains("s1.success_auc: 1\n"));
        let curve_lines = text
            .lines()
            .filter(|l| !l.starts_with('#') && l.contains(',') && !l.contains(':'))
            .count();
        assert_eq!(curve_lines, 21 + 51);
        for line in text.lines().filter(|l| l.contains(": ")) {
            let (_, v) = line.split_once(": ").unwrap();
            assert!(v.parse::<f64>().is_ok(), "line {line}");
        }
        assert!(EvalReport::from_sequences(vec![]).is_err());
    }
}
