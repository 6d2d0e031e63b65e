//! Segmentation metrics: confusion-matrix accumulation and mean IoU.

use crate::error::{IdmError, Result};
use crate::tensor::{LabelMap, IGNORE_LABEL};
use serde::Serialize;

/// C×C count matrix; rows are ground truth, columns are predictions.
/// Ignored ground-truth pixels are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    #[inline]
    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fold one prediction/truth pair into the matrix.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.h != truth.h || pred.w != truth.w {
            return Err(IdmError::Contract(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.h, pred.w, truth.h, truth.w
            )));
        }
        let c = self.num_classes as u8;
        for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
            if t == IGNORE_LABEL {
                continue;
            }
            if t >= c || (p >= c && p != IGNORE_LABEL) {
                return Err(IdmError::Contract(format!(
                    "label value outside [0, {c}): truth {t}, pred {p}"
                )));
            }
            if p == IGNORE_LABEL {
                continue;
            }
            self.counts[t as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Matrices merge by addition, so evaluation parallelizes over images.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Per-class IoU and their mean; classes absent from both prediction and
/// truth carry `None` and are excluded from the mean.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_acc: f64,
    pub num_images: usize,
}

/// Reduce a confusion matrix to per-class IoU, mIoU, and pixel accuracy.
pub fn miou(cm: &ConfusionMatrix, num_images: usize) -> Result<EvalReport> {
    if cm.total() == 0 {
        return Err(IdmError::Eval("empty confusion matrix".into()));
    }
    let c = cm.num_classes;
    let mut per_class = Vec::with_capacity(c);
    let mut sum = 0.0;
    let mut included = 0usize;
    let mut diag = 0u64;
    for k in 0..c {
        let tp = cm.count(k, k);
        diag += tp;
        let row: u64 = (0..c).map(|j| cm.count(k, j)).sum();
        let col: u64 = (0..c).map(|i| cm.count(i, k)).sum();
        let union = row + col - tp;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            included += 1;
        }
    }
    if included == 0 {
        return Err(IdmError::Eval("no class has a nonzero union".into()));
    }
    Ok(EvalReport {
        per_class_iou: per_class,
        miou: sum / included as f64,
        pixel_acc: diag as f64 / cm.total() as f64,
        num_images,
    })
}

/// Convenience: mIoU of a prediction/truth pair list.
pub fn evaluate_pairs(pairs: &[(&LabelMap, &LabelMap)], num_classes: usize) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for (pred, truth) in pairs {
        cm.accumulate(pred, truth)?;
    }
    miou(&cm, pairs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(h: usize, w: usize, values: &[u8]) -> LabelMap {
        LabelMap::from_vec(h, w, values.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let truth = label(2, 2, &[0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&truth, &truth).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.count(2, 2), 1);
        assert_eq!(cm.total(), 4);
        let report = miou(&cm, 1).unwrap();
        assert_eq!(report.miou, 1.0);
        assert_eq!(report.pixel_acc, 1.0);
    }

    #[test]
    fn ignored_truth_leaves_matrix_unchanged() {
        let truth = label(1, 3, &[IGNORE_LABEL; 3]);
        let pred = label(1, 3, &[0, 1, 2]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn hand_counted_two_by_two() {
        let truth = label(2, 2, &[0, 0, 1, 1]);
        let pred = label(2, 2, &[0, 1, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.count(1, 0), 0);
        let report = miou(&cm, 1).unwrap();
        assert!((report.per_class_iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((report.per_class_iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.miou - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn complement_prediction_scores_zero() {
        let truth = label(1, 4, &[0, 0, 1, 1]);
        let pred = label(1, 4, &[1, 1, 0, 0]);
        let report = evaluate_pairs(&[(&pred, &truth)], 2).unwrap();
        assert_eq!(report.miou, 0.0);
    }

    #[test]
    fn absent_classes_are_flagged_and_excluded() {
        let truth = label(1, 2, &[0, 0]);
        let pred = label(1, 2, &[0, 0]);
        let report = evaluate_pairs(&[(&pred, &truth)], 2).unwrap();
        assert_eq!(report.per_class_iou.len(), 2);
        assert!(report.per_class_iou[1].is_none());
        assert_eq!(report.miou, 1.0);
    }

    #[test]
    fn accumulate_is_associative_across_images() {
        let t1 = label(1, 3, &[0, 1, 2]);
        let p1 = label(1, 3, &[0, 2, 2]);
        let t2 = label(1, 3, &[2, 1, 0]);
        let p2 = label(1, 3, &[2, 1, 1]);
        let mut batched = ConfusionMatrix::new(3);
        batched.accumulate(&p1, &t1).unwrap();
        batched.accumulate(&p2, &t2).unwrap();
        let mut merged = ConfusionMatrix::new(3);
        let mut a = ConfusionMatrix::new(3);
        a.accumulate(&p1, &t1).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.accumulate(&p2, &t2).unwrap();
        merged.merge(&a);
        merged.merge(&b);
        assert_eq!(batched, merged);
    }

    #[test]
    fn empty_matrix_is_eval_error() {
        let cm = ConfusionMatrix::new(3);
        assert!(matches!(miou(&cm, 0), Err(IdmError::Eval(_))));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let t = label(1, 2, &[0, 0]);
        let p = label(2, 1, &[0, 0]);
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(cm.accumulate(&p, &t), Err(IdmError::Contract(_))));
    }
}
