//! Segmentation metrics: per-pixel confusion counts, the standard ratio
//! metrics derived from them, and macro-averaged reports.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel confusion counts for one image; foreground is +1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

/// Counts tp/fp/fn/tn between two two-valued masks of equal shape.
pub fn confusion(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape_mismatch("confusion", truth.shape(), pred.shape()));
    }
    let mut c = ConfusionCounts {
        true_pos: 0,
        false_pos: 0,
        false_neg: 0,
        true_neg: 0,
    };
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p > 0.0, t > 0.0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// The ratio metrics of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub accuracy: f64,
    pub jaccard: f64,
    pub dice: f64,
    pub recall: f64,
    pub precision: f64,
    /// Both truth and prediction were empty; the ratio metrics were scored
    /// as 1.0 by policy.
    pub both_empty: bool,
}

/// Computes accuracy, Jaccard, Dice, recall, and precision from counts.
///
/// Empty-denominator policy: when both masks are empty every ratio metric is
/// 1.0 and the image is flagged; when exactly one is empty, undefined ratios
/// score 0.
pub fn metrics(id: impl Into<String>, c: &ConfusionCounts) -> ImageMetrics {
    let (tp, fp, fn_, tn) = (
        c.true_pos as f64,
        c.false_pos as f64,
        c.false_neg as f64,
        c.true_neg as f64,
    );
    let total = tp + fp + fn_ + tn;
    let accuracy = if total > 0.0 { (tp + tn) / total } else { 1.0 };
    let both_empty = c.true_pos + c.false_pos + c.false_neg == 0;
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let (jaccard, dice, recall, precision) = if both_empty {
        (1.0, 1.0, 1.0, 1.0)
    } else {
        (
            ratio(tp, tp + fp + fn_),
            ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            ratio(tp, tp + fn_),
            ratio(tp, tp + fp),
        )
    };
    ImageMetrics {
        id: id.into(),
        accuracy,
        jaccard,
        dice,
        recall,
        precision,
        both_empty,
    }
}

/// Macro-averaged metrics over a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_accuracy: f64,
    pub mean_jaccard: f64,
    pub mean_dice: f64,
    pub mean_recall: f64,
    pub mean_precision: f64,
    pub threshold: f32,
}

/// Unweighted per-image mean (macro average); per-image values are retained.
pub fn aggregate(per_image: Vec<ImageMetrics>, threshold: f32) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::InvalidArgument("no images to aggregate".into()));
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        mean_accuracy: mean(|m| m.accuracy),
        mean_jaccard: mean(|m| m.jaccard),
        mean_dice: mean(|m| m.dice),
        mean_recall: mean(|m| m.recall),
        mean_precision: mean(|m| m.precision),
        threshold,
        per_image,
    })
}

impl MetricsReport {
    pub fn aggregate_line(&self) -> String {
        format!(
            "aggregate\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.mean_accuracy, self.mean_jaccard, self.mean_dice, self.mean_recall, self.mean_precision
        )
    }

    /// Renders the report: a header naming the conventions, one line per
    /// image, then the aggregate line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# segmentation metrics\n");
        out.push_str("# aggregation: macro (unweighted per-image mean)\n");
        out.push_str(&format!("# binarization threshold: {}\n", self.threshold));
        out.push_str("# empty-mask policy: both-empty scores 1.0 and is flagged `*`\n");
        out.push_str("id\taccuracy\tjaccard\tdice\trecall\tprecision\n");
        for m in &self.per_image {
            out.push_str(&format!(
                "{}{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                m.id,
                if m.both_empty { "*" } else { "" },
                m.accuracy,
                m.jaccard,
                m.dice,
                m.recall,
                m.precision
            ));
        }
        out.push_str(&self.aggregate_line());
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts {
            true_pos: tp,
            false_pos: fp,
            false_neg: fn_,
            true_neg: tn,
        }
    }

    #[test]
    fn hand_counted_two_by_two() {
        // truth foreground at (0,0),(0,1); prediction at (0,1),(1,1)
        let truth = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let pred = Tensor::new(Shape::new(1, 1, 2, 2), vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!(c, counts(1, 1, 1, 1));
        assert_eq!(c.total(), 4);

        let m = metrics("hand", &c);
        assert_eq!(m.accuracy, 0.5);
        assert!((m.jaccard - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.dice, 0.5);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.precision, 0.5);
        assert!(!m.both_empty);
    }

    #[test]
    fn all_foreground_match() {
        let t = Tensor::filled(Shape::new(1, 1, 2, 2), 1.0);
        let c = confusion(&t, &t).unwrap();
        assert_eq!(c, counts(4, 0, 0, 0));
        let m = metrics("full", &c);
        assert_eq!(
            (m.accuracy, m.jaccard, m.dice, m.recall, m.precision),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn both_empty_scores_one_and_flags() {
        let m = metrics("empty", &counts(0, 0, 0, 16));
        assert!(m.both_empty);
        assert_eq!(
            (m.accuracy, m.jaccard, m.dice, m.recall, m.precision),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn one_sided_empty_scores_zero_ratios() {
        // truth empty, prediction not
        let m = metrics("fp", &counts(0, 3, 0, 13));
        assert!(!m.both_empty);
        assert_eq!((m.jaccard, m.dice, m.recall, m.precision), (0.0, 0.0, 0.0, 0.0));
        // prediction empty, truth not
        let m = metrics("fn", &counts(0, 0, 5, 11));
        assert_eq!((m.jaccard, m.dice, m.recall, m.precision), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn aggregate_is_plain_mean() {
        let a = metrics("a", &counts(4, 0, 0, 0)); // dice 1.0
        let b = metrics("b", &counts(1, 1, 2, 0)); // dice 2/(2+3) = 0.4
        let report = aggregate(vec![a.clone(), b], 0.0).unwrap();
        assert!((report.mean_dice - 0.7).abs() < 1e-12);
        let single = aggregate(vec![a.clone()], 0.0).unwrap();
        assert_eq!(single.mean_dice, a.dice);
        assert_eq!(single.per_image.len(), 1);
    }

    #[test]
    fn report_text_names_conventions() {
        let report = aggregate(vec![metrics("img1", &counts(0, 0, 0, 4))], 0.25).unwrap();
        let text = report.to_text();
        assert!(text.contains("macro"));
        assert!(text.contains("threshold: 0.25"));
        assert!(text.contains("empty-mask policy"));
        assert!(text.contains("img1*"));
        assert!(text.lines().last().unwrap().starts_with("aggregate\t"));
    }

    proptest! {
        // dice == 2J/(1+J) whenever the image is not flagged
        #[test]
        fn dice_jaccard_identity(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
            let m = metrics("p", &counts(tp, fp, fn_, tn));
            if !m.both_empty {
                let expect = 2.0 * m.jaccard / (1.0 + m.jaccard);
                prop_assert!((m.dice - expect).abs() < 1e-9);
            }
            prop_assert!(m.accuracy >= 0.0 && m.accuracy <= 1.0);
            prop_assert!(m.jaccard >= 0.0 && m.jaccard <= 1.0);
            prop_assert!(m.dice >= 0.0 && m.dice <= 1.0);
            prop_assert!(m.recall >= 0.0 && m.recall <= 1.0);
            prop_assert!(m.precision >= 0.0 && m.precision <= 1.0);
        }

        // converting a false negative into a true positive never hurts
        #[test]
        fn extra_true_positive_is_monotone(tp in 0u64..20, fp in 0u64..20, fn_ in 1u64..20, tn in 0u64..20) {
            let before = metrics("b", &counts(tp, fp, fn_, tn));
            let after = metrics("a", &counts(tp + 1, fp, fn_ - 1, tn));
            prop_assert!(after.recall >= before.recall - 1e-12);
            prop_assert!(after.dice >= before.dice - 1e-12);
            prop_assert!(after.jaccard >= before.jaccard - 1e-12);
        }
    }
}
