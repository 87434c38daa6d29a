//! Classification metrics: overall accuracy, average per-class accuracy,
//! and Cohen's kappa, all derived from a confusion matrix.

use serde::Serialize;

use crate::error::{Error, Result};

/// K x K count matrix; rows are true classes, columns predicted classes,
/// both 1-based at the API surface.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArg("confusion matrix needs k >= 1".into()));
        }
        Ok(ConfusionMatrix { k, counts: vec![0; k * k] })
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        let mut cm = Self::new(k)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            cm.counts[i * k..(i + 1) * k].copy_from_slice(row);
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    /// Records one sample with 1-based true and predicted classes.
    pub fn record(&mut self, true_class: usize, pred_class: usize) -> Result<()> {
        if true_class == 0 || true_class > self.k || pred_class == 0 || pred_class > self.k {
            return Err(Error::InvalidArg(format!(
                "classes must lie in 1..={}, got true {true_class}, pred {pred_class}",
                self.k
            )));
        }
        self.counts[(true_class - 1) * self.k + (pred_class - 1)] += 1;
        Ok(())
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[(true_class - 1) * self.k + (pred_class - 1)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.counts[i * self.k + i]).sum()
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        self.counts[(true_class - 1) * self.k..true_class * self.k].iter().sum()
    }

    pub fn col_sum(&self, pred_class: usize) -> u64 {
        (0..self.k).map(|i| self.counts[i * self.k + (pred_class - 1)]).sum()
    }
}

/// `trace / total`.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArg("empty confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Mean per-class recall plus the classes excluded for having no true
/// samples.
#[derive(Clone, Debug, Serialize)]
pub struct AverageAccuracy {
    pub value: f64,
    /// 1-based classes with zero row sum, excluded from the mean.
    pub excluded: Vec<usize>,
    /// Per-class recall; `None` for excluded classes.
    pub per_class: Vec<Option<f64>>,
}

/// Mean over classes of `diag / row_sum`; zero-support classes are excluded
/// from the mean and reported.
pub fn average_accuracy(cm: &ConfusionMatrix) -> Result<AverageAccuracy> {
    let mut per_class = Vec::with_capacity(cm.classes());
    let mut excluded = Vec::new();
    let mut acc = 0.0;
    let mut counted = 0usize;
    for class in 1..=cm.classes() {
        let support = cm.row_sum(class);
        if support == 0 {
            excluded.push(class);
            per_class.push(None);
        } else {
            let recall = cm.count(class, class) as f64 / support as f64;
            per_class.push(Some(recall));
            acc += recall;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::InvalidArg("every class row is empty".into()));
    }
    Ok(AverageAccuracy { value: acc / counted as f64, excluded, per_class })
}

/// Cohen's kappa `(p_o - p_e) / (1 - p_e)` with
/// `p_e = sum_k rowsum_k * colsum_k / total^2`.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArg("empty confusion matrix".into()));
    }
    let total_f = total as f64;
    let p_o = cm.trace() as f64 / total_f;
    let mut p_e = 0.0;
    for class in 1..=cm.classes() {
        p_e += (cm.row_sum(class) as f64 / total_f) * (cm.col_sum(class) as f64 / total_f);
    }
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(Error::Numeric(
            "kappa undefined: expected agreement p_e = 1".into(),
        ));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Evaluation report with percentages rounded to two decimals, mirroring
/// the usual tabular presentation.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Per-class accuracy percentages; `null` for zero-support classes.
    pub per_class: Vec<Option<f64>>,
    /// 1-based classes excluded from AA.
    pub excluded_classes: Vec<usize>,
}

fn pct(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let oa = overall_accuracy(cm)?;
        let aa = average_accuracy(cm)?;
        let kap = kappa(cm)?;
        Ok(MetricsReport {
            oa: pct(oa),
            aa: pct(aa.value),
            kappa: pct(kap),
            per_class: aa.per_class.iter().map(|v| v.map(pct)).collect(),
            excluded_classes: aa.excluded,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_matrix() -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&[vec![50, 0], vec![10, 40]]).unwrap()
    }

    #[test]
    fn diagonal_matrix_scores_one() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 0], vec![0, 7]]).unwrap();
        assert_eq!(overall_accuracy(&cm).unwrap(), 1.0);
        assert_eq!(average_accuracy(&cm).unwrap().value, 1.0);
        assert_eq!(kappa(&cm).unwrap(), 1.0);
    }

    #[test]
    fn uniform_matrix_has_half_accuracy_zero_kappa() {
        let cm = ConfusionMatrix::from_rows(&[vec![1, 1], vec![1, 1]]).unwrap();
        assert_eq!(overall_accuracy(&cm).unwrap(), 0.5);
        let cm = ConfusionMatrix::from_rows(&[vec![25, 25], vec![25, 25]]).unwrap();
        assert_eq!(kappa(&cm).unwrap(), 0.0);
    }

    #[test]
    fn hand_worked_values() {
        let cm = hand_matrix();
        assert_eq!(overall_accuracy(&cm).unwrap(), 0.9);
        let aa = average_accuracy(&cm).unwrap();
        assert_eq!(aa.value, 0.9); // (1.0 + 0.8) / 2
        assert!(aa.excluded.is_empty());
        // p_o = 0.9, p_e = (60*50 + 40*50) / 100^2 = 0.5, kappa = 0.8
        assert!((kappa(&cm).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_support_class_excluded_and_reported() {
        let cm = ConfusionMatrix::from_rows(&[vec![4, 0, 0], vec![0, 0, 0], vec![1, 0, 3]])
            .unwrap();
        let aa = average_accuracy(&cm).unwrap();
        assert_eq!(aa.excluded, vec![2]);
        assert_eq!(aa.per_class[1], None);
        assert!((aa.value - (1.0 + 0.75) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_errors() {
        let cm = ConfusionMatrix::new(3).unwrap();
        assert!(overall_accuracy(&cm).is_err());
        assert!(average_accuracy(&cm).is_err());
        assert!(kappa(&cm).is_err());
    }

    #[test]
    fn degenerate_kappa_errors() {
        // All mass in one cell: p_e = 1.
        let cm = ConfusionMatrix::from_rows(&[vec![10, 0], vec![0, 0]]).unwrap();
        assert!(matches!(kappa(&cm), Err(Error::Numeric(_))));
    }

    #[test]
    fn report_rounds_percentages() {
        let report = MetricsReport::from_confusion(&hand_matrix()).unwrap();
        assert_eq!(report.oa, 90.0);
        assert_eq!(report.aa, 90.0);
        assert_eq!(report.kappa, 80.0);
        assert_eq!(report.per_class, vec![Some(100.0), Some(80.0)]);
    }

    #[test]
    fn record_validates_range() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        assert!(cm.record(0, 1).is_err());
        assert!(cm.record(1, 3).is_err());
        cm.record(2, 1).unwrap();
        assert_eq!(cm.count(2, 1), 1);
    }

    fn random_cm() -> impl Strategy<Value = ConfusionMatrix> {
        (2usize..5)
            .prop_flat_map(|k| {
                proptest::collection::vec(0u64..40, k * k).prop_map(move |counts| (k, counts))
            })
            .prop_filter_map("needs total > 0 and non-degenerate", |(k, counts)| {
                let cm = ConfusionMatrix { k, counts };
                if cm.total() == 0 || kappa(&cm).is_err() || average_accuracy(&cm).is_err() {
                    None
                } else {
                    Some(cm)
                }
            })
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_class_permutation(cm in random_cm(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let k = cm.classes();
            let mut perm: Vec<usize> = (0..k).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            perm.shuffle(&mut rng);
            let mut permuted = ConfusionMatrix::new(k).unwrap();
            for i in 0..k {
                for j in 0..k {
                    permuted.counts[perm[i] * k + perm[j]] = cm.counts[i * k + j];
                }
            }
            let tol = 1e-12;
            prop_assert!((overall_accuracy(&cm).unwrap() - overall_accuracy(&permuted).unwrap()).abs() < tol);
            prop_assert!((average_accuracy(&cm).unwrap().value - average_accuracy(&permuted).unwrap().value).abs() < tol);
            prop_assert!((kappa(&cm).unwrap() - kappa(&permuted).unwrap()).abs() < tol);
        }

        #[test]
        fn metrics_invariant_under_count_scaling(cm in random_cm(), factor in 1u64..7) {
            let scaled = ConfusionMatrix {
                k: cm.classes(),
                counts: cm.counts.iter().map(|&c| c * factor).collect(),
            };
            let tol = 1e-12;
            prop_assert!((overall_accuracy(&cm).unwrap() - overall_accuracy(&scaled).unwrap()).abs() < tol);
            prop_assert!((average_accuracy(&cm).unwrap().value - average_accuracy(&scaled).unwrap().value).abs() < tol);
            prop_assert!((kappa(&cm).unwrap() - kappa(&scaled).unwrap()).abs() < tol);
        }

        #[test]
        fn kappa_never_exceeds_oa_when_pe_nonnegative(cm in random_cm()) {
            // kappa = (oa - pe) / (1 - pe) <= oa iff pe (1 - oa) >= 0.
            let oa = overall_accuracy(&cm).unwrap();
            let kap = kappa(&cm).unwrap();
            prop_assert!(kap <= oa + 1e-12);
        }
    }
}
