//! Classification metrics: confusion matrix, accuracy / precision / recall /
//! F1 with selectable averaging, one-vs-rest ROC curves with tie-aware AUC,
//! and Cohen's kappa. All computation is in `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// C x C counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![0; num_classes * num_classes],
            class_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
        }
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes() {
            return Err(Error::Invalid(format!(
                "{} names for {} classes",
                names.len(),
                self.num_classes()
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn from_counts(counts: Vec<u64>, num_classes: usize) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Invalid("count matrix is not C x C".into()));
        }
        Ok(ConfusionMatrix {
            counts,
            class_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
        })
    }

    pub fn from_labels(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::Invalid("label vectors differ in length".into()));
        }
        let mut cm = ConfusionMatrix::new(num_classes);
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Invalid(format!(
                    "label out of range: true {t}, pred {p}, classes {num_classes}"
                )));
            }
            cm.counts[t * num_classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn get(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.num_classes() + pred_class]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.get(i, i)).sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.num_classes()).map(|j| self.get(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.num_classes()).map(|i| self.get(i, j)).sum()
    }

    /// Row-normalized view; rejected when the matrix is empty.
    pub fn normalized_rows(&self) -> Result<Vec<f64>> {
        if self.total() == 0 {
            return Err(Error::Invalid("cannot normalize an empty confusion matrix".into()));
        }
        let c = self.num_classes();
        let mut out = vec![0.0; c * c];
        for i in 0..c {
            let row = self.row_sum(i);
            if row == 0 {
                continue;
            }
            for j in 0..c {
                out[i * c + j] = self.get(i, j) as f64 / row as f64;
            }
        }
        Ok(out)
    }

    /// CSV with a header row of class names; rows are true classes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for i in 0..self.num_classes() {
            out.push_str(&self.class_names[i]);
            for j in 0..self.num_classes() {
                out.push_str(&format!(",{}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// Averaging mode for multiclass precision/recall/F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Macro,
    Micro,
    Weighted,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// The consolidated scalar suite. `f1` composes the averaged precision and
/// recall through the harmonic mean; `f1_class_mean` averages per-class F1
/// scores instead (the two differ in general, so both are reported).
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsReport {
    pub loss: Option<f64>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_class_mean: f64,
    pub auc: Option<f64>,
    pub kappa: Option<f64>,
    pub averaging: Averaging,
    pub per_class: Vec<ClassMetrics>,
    pub flags: Vec<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

/// Accuracy, precision, recall and F1 from one-vs-rest counts, plus
/// per-class components. Zero-denominator classes contribute 0 and raise
/// a flag instead of a NaN.
pub fn classification_metrics(cm: &ConfusionMatrix, averaging: Averaging) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Invalid("metrics on an empty confusion matrix".into()));
    }
    let c = cm.num_classes();
    let mut flags = Vec::new();
    let mut per_class = Vec::with_capacity(c);
    let (mut tp_sum, mut fp_sum, mut fn_sum) = (0u64, 0u64, 0u64);
    for k in 0..c {
        let tp = cm.get(k, k);
        let fp = cm.col_sum(k) - tp;
        let fn_ = cm.row_sum(k) - tp;
        tp_sum += tp;
        fp_sum += fp;
        fn_sum += fn_;
        let precision = if tp + fp == 0 {
            flags.push(format!("class {k} never predicted: precision set to 0", k = k));
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            flags.push(format!("class {k} has no true samples: recall set to 0", k = k));
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics { precision, recall, f1, support: cm.row_sum(k) });
    }

    let accuracy = cm.trace() as f64 / total as f64;
    let (precision, recall, f1_class_mean) = match averaging {
        Averaging::Macro => {
            let p = per_class.iter().map(|m| m.precision).sum::<f64>() / c as f64;
            let r = per_class.iter().map(|m| m.recall).sum::<f64>() / c as f64;
            let f = per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64;
            (p, r, f)
        }
        Averaging::Micro => {
            let p = if tp_sum + fp_sum == 0 { 0.0 } else { tp_sum as f64 / (tp_sum + fp_sum) as f64 };
            let r = if tp_sum + fn_sum == 0 { 0.0 } else { tp_sum as f64 / (tp_sum + fn_sum) as f64 };
            let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            (p, r, f)
        }
        Averaging::Weighted => {
            let weight = |m: &ClassMetrics| m.support as f64 / total as f64;
            let p = per_class.iter().map(|m| m.precision * weight(m)).sum();
            let r = per_class.iter().map(|m| m.recall * weight(m)).sum();
            let f = per_class.iter().map(|m| m.f1 * weight(m)).sum();
            (p, r, f)
        }
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let kappa = match cohen_kappa(cm) {
        Ok(k) => Some(k),
        Err(_) => {
            flags.push("kappa undefined (expected agreement is 1)".into());
            None
        }
    };
    Ok(MetricsReport {
        loss: None,
        accuracy,
        precision,
        recall,
        f1,
        f1_class_mean,
        auc: None,
        kappa,
        averaging,
        per_class,
        flags,
    })
}

/// Chance-corrected agreement `(p_o - p_e) / (1 - p_e)`.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Invalid("kappa on an empty confusion matrix".into()));
    }
    let n = total as f64;
    let p_o = cm.trace() as f64 / n;
    let p_e = (0..cm.num_classes())
        .map(|k| cm.row_sum(k) as f64 * cm.col_sum(k) as f64)
        .sum::<f64>()
        / (n * n);
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(Error::Numeric("kappa undefined: expected agreement is 1".into()));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

// ── ROC / AUC ─────────────────────────────────────────────────────────────

/// One-vs-rest ROC curve of a class: monotone (FPR, TPR) points from (0,0)
/// to (1,1) and the descending score thresholds that produced them.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RocCurve {
    pub class_index: usize,
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RocAnalysis {
    pub curves: Vec<RocCurve>,
    pub macro_auc: Option<f64>,
    pub flags: Vec<String>,
}

impl RocAnalysis {
    /// CSV export: class, threshold, fpr, tpr.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,threshold,fpr,tpr\n");
        for curve in &self.curves {
            let name = class_names
                .get(curve.class_index)
                .cloned()
                .unwrap_or_else(|| curve.class_index.to_string());
            for (thr, (fpr, tpr)) in curve.thresholds.iter().zip(&curve.points) {
                out.push_str(&format!("{name},{thr},{fpr},{tpr}\n"));
            }
        }
        out
    }
}

/// Sweep all distinct thresholds of one-vs-rest scores. Tied scores move in
/// one step, so the trapezoidal AUC equals the Mann-Whitney statistic with
/// ties counted one half.
pub fn roc_auc(scores: &Tensor, y_true: &[usize]) -> Result<RocAnalysis> {
    if scores.rank() != 2 {
        return Err(Error::Shape(format!("roc_auc expects [N,C], got {:?}", scores.shape())));
    }
    let (n, c) = (scores.shape()[0], scores.shape()[1]);
    if n != y_true.len() {
        return Err(Error::Invalid(format!("{n} score rows for {} labels", y_true.len())));
    }
    if let Some(&bad) = y_true.iter().find(|&&t| t >= c) {
        return Err(Error::Invalid(format!("label {bad} out of range for {c} classes")));
    }
    let mut curves = Vec::with_capacity(c);
    let mut flags = Vec::new();
    let mut auc_sum = 0.0;
    let mut auc_count = 0usize;
    for class in 0..c {
        let pos = y_true.iter().filter(|&&t| t == class).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            flags.push(format!(
                "class {class} absent from {} labels: AUC undefined, excluded from macro",
                if pos == 0 { "positive" } else { "negative" }
            ));
            curves.push(RocCurve { class_index: class, points: vec![(0.0, 0.0), (1.0, 1.0)], thresholds: vec![f64::INFINITY, f64::NEG_INFINITY], auc: None });
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        // descending score; index as tiebreaker only for determinism of the
        // permutation (tied scores are grouped below either way)
        order.sort_by(|&a, &b| {
            let sa = scores.data()[a * c + class];
            let sb = scores.data()[b * c + class];
            sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mut points = vec![(0.0, 0.0)];
        let mut thresholds = vec![f64::INFINITY];
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut auc = 0.0f64;
        let mut i = 0;
        while i < n {
            let threshold = scores.data()[order[i] * c + class];
            let mut group_tp = 0u64;
            let mut group_fp = 0u64;
            while i < n && scores.data()[order[i] * c + class] == threshold {
                if y_true[order[i]] == class {
                    group_tp += 1;
                } else {
                    group_fp += 1;
                }
                i += 1;
            }
            let prev = (fp as f64 / neg as f64, tp as f64 / pos as f64);
            tp += group_tp;
            fp += group_fp;
            let next = (fp as f64 / neg as f64, tp as f64 / pos as f64);
            auc += (next.0 - prev.0) * (prev.1 + next.1) / 2.0;
            points.push(next);
            thresholds.push(threshold as f64);
        }
        auc_sum += auc;
        auc_count += 1;
        curves.push(RocCurve { class_index: class, points, thresholds, auc: Some(auc) });
    }
    let macro_auc = (auc_count > 0).then(|| auc_sum / auc_count as f64);
    Ok(RocAnalysis { curves, macro_auc, flags })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm_8_2_1_9() -> ConfusionMatrix {
        ConfusionMatrix::from_counts(vec![8, 2, 1, 9], 2).unwrap()
    }

    #[test]
    fn confusion_matrix_counting() {
        let cm = ConfusionMatrix::from_labels(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(cm.get(0, 0), 1);
        assert_eq!(cm.get(0, 1), 1);
        assert_eq!(cm.get(1, 0), 0);
        assert_eq!(cm.get(1, 1), 2);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn confusion_matrix_perfect_is_diagonal() {
        let cm = ConfusionMatrix::from_labels(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(cm.trace(), 4);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(cm.get(i, j), 0);
                }
            }
        }
    }

    #[test]
    fn confusion_matrix_guards() {
        assert!(ConfusionMatrix::from_labels(&[0, 3], &[0, 0], 2).is_err());
        let empty = ConfusionMatrix::new(2);
        assert_eq!(empty.total(), 0);
        assert!(empty.normalized_rows().is_err());
    }

    #[test]
    fn worked_fixture_metrics() {
        let report = classification_metrics(&cm_8_2_1_9(), Averaging::Macro).unwrap();
        assert!((report.accuracy - 0.85).abs() < 1e-12);
        let p = (8.0 / 9.0 + 9.0 / 11.0) / 2.0;
        assert!((report.precision - p).abs() < 1e-12);
        assert!((report.precision - 0.85354).abs() < 1e-5);
        assert!((report.recall - 0.85).abs() < 1e-12);
        // per-class F1 mean: (0.84211 + 0.85714) / 2
        assert!((report.f1_class_mean - 0.84962).abs() < 1e-5);
        // harmonic composition of the macro precision and recall
        let f_composed = 2.0 * p * 0.85 / (p + 0.85);
        assert!((report.f1 - f_composed).abs() < 1e-12);
        let kappa = report.kappa.unwrap();
        assert!((kappa - 0.7).abs() < 1e-12);
    }

    #[test]
    fn diagonal_matrix_gives_ones() {
        let cm = ConfusionMatrix::from_counts(vec![5, 0, 0, 7], 2).unwrap();
        let report = classification_metrics(&cm, Averaging::Macro).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.precision, 1.0);
        assert_eq!(report.recall, 1.0);
        assert_eq!(report.f1, 1.0);
        assert_eq!(report.f1_class_mean, 1.0);
        assert_eq!(report.kappa, Some(1.0));
        assert!(report.flags.is_empty());
    }

    #[test]
    fn never_predicted_class_is_flagged() {
        // class 1 never predicted
        let cm = ConfusionMatrix::from_labels(&[0, 1, 1], &[0, 0, 0], 2).unwrap();
        let report = classification_metrics(&cm, Averaging::Macro).unwrap();
        assert!(report.per_class[1].precision == 0.0);
        assert!(!report.flags.is_empty());
        assert!(report.flags[0].contains("never predicted"));
    }

    #[test]
    fn kappa_fixtures() {
        assert!((cohen_kappa(&cm_8_2_1_9()).unwrap() - 0.7).abs() < 1e-12);
        // perfect agreement
        let cm = ConfusionMatrix::from_counts(vec![3, 0, 0, 3], 2).unwrap();
        assert_eq!(cohen_kappa(&cm).unwrap(), 1.0);
        // statistically independent: p_o == p_e -> 0
        let cm = ConfusionMatrix::from_counts(vec![1, 1, 1, 1], 2).unwrap();
        assert_eq!(cohen_kappa(&cm).unwrap(), 0.0);
        // constant labels and predictions: undefined
        let cm = ConfusionMatrix::from_counts(vec![4, 0, 0, 0], 2).unwrap();
        assert!(cohen_kappa(&cm).is_err());
    }

    fn binary_scores(scores: &[f64], labels: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(scores.len() * 2);
        for &s in scores {
            data.push(1.0 - s as f32);
            data.push(s as f32);
        }
        (Tensor::from_vec(&[scores.len(), 2], data).unwrap(), labels.to_vec())
    }

    #[test]
    fn auc_worked_fixture() {
        let (scores, labels) = binary_scores(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]);
        let roc = roc_auc(&scores, &labels).unwrap();
        // 3 of 4 positive-negative pairs correctly ordered
        assert!((roc.curves[1].auc.unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_perfect_and_tied() {
        let (scores, labels) = binary_scores(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]);
        let roc = roc_auc(&scores, &labels).unwrap();
        assert_eq!(roc.curves[1].auc, Some(1.0));

        let (scores, labels) = binary_scores(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]);
        let roc = roc_auc(&scores, &labels).unwrap();
        assert!((roc.curves[1].auc.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_absent_class_is_flagged_and_excluded() {
        let scores = Tensor::from_vec(&[3, 3], vec![0.8, 0.1, 0.1, 0.2, 0.7, 0.1, 0.6, 0.3, 0.1]).unwrap();
        let roc = roc_auc(&scores, &[0, 1, 0]).unwrap();
        assert!(roc.curves[2].auc.is_none());
        assert_eq!(roc.flags.len(), 1);
        let defined: Vec<f64> = roc.curves.iter().filter_map(|c| c.auc).collect();
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        assert!((roc.macro_auc.unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn roc_points_are_monotone_and_anchored() {
        let (scores, labels) = binary_scores(&[0.9, 0.8, 0.8, 0.4, 0.35, 0.1], &[1, 0, 1, 1, 0, 0]);
        let roc = roc_auc(&scores, &labels).unwrap();
        for curve in &roc.curves {
            let pts = &curve.points;
            assert_eq!(pts.first(), Some(&(0.0, 0.0)));
            assert_eq!(pts.last(), Some(&(1.0, 1.0)));
            for w in pts.windows(2) {
                assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }
    }

    #[test]
    fn accuracy_equals_trace_over_total_exactly() {
        let cm = ConfusionMatrix::from_counts(vec![3, 1, 0, 2, 5, 1, 0, 0, 4], 3).unwrap();
        let report = classification_metrics(&cm, Averaging::Macro).unwrap();
        assert_eq!(report.accuracy, cm.trace() as f64 / cm.total() as f64);
    }

    #[test]
    fn micro_averaging_collapses_to_accuracy() {
        let cm = ConfusionMatrix::from_counts(vec![3, 1, 0, 2, 5, 1, 0, 0, 4], 3).unwrap();
        let report = classification_metrics(&cm, Averaging::Micro).unwrap();
        assert!((report.precision - report.accuracy).abs() < 1e-12);
        assert!((report.recall - report.accuracy).abs() < 1e-12);
        assert!((report.f1 - report.accuracy).abs() < 1e-12);
    }

    #[test]
    fn csv_export_shapes() {
        let cm = cm_8_2_1_9().with_class_names(vec!["healthy".into(), "rust".into()]).unwrap();
        let csv = cm.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "true\\pred,healthy,rust");
        assert_eq!(lines[1], "healthy,8,2");

        let (scores, labels) = binary_scores(&[0.9, 0.2], &[1, 0]);
        let roc = roc_auc(&scores, &labels).unwrap();
        let csv = roc.to_csv(&["healthy".into(), "rust".into()]);
        assert!(csv.starts_with("class,threshold,fpr,tpr\n"));
        assert!(csv.lines().count() > 2);
    }
}
