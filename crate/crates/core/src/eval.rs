//! Confusion matrices, one-vs-rest metrics and cross-fold aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Counts with rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_predictions(labels: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        if labels.len() != predicted.len() {
            return Err(Error::Data(format!("{} labels but {} predictions", labels.len(), predicted.len())));
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&t, &p) in labels.iter().zip(predicted) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::LabelOutOfRange {
                    label: t.max(p),
                    classes: n_classes,
                });
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    /// Argmax predictions of probability rows.
    pub fn from_probs(labels: &[usize], probs: &[Vec<f64>]) -> Result<Self> {
        let n = probs.first().map_or(0, Vec::len);
        if n == 0 || probs.iter().any(|r| r.len() != n) {
            return Err(Error::Data("probability rows must be non-empty and equally long".into()));
        }
        let predicted: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
        Self::from_predictions(labels, &predicted, n)
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// `(TP, FN, FP, TN)` of class `c` against the rest.
    pub fn one_vs_rest(&self, c: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[c][c];
        let row: u64 = self.counts[c].iter().sum();
        let col: u64 = self.counts.iter().map(|r| r[c]).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        (tp, fn_, fp, self.total() - tp - fn_ - fp)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes() != self.n_classes() {
            return Err(Error::Data("cannot merge confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: u64,
    /// Percent; absent when the class has no true instances.
    pub sensitivity: Option<f64>,
    /// Percent; absent when every record belongs to the class.
    pub specificity: Option<f64>,
}

/// Percentages of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub averaging: Averaging,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub loss: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn metrics(cm: &ConfusionMatrix, loss: Option<f64>, averaging: Averaging) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..cm.n_classes())
        .map(|c| {
            let (tp, fn_, fp, tn) = cm.one_vs_rest(c);
            ClassMetrics {
                support: tp + fn_,
                sensitivity: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
            }
        })
        .collect();
    for (c, m) in per_class.iter().enumerate() {
        if m.sensitivity.is_none() {
            log::warn!("class {c} has no true instances; its sensitivity is left out of the average");
        }
    }
    let (sensitivity, specificity) = match averaging {
        Averaging::Macro => {
            let sens: Vec<f64> = per_class.iter().filter_map(|m| m.sensitivity).collect();
            let spec: Vec<f64> = per_class.iter().filter_map(|m| m.specificity).collect();
            (mean(&sens), mean(&spec))
        }
        Averaging::Micro => {
            let sums = (0..cm.n_classes()).map(|c| cm.one_vs_rest(c)).fold((0, 0, 0, 0), |a, b| {
                (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3)
            });
            (
                ratio(sums.0, sums.0 + sums.1).unwrap_or(0.0),
                ratio(sums.3, sums.3 + sums.2).unwrap_or(0.0),
            )
        }
    };
    Ok(MetricsReport {
        averaging,
        accuracy: 100.0 * cm.trace() as f64 / total as f64,
        sensitivity,
        specificity,
        loss,
        per_class,
        confusion: cm.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Data(format!("need at least 2 values for a sample std, got {}", values.len())));
        }
        let m = mean(values);
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        Ok(MeanStd { mean: m, std: var.sqrt() })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub folds: usize,
    pub accuracy: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub loss: Option<MeanStd>,
}

pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<Aggregate> {
    let pick = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let losses: Option<Vec<f64>> = reports.iter().map(|r| r.loss).collect();
    Ok(Aggregate {
        folds: reports.len(),
        accuracy: pick(|r| r.accuracy)?,
        sensitivity: pick(|r| r.sensitivity)?,
        specificity: pick(|r| r.specificity)?,
        loss: losses.map(|l| MeanStd::of(&l)).transpose()?,
    })
}

/// An aligned plain-text table, one row per `(name, cells)`.
pub fn format_table(rows: &[(String, [String; 3])]) -> String {
    let header = ["Model", "Accuracy (%)", "Sensitivity (%)", "Specificity (%)"];
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for (name, cells) in rows {
        widths[0] = widths[0].max(name.chars().count());
        for (w, c) in widths[1..].iter_mut().zip(cells) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = vec![line(header.to_vec())];
    out.push(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    for (name, cells) in rows {
        out.push(line(std::iter::once(name.as_str()).chain(cells.iter().map(String::as_str)).collect()));
    }
    out.join("\n") + "\n"
}

pub fn report_cells(r: &MetricsReport) -> [String; 3] {
    [r.accuracy, r.sensitivity, r.specificity].map(|v| format!("{v:.2}"))
}

pub fn aggregate_cells(a: &Aggregate) -> [String; 3] {
    [a.accuracy, a.sensitivity, a.specificity].map(|m| m.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_tallies() {
        let cm = ConfusionMatrix::from_predictions(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 2]]);
        let cm = ConfusionMatrix::from_probs(&[1, 2], &[vec![1.0 / 3.0; 3], vec![0.2; 3]]).unwrap();
        assert_eq!(cm.counts[1][0] + cm.counts[2][0], 2);
        assert!(ConfusionMatrix::from_predictions(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn worked_examples() {
        let diag = ConfusionMatrix {
            counts: vec![vec![3, 0], vec![0, 4]],
        };
        let r = metrics(&diag, None, Averaging::Macro).unwrap();
        assert_eq!((r.accuracy, r.sensitivity, r.specificity), (100.0, 100.0, 100.0));

        let cm = ConfusionMatrix {
            counts: vec![vec![5, 1], vec![2, 4]],
        };
        let r = metrics(&cm, None, Averaging::Macro).unwrap();
        assert!((r.accuracy - 75.0).abs() < 1e-12);
        assert!((r.sensitivity - 75.0).abs() < 1e-12);
        assert!((r.specificity - 75.0).abs() < 1e-12);

        let cm = ConfusionMatrix {
            counts: vec![vec![2, 0, 0], vec![0, 2, 0], vec![1, 0, 1]],
        };
        assert!((metrics(&cm, None, Averaging::Macro).unwrap().accuracy - 500.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_support_class_is_excluded() {
        let cm = ConfusionMatrix {
            counts: vec![vec![2, 0, 0], vec![0, 1, 1], vec![0, 0, 0]],
        };
        let r = metrics(&cm, None, Averaging::Macro).unwrap();
        assert_eq!(r.per_class[2].sensitivity, None);
        assert!((r.sensitivity - 75.0).abs() < 1e-12);
    }

    #[test]
    fn micro_sensitivity_equals_accuracy() {
        let cm = ConfusionMatrix {
            counts: vec![vec![5, 1, 0], vec![2, 4, 1], vec![0, 3, 7]],
        };
        let r = metrics(&cm, None, Averaging::Micro).unwrap();
        assert!((r.sensitivity - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn aggregation() {
        let ms = MeanStd::of(&[90.0, 94.0]).unwrap();
        assert_eq!(ms.mean, 92.0);
        assert!((ms.std - 8f64.sqrt()).abs() < 1e-12);
        assert_eq!(ms.to_string(), "92.00 ± 2.83");
        assert_eq!(MeanStd::of(&[91.0, 92.0, 93.0, 92.0, 92.0]).unwrap().to_string(), "92.00 ± 0.71");
        assert_eq!(MeanStd::of(&[3.0; 4]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[1.0]).is_err());
    }

    #[test]
    fn table_is_aligned() {
        let t = format_table(&[
            ("top-1".into(), ["90.00".into(), "88.10".into(), "95.00".into()]),
            ("top-3 fusion".into(), ["92.00 ± 2.83".into(), "1.00".into(), "2.00".into()]),
        ]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Model         Accuracy (%)"));
        let width = lines[0].chars().count();
        assert!(lines.iter().all(|l| l.chars().count() == width), "{t}");
    }

    proptest! {
        #[test]
        fn accuracy_matches_direct_count_and_is_rescaling_invariant(
            rows in proptest::collection::vec((0usize..3, proptest::collection::vec(0.01f64..1.0, 3)), 1..40),
        ) {
            let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let probs: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
            let cm = ConfusionMatrix::from_probs(&labels, &probs).unwrap();
            let direct = labels.iter().zip(&probs).filter(|(l, p)| argmax(p) == **l).count();
            let r = metrics(&cm, None, Averaging::Macro).unwrap();
            prop_assert!((r.accuracy - 100.0 * direct as f64 / labels.len() as f64).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(&r.sensitivity) && (0.0..=100.0).contains(&r.specificity));
            let scaled: Vec<Vec<f64>> = probs.iter().map(|p| p.iter().map(|v| 3.0 * v.ln() + 1.0).collect()).collect();
            prop_assert_eq!(ConfusionMatrix::from_probs(&labels, &scaled).unwrap(), cm);
        }

        #[test]
        fn binary_metrics_swap_symmetrically(a in 0u64..20, b in 0u64..20, c in 0u64..20, d in 0u64..20) {
            prop_assume!(a + b > 0 && c + d > 0);
            let cm = ConfusionMatrix { counts: vec![vec![a, b], vec![c, d]] };
            let swapped = ConfusionMatrix { counts: vec![vec![d, c], vec![b, a]] };
            let r = metrics(&cm, None, Averaging::Macro).unwrap();
            let s = metrics(&swapped, None, Averaging::Macro).unwrap();
            prop_assert!((r.sensitivity - s.sensitivity).abs() < 1e-9);
            prop_assert!((r.specificity - s.specificity).abs() < 1e-9);
            // two-class macro sensitivity is the mean of TPR and TNR
            let tpr = 100.0 * a as f64 / (a + b) as f64;
            let tnr = 100.0 * d as f64 / (c + d) as f64;
            prop_assert!((r.sensitivity - (tpr + tnr) / 2.0).abs() < 1e-9);
        }
    }
}
