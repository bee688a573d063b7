//! Confusion matrix and per-class precision/recall/F1.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Rows are true classes, columns are predicted classes.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::dim("confusion_matrix", &[y_true.len()], &[y_pred.len()]));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= classes || p >= classes {
            return Err(Error::Contract(format!("label pair ({t}, {p}) outside 0..{classes}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Divides each column by its sum; empty columns stay zero.
pub fn normalize_by_predicted(m: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let k = m.len();
    let col_sums: Vec<usize> = (0..k).map(|j| m.iter().map(|r| r[j]).sum()).collect();
    m.iter()
        .map(|row| {
            row.iter()
                .zip(&col_sums)
                .map(|(&c, &s)| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AverageMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_avg: AverageMetrics,
    pub weighted_avg: AverageMetrics,
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn classification_report(
    y_true: &[usize],
    y_pred: &[usize],
    class_names: &[&str],
) -> Result<ClassificationReport> {
    if y_true.is_empty() {
        return Err(Error::InsufficientData("no samples to report on".into()));
    }
    let k = class_names.len();
    let m = confusion_matrix(y_true, y_pred, k)?;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = m[c][c];
        let predicted: usize = m.iter().map(|r| r[c]).sum();
        let support: usize = m[c].iter().sum();
        let (precision, zp) = ratio(tp, predicted);
        let (recall, zr) = ratio(tp, support);
        // same value as 2PR/(P+R) with a single rounding
        let (f1, _) = ratio(2 * tp, predicted + support);
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
            zero_division: zp || zr,
        });
    }
    let n = y_true.len();
    let correct: usize = (0..k).map(|c| m[c][c]).sum();
    let mean = |f: &dyn Fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let weighted = |f: &dyn Fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / n as f64
    };
    let macro_avg = AverageMetrics {
        precision: mean(&|c| c.precision),
        recall: mean(&|c| c.recall),
        f1: mean(&|c| c.f1),
        support: n,
    };
    let weighted_avg = AverageMetrics {
        precision: weighted(&|c| c.precision),
        // support-weighted recall is exactly the accuracy
        recall: correct as f64 / n as f64,
        f1: weighted(&|c| c.f1),
        support: n,
    };
    Ok(ClassificationReport {
        class_names: class_names.iter().map(|s| s.to_string()).collect(),
        per_class,
        accuracy: correct as f64 / n as f64,
        macro_avg,
        weighted_avg,
        confusion: m,
    })
}

/// Two decimals with ties rounded away from zero.
pub fn round2(v: f64) -> String {
    // Nudge by a relative epsilon so values like 0.125 stored as 0.12499.. round up.
    let scaled = v * 100.0;
    let r = (scaled + scaled.signum() * scaled.abs() * 1e-12).round() / 100.0;
    format!("{r:.2}")
}

impl ClassificationReport {
    /// Plain-text table in the familiar precision/recall/f1/support layout.
    pub fn format(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(|s| s.len())
            .chain(["weighted avg".len()])
            .max()
            .unwrap();
        let mut out = String::new();
        writeln!(out, "{:>width$} {:>9} {:>9} {:>9} {:>9}", "", "precision", "recall", "f1-score", "support").unwrap();
        writeln!(out).unwrap();
        for (name, c) in self.class_names.iter().zip(&self.per_class) {
            writeln!(
                out,
                "{name:>width$} {:>9} {:>9} {:>9} {:>9}",
                round2(c.precision),
                round2(c.recall),
                round2(c.f1),
                c.support
            )
            .unwrap();
        }
        writeln!(out).unwrap();
        writeln!(
            out,
            "{:>width$} {:>9} {:>9} {:>9} {:>9}",
            "accuracy",
            "",
            "",
            round2(self.accuracy),
            self.macro_avg.support
        )
        .unwrap();
        for (name, a) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            writeln!(
                out,
                "{name:>width$} {:>9} {:>9} {:>9} {:>9}",
                round2(a.precision),
                round2(a.recall),
                round2(a.f1),
                a.support
            )
            .unwrap();
        }
        let flagged: Vec<&str> = self
            .class_names
            .iter()
            .zip(&self.per_class)
            .filter(|(_, c)| c.zero_division)
            .map(|(n, _)| n.as_str())
            .collect();
        if !flagged.is_empty() {
            writeln!(out, "\nzero division reported as 0 for: {}", flagged.join(", ")).unwrap();
        }
        out
    }

    /// Full-precision rows: `label,precision,recall,f1,support`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,precision,recall,f1,support\n");
        for (name, c) in self.class_names.iter().zip(&self.per_class) {
            writeln!(out, "{name},{},{},{},{}", c.precision, c.recall, c.f1, c.support).unwrap();
        }
        let n = self.macro_avg.support;
        writeln!(out, "accuracy,,,{},{n}", self.accuracy).unwrap();
        for (name, a) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            writeln!(out, "{name},{},{},{},{}", a.precision, a.recall, a.f1, a.support).unwrap();
        }
        out
    }

    /// Raw counts with a header row of predicted labels.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for n in &self.class_names {
            write!(out, ",{n}").unwrap();
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            out.push_str(name);
            for c in row {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_example() {
        let t = [0, 0, 1, 1, 2];
        let p = [0, 1, 1, 1, 0];
        let m = confusion_matrix(&t, &p, 3).unwrap();
        assert_eq!(m, vec![vec![1, 1, 0], vec![0, 2, 0], vec![1, 0, 0]]);
        let r = classification_report(&t, &p, &["a", "b", "c"]).unwrap();
        assert_eq!(r.per_class[0].precision, 0.5);
        assert_eq!(r.per_class[1].precision, 2.0 / 3.0);
        assert_eq!(r.per_class[1].recall, 1.0);
        assert_eq!(r.per_class[1].f1, 0.8);
        assert_eq!(r.per_class[2].f1, 0.0);
        assert!(r.per_class[2].zero_division);
        assert_eq!(r.accuracy, 0.6);
    }

    #[test]
    fn perfect_predictions_make_identity() {
        let t = [0, 1, 2, 3, 4, 4];
        let r = classification_report(&t, &t, &["N", "S", "V", "F", "Q"]).unwrap();
        for c in &r.per_class {
            assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
        }
        let norm = normalize_by_predicted(&r.confusion);
        for (i, row) in norm.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn absent_class_reports_zero_with_flag() {
        let r = classification_report(&[0, 0, 1], &[0, 0, 1], &["a", "b", "c"]).unwrap();
        let c = &r.per_class[2];
        assert_eq!((c.precision, c.recall, c.f1, c.support), (0.0, 0.0, 0.0, 0));
        assert!(c.zero_division);
        assert!(r.format().contains("zero division reported as 0 for: c"));
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round2(0.125), "0.13");
        assert_eq!(round2(0.115), "0.12");
        assert_eq!(round2(0.994), "0.99");
        assert_eq!(round2(0.995), "1.00");
        assert_eq!(round2(0.0), "0.00");
    }

    #[test]
    fn format_layout() {
        let r = classification_report(&[0, 1, 1, 0], &[0, 1, 0, 0], &["N", "S"]).unwrap();
        let text = r.format();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].contains("precision") && lines[0].contains("support"));
        assert!(lines[2].trim_start().starts_with('N'));
        assert!(lines[2].contains("0.67") && lines[2].contains("1.00") && lines[2].contains("0.80"));
        assert!(text.contains("accuracy") && text.contains("0.75"));
        assert!(text.contains("macro avg") && text.contains("weighted avg"));
    }

    #[test]
    fn csv_outputs() {
        let r = classification_report(&[0, 1], &[0, 0], &["N", "S"]).unwrap();
        assert_eq!(r.confusion_csv(), "true\\pred,N,S\nN,1,0\nS,1,0\n");
        let csv = r.to_csv();
        assert!(csv.starts_with("label,precision,recall,f1,support\nN,0.5,1,"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(confusion_matrix(&[0], &[0, 1], 2).is_err());
        assert!(confusion_matrix(&[0], &[2], 2).is_err());
    }

    fn labels() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(0usize..5, n),
                proptest::collection::vec(0usize..5, n),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((t, p) in labels()) {
            let r = classification_report(&t, &p, &["N", "S", "V", "F", "Q"]).unwrap();
            for c in 0..5 {
                let tp = t.iter().zip(&p).filter(|&(&a, &b)| a == c && b == c).count();
                let fp = t.iter().zip(&p).filter(|&(&a, &b)| a != c && b == c).count();
                let fn_ = t.iter().zip(&p).filter(|&(&a, &b)| a == c && b != c).count();
                let prec = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
                let rec = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
                prop_assert_eq!(r.per_class[c].precision, prec);
                prop_assert_eq!(r.per_class[c].recall, rec);
                prop_assert_eq!(r.per_class[c].support, tp + fn_);
            }
            let total: usize = r.confusion.iter().flatten().sum();
            prop_assert_eq!(total, t.len());
            prop_assert_eq!(r.weighted_avg.recall, r.accuracy);
        }

        #[test]
        fn normalized_columns_sum_to_one_or_zero((t, p) in labels()) {
            let m = confusion_matrix(&t, &p, 5).unwrap();
            let norm = normalize_by_predicted(&m);
            for j in 0..5 {
                let s: f64 = norm.iter().map(|r| r[j]).sum();
                let raw: usize = m.iter().map(|r| r[j]).sum();
                if raw == 0 {
                    prop_assert_eq!(s, 0.0);
                } else {
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
