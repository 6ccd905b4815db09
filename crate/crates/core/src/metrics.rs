//! WAR, UAR and macro-F1 with subject-wise aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(n_classes);
        for (&y, &p) in truth.iter().zip(predicted) {
            cm.record(y, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let c = self.n_classes();
        if truth >= c || predicted >= c {
            return Err(Error::Label(format!(
                "pair ({truth}, {predicted}) out of range for {c} classes"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

/// Overall accuracy in percent.
pub fn war(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(domain_err!("no scored videos"));
    }
    Ok(100.0 * cm.trace() as f64 / total as f64)
}

/// Mean recall over classes that have at least one true instance, in percent.
pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    let recalls: Vec<f64> = (0..cm.n_classes())
        .filter(|&c| cm.row_sum(c) > 0)
        .map(|c| cm.get(c, c) as f64 / cm.row_sum(c) as f64)
        .collect();
    if recalls.is_empty() {
        return Err(domain_err!("no class has true instances"));
    }
    Ok(100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Unweighted mean of per-class F1 in percent. Classes absent from both
/// truth and predictions are skipped; a class with no true positives scores 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(domain_err!("no scored videos"));
    }
    let f1s: Vec<f64> = (0..cm.n_classes())
        .filter(|&c| cm.row_sum(c) + cm.col_sum(c) > 0)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let denom = (cm.row_sum(c) + cm.col_sum(c)) as f64;
            2.0 * tp / denom
        })
        .collect();
    Ok(100.0 * f1s.iter().sum::<f64>() / f1s.len() as f64)
}

/// Round to one decimal, halves away from zero. The small bias absorbs
/// binary representation error so that decimal halves such as 73.35 round up.
pub fn round1(x: f64) -> f64 {
    ((x * 10.0) + 1e-9_f64.copysign(x)).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub subject: String,
    pub n: u64,
    pub war: f64,
    pub uar: f64,
    pub macro_f1: f64,
}

impl MetricRow {
    pub fn from_confusion(subject: impl Into<String>, cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            subject: subject.into(),
            n: cm.total(),
            war: war(cm)?,
            uar: uar(cm)?,
            macro_f1: macro_f1(cm)?,
        })
    }

    pub fn rounded(&self) -> Self {
        Self {
            subject: self.subject.clone(),
            n: self.n,
            war: round1(self.war),
            uar: round1(self.uar),
            macro_f1: round1(self.macro_f1),
        }
    }
}

pub const AVG_ROW: &str = "Avg";
pub const ALL_ROW: &str = "All";

/// Per-subject rows, their unweighted mean and the pooled metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub subjects: Vec<MetricRow>,
    pub avg: MetricRow,
    pub all: MetricRow,
}

/// One scored video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredVideo {
    pub subject: String,
    pub label: usize,
    pub prediction: usize,
}

/// Group `scored` by subject, in first-appearance order.
pub fn subject_report(scored: &[ScoredVideo], n_classes: usize) -> Result<MetricsBundle> {
    let mut order: Vec<&str> = Vec::new();
    let mut cms: Vec<ConfusionMatrix> = Vec::new();
    let mut pooled = ConfusionMatrix::new(n_classes);
    for v in scored {
        let idx = match order.iter().position(|s| *s == v.subject) {
            Some(i) => i,
            None => {
                order.push(&v.subject);
                cms.push(ConfusionMatrix::new(n_classes));
                order.len() - 1
            }
        };
        cms[idx].record(v.label, v.prediction)?;
        pooled.record(v.label, v.prediction)?;
    }
    let subjects = order
        .iter()
        .zip(&cms)
        .map(|(s, cm)| MetricRow::from_confusion(*s, cm))
        .collect::<Result<Vec<_>>>()?;
    let k = subjects.len() as f64;
    let avg = MetricRow {
        subject: AVG_ROW.into(),
        n: pooled.total(),
        war: subjects.iter().map(|r| r.war).sum::<f64>() / k,
        uar: subjects.iter().map(|r| r.uar).sum::<f64>() / k,
        macro_f1: subjects.iter().map(|r| r.macro_f1).sum::<f64>() / k,
    };
    Ok(MetricsBundle {
        subjects,
        avg,
        all: MetricRow::from_confusion(ALL_ROW, &pooled)?,
    })
}

impl MetricsBundle {
    pub fn rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.subjects.iter().chain([&self.avg, &self.all])
    }

    /// Same bundle with every percentage rounded to one decimal.
    pub fn rounded(&self) -> Self {
        Self {
            subjects: self.subjects.iter().map(MetricRow::rounded).collect(),
            avg: self.avg.rounded(),
            all: self.all.rounded(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in self.rows() {
            push_csv_row(&mut out, &row.subject, row);
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.rounded()).expect("bundle serializes");
        s.push('\n');
        s
    }
}

pub const CSV_HEADER: &str = "subject,n,war,uar,macro_f1";

/// Append one CSV line with rounded percentages; `label` fills the first column.
pub fn push_csv_row(out: &mut String, label: &str, row: &MetricRow) {
    let r = row.rounded();
    writeln!(out, "{label},{},{:.1},{:.1},{:.1}", r.n, r.war, r.uar, r.macro_f1).unwrap();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(y: &[usize], p: &[usize]) -> ConfusionMatrix {
        ConfusionMatrix::from_predictions(y, p, 2).unwrap()
    }

    #[test]
    fn hand_worked_case() {
        let m = cm(&[0, 0, 1, 1], &[0, 1, 1, 1]);
        assert_eq!(war(&m).unwrap(), 75.0);
        assert_eq!(uar(&m).unwrap(), 75.0);
        assert!((macro_f1(&m).unwrap() - 100.0 * (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert_eq!(round1(macro_f1(&m).unwrap()), 73.3);
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = cm(&[0, 1, 1, 0], &[0, 1, 1, 0]);
        assert_eq!(
            (war(&m).unwrap(), uar(&m).unwrap(), macro_f1(&m).unwrap()),
            (100.0, 100.0, 100.0)
        );
        let all_zero = cm(&[0, 0, 1, 1], &[0, 0, 0, 0]);
        assert_eq!(uar(&all_zero).unwrap(), 50.0);
        let f1_0 = 2.0 * 2.0 / 6.0;
        assert!((macro_f1(&all_zero).unwrap() - 50.0 * f1_0).abs() < 1e-12);
    }

    #[test]
    fn empty_is_domain_error() {
        let m = ConfusionMatrix::new(2);
        assert!(war(&m).is_err());
        assert!(uar(&m).is_err());
        assert!(macro_f1(&m).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round1(73.35), 73.4);
        assert_eq!(round1(0.05), 0.1);
        assert_eq!(round1(66.666), 66.7);
        assert_eq!(round1(12.34), 12.3);
    }

    fn scored(subject: &str, y: usize, p: usize) -> ScoredVideo {
        ScoredVideo {
            subject: subject.into(),
            label: y,
            prediction: p,
        }
    }

    #[test]
    fn avg_is_mean_over_subjects() {
        let v = vec![
            scored("a", 0, 0),
            scored("a", 1, 1),
            scored("b", 0, 0),
            scored("b", 1, 0),
        ];
        let b = subject_report(&v, 2).unwrap();
        assert_eq!(b.subjects[0].war, 100.0);
        assert_eq!(b.subjects[1].war, 50.0);
        assert_eq!(b.avg.war, 75.0);
        let one = subject_report(&v[..2], 2).unwrap();
        assert_eq!(one.avg.war, one.subjects[0].war);
        assert_eq!(one.avg.uar, one.subjects[0].uar);
    }

    #[test]
    fn csv_layout() {
        let b = subject_report(&[scored("s1", 0, 0), scored("s1", 1, 0)], 2).unwrap();
        let csv = b.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "subject,n,war,uar,macro_f1");
        assert_eq!(lines[1], "s1,2,50.0,50.0,33.3");
        assert_eq!(lines[2], "Avg,2,50.0,50.0,33.3");
    }
}
