use std::fmt::Write as _;

use crate::data::{Ethnicity, Gender, LabelTriple};
use crate::error::{Error, Result};
use crate::model::PredictionTriple;
use crate::scalar::Scalar;
use crate::train::l1_loss;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn zeros(names: &[&str]) -> Self {
        Self {
            counts: vec![vec![0; names.len()]; names.len()],
            names: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>, names: &[&str]) -> Result<Self> {
        if counts.len() != names.len() || counts.iter().any(|r| r.len() != names.len()) {
            return Err(Error::InvalidArgument {
                op: "ConfusionMatrix",
                reason: format!("counts must be {0} x {0}", names.len()),
            });
        }
        Ok(Self {
            counts,
            names: names.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for n in &self.names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (n, row) in self.names.iter().zip(&self.counts) {
            s.push_str(n);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], names: &[&str]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument {
            op: "confusion",
            reason: format!("{} predictions for {} labels", preds.len(), labels.len()),
        });
    }
    let mut m = ConfusionMatrix::zeros(names);
    let k = names.len();
    for (&p, &t) in preds.iter().zip(labels) {
        let bad = if t >= k { t } else { p };
        if t >= k || p >= k {
            return Err(Error::ClassOutOfRange { index: bad, classes: k });
        }
        m.counts[t][p] += 1;
    }
    Ok(m)
}

pub fn accuracy(m: &ConfusionMatrix) -> Result<f64> {
    match m.total() {
        0 => Err(Error::EmptyDataset),
        total => Ok(m.trace() as f64 / total as f64),
    }
}

/// Per-class precision, recall and F1.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub names: Vec<String>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
}

impl ClassMetrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,precision,recall,f1\n");
        for i in 0..self.names.len() {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4}",
                self.names[i], self.precision[i], self.recall[i], self.f1[i]
            );
        }
        s
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Empty rows or columns give zero rather than NaN.
pub fn prf1(m: &ConfusionMatrix) -> ClassMetrics {
    let k = m.k();
    let precision: Vec<f64> = (0..k).map(|c| ratio(m.get(c, c), m.col_sum(c))).collect();
    let recall: Vec<f64> = (0..k).map(|c| ratio(m.get(c, c), m.row_sum(c))).collect();
    let f1 = precision
        .iter()
        .zip(&recall)
        .map(|(&p, &r)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
        .collect();
    ClassMetrics {
        names: m.names.clone(),
        precision,
        recall,
        f1,
    }
}

/// Same definition as the training L1 loss.
pub fn mean_age_l1<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T> {
    l1_loss(pred, truth)
}

/// Everything reported for one evaluated split.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub samples: usize,
    pub gender: ConfusionMatrix,
    pub ethnicity: ConfusionMatrix,
    pub gender_metrics: ClassMetrics,
    pub ethnicity_metrics: ClassMetrics,
    pub gender_acc: f64,
    pub race_acc: f64,
    pub age_l1: f64,
}

impl MetricsReport {
    pub fn from_predictions<T: Scalar>(pred: &PredictionTriple<T>, labels: &[LabelTriple]) -> Result<Self> {
        if pred.len() != labels.len() {
            return Err(Error::InvalidArgument {
                op: "MetricsReport",
                reason: format!("{} predictions for {} labels", pred.len(), labels.len()),
            });
        }
        let true_g: Vec<usize> = labels.iter().map(|l| l.gender.index()).collect();
        let true_e: Vec<usize> = labels.iter().map(|l| l.ethnicity.index()).collect();
        let gender = confusion(&pred.gender_classes(), &true_g, &Gender::NAMES)?;
        let ethnicity = confusion(&pred.ethnicity_classes(), &true_e, &Ethnicity::NAMES)?;
        let ages: Vec<f64> = labels.iter().map(|l| f64::from(l.age)).collect();
        let pred_ages: Vec<f64> = pred.age.iter().map(|a| a.to_f64_lossy()).collect();
        Ok(Self {
            samples: labels.len(),
            gender_acc: accuracy(&gender)?,
            race_acc: accuracy(&ethnicity)?,
            age_l1: mean_age_l1(&pred_ages, &ages)?,
            gender_metrics: prf1(&gender),
            ethnicity_metrics: prf1(&ethnicity),
            gender,
            ethnicity,
        })
    }

    /// `gender_acc race_acc age_l1` on one line.
    pub fn summary_line(&self) -> String {
        format!(
            "gender_acc {:.4} race_acc {:.4} age_l1 {:.2}",
            self.gender_acc, self.race_acc, self.age_l1
        )
    }

    pub fn to_csv(&self) -> String {
        format!(
            "# summary\nmetric,value\nsamples,{}\ngender_acc,{:.6}\nrace_acc,{:.6}\nage_l1,{:.6}\n\n\
             # gender_confusion\n{}\n# ethnicity_confusion\n{}\n# gender_prf1\n{}\n# ethnicity_prf1\n{}",
            self.samples,
            self.gender_acc,
            self.race_acc,
            self.age_l1,
            self.gender.to_csv(),
            self.ethnicity.to_csv(),
            self.gender_metrics.to_csv(),
            self.ethnicity_metrics.to_csv(),
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\nsamples {}\n\n", self.summary_line(), self.samples);
        for (title, m, cm) in [
            ("gender", &self.gender_metrics, &self.gender),
            ("ethnicity", &self.ethnicity_metrics, &self.ethnicity),
        ] {
            let _ = writeln!(s, "{title} confusion (rows true, columns predicted)");
            let _ = write!(s, "{:>10}", "");
            for n in cm.names() {
                let _ = write!(s, "{n:>9}");
            }
            s.push('\n');
            for (i, n) in cm.names().iter().enumerate() {
                let _ = write!(s, "{n:>10}");
                for v in &cm.counts()[i] {
                    let _ = write!(s, "{v:>9}");
                }
                s.push('\n');
            }
            let _ = writeln!(s, "{:>10}{:>10}{:>10}{:>10}", "class", "precision", "recall", "f1");
            for i in 0..m.names.len() {
                let _ = writeln!(
                    s,
                    "{:>10}{:>10.2}{:>10.2}{:>10.2}",
                    m.names[i], m.precision[i], m.recall[i], m.f1[i]
                );
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_give_diagonal() {
        let y = [0, 1, 2, 2, 4];
        let m = confusion(&y, &y, &Ethnicity::NAMES).unwrap();
        assert_eq!(m.trace(), 5);
        assert_eq!(m.total(), 5);
        assert_eq!(accuracy(&m).unwrap(), 1.0);
    }

    #[test]
    fn out_of_range_class_rejected() {
        assert!(matches!(
            confusion(&[5], &[0], &Ethnicity::NAMES),
            Err(Error::ClassOutOfRange { index: 5, classes: 5 })
        ));
        assert!(confusion(&[0], &[2], &Gender::NAMES).is_err());
    }

    #[test]
    fn empty_matrix_has_no_accuracy() {
        assert!(accuracy(&ConfusionMatrix::zeros(&Gender::NAMES)).is_err());
    }

    #[test]
    fn single_class_predictor() {
        let m = confusion(&[2, 2, 2, 2], &[0, 1, 2, 3], &Ethnicity::NAMES).unwrap();
        let r = prf1(&m);
        assert_eq!(r.recall, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(r.precision[2], 0.25);
        assert_eq!(r.f1[4], 0.0);
    }

    #[test]
    fn age_metric_extremes() {
        assert_eq!(mean_age_l1(&[40.0f64, 3.0], &[40.0, 3.0]).unwrap(), 0.0);
        assert_eq!(mean_age_l1(&[0.0f64], &[116.0]).unwrap(), 116.0);
        assert_eq!(
            mean_age_l1(&[10.0f32, 20.0], &[12.0, 16.0]).unwrap(),
            l1_loss(&[10.0f32, 20.0], &[12.0, 16.0]).unwrap()
        );
    }
}
