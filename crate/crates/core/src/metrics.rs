//! Classification metrics from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(format!("{} labels but {} predictions", truth.len(), predicted.len())));
        }
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let classes = self.classes();
        for label in [truth, predicted] {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        trace as f64 / total as f64
    }

    /// Per-class recall (row-normalised diagonal); classes without samples
    /// score 0.
    pub fn recalls(&self) -> Vec<f64> {
        (0..self.classes())
            .map(|i| {
                let row: u64 = self.counts[i].iter().sum();
                if row == 0 { 0.0 } else { self.counts[i][i] as f64 / row as f64 }
            })
            .collect()
    }

    /// Per-class precision (column-normalised diagonal); classes never
    /// predicted score 0.
    pub fn precisions(&self) -> Vec<f64> {
        (0..self.classes())
            .map(|j| {
                let col: u64 = self.counts.iter().map(|r| r[j]).sum();
                if col == 0 { 0.0 } else { self.counts[j][j] as f64 / col as f64 }
            })
            .collect()
    }

    pub fn macro_recall(&self) -> f64 {
        mean(&self.recalls())
    }

    pub fn macro_precision(&self) -> f64 {
        mean(&self.precisions())
    }

    /// CSV with a header row of predicted classes and one row per true class.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("true\\predicted");
        for n in class_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (name, row) in class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Index of the largest entry of each row of a `[N, L]` score matrix.
/// Ties go to the lowest index.
pub fn argmax_rows(scores: &[f64], width: usize) -> Vec<usize> {
    scores
        .chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Two-sample Kolmogorov-Smirnov statistic: the largest gap between the
/// empirical CDFs of `a` and `b`. Zero when either sample is empty.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        // Step past every copy of the smaller value in both samples.
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
