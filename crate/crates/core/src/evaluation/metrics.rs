use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Counts of (true class, predicted class); rows are true classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn from_pairs(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid("truth and prediction lengths differ"));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::invalid(format!(
                "class index ({truth}, {predicted}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.classes.max(1)).map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Element-wise sum of two matrices over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Recall of every class; an empty row is an error.
    pub fn recalls(&self) -> Result<Vec<f64>> {
        self.row_sums()
            .iter()
            .enumerate()
            .map(|(c, &n)| {
                if n == 0 {
                    Err(Error::invalid(format!("class {c} has no validation utterances")))
                } else {
                    Ok(self.get(c, c) as f64 / n as f64)
                }
            })
            .collect()
    }

    /// Unweighted average recall.
    pub fn uar(&self) -> Result<f64> {
        let r = self.recalls()?;
        Ok(r.iter().sum::<f64>() / r.len() as f64)
    }

    /// Mean recall over the classes that occur; `None` if none do.
    pub fn uar_present(&self) -> Option<f64> {
        let r: Vec<f64> = self
            .row_sums()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, &n)| self.get(c, c) as f64 / n as f64)
            .collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }

    pub fn accuracy(&self) -> f64 {
        let hit: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        hit as f64 / self.total() as f64
    }

    /// Row-stochastic version of the counts.
    pub fn normalized(&self) -> Result<Vec<Vec<f64>>> {
        let sums = self.row_sums();
        (0..self.classes)
            .map(|t| {
                if sums[t] == 0 {
                    return Err(Error::invalid(format!("class {t} has no validation utterances")));
                }
                Ok((0..self.classes)
                    .map(|p| self.get(t, p) as f64 / sums[t] as f64)
                    .collect())
            })
            .collect()
    }

    /// CSV with class names as row and column headers.
    pub fn to_csv(&self, names: &[String]) -> String {
        csv(names, |t, p| self.get(t, p).to_string())
    }

    pub fn to_normalized_csv(&self, names: &[String]) -> Result<String> {
        let n = self.normalized()?;
        Ok(csv(names, |t, p| format!("{:.6}", n[t][p])))
    }
}

fn csv(names: &[String], cell: impl Fn(usize, usize) -> String) -> String {
    let mut out = String::from("true\\predicted");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (t, n) in names.iter().enumerate() {
        out.push_str(n);
        for p in 0..names.len() {
            let _ = write!(out, ",{}", cell(t, p));
        }
        out.push('\n');
    }
    out
}

/// Mean and 95% normal-approximation half-width over fold scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// `None` with fewer than two folds.
    pub half_width: Option<f64>,
    pub folds: usize,
}

impl std::fmt::Display for Aggregate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.half_width {
            Some(h) => write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * h),
            None => write!(f, "{:.2}", 100.0 * self.mean),
        }
    }
}

pub fn aggregate(scores: &[f64]) -> Result<Aggregate> {
    if scores.is_empty() {
        return Err(Error::invalid("no fold scores to aggregate"));
    }
    let k = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / k;
    let half_width = (scores.len() >= 2).then(|| {
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (k - 1.0);
        1.96 * var.sqrt() / k.sqrt()
    });
    Ok(Aggregate {
        mean,
        half_width,
        folds: scores.len(),
    })
}
