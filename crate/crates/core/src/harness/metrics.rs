//! Accuracy, confusion matrices, reports and training curves.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return contract_err(format!("accuracy needs equal nonempty inputs, got {} and {}", pred.len(), truth.len()));
    }
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// Entry `(i, j)` counts items of true class `i` predicted as `j`.
pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return contract_err("prediction and truth lengths differ");
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return contract_err(format!("label {} out of range for {classes} classes", p.max(t)));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn trace_ratio(m: &[Vec<u64>]) -> f64 {
    let total: u64 = m.iter().flatten().sum();
    let diag: u64 = (0..m.len()).map(|i| m[i][i]).sum();
    diag as f64 / total.max(1) as f64
}

/// Scores of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    /// Recall per true class; NaN-free, classes without items score 0.
    pub per_class_accuracy: Vec<f64>,
}

impl Scores {
    pub fn compute(pred: &[usize], truth: &[usize], classes: usize) -> Result<Scores> {
        let accuracy = accuracy(pred, truth)?;
        let confusion = confusion(pred, truth, classes)?;
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[i] as f64 / n as f64
                }
            })
            .collect();
        Ok(Scores { accuracy, confusion, per_class_accuracy })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub test_windows: usize,
    pub clean: Scores,
    pub corrupted: Option<Scores>,
}

impl MetricsReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

/// Per-iteration values of one tracked quantity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curve {
    pub name: String,
    pub values: Vec<f64>,
}

impl Curve {
    pub fn new(name: impl Into<String>) -> Curve {
        Curve { name: name.into(), values: Vec::new() }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("iteration,{}\n", self.name);
        for (i, v) in self.values.iter().enumerate() {
            s.push_str(&format!("{i},{v}\n"));
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{}.csv", self.name)), self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert!((accuracy(&[0, 1, 2], &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn confusion_examples() {
        let m = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let m = confusion(&[1, 1, 1, 1], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(m, vec![vec![0, 1, 0], vec![0, 1, 0], vec![0, 2, 0]]);
        assert!(confusion(&[3], &[0], 3).is_err());
    }

    #[test]
    fn per_class_scores() {
        let s = Scores::compute(&[0, 0, 1, 1], &[0, 1, 1, 1], 3).unwrap();
        assert_eq!(s.per_class_accuracy, vec![1.0, 2.0 / 3.0, 0.0]);
        assert_eq!(trace_ratio(&s.confusion), s.accuracy);
    }

    #[test]
    fn curve_csv() {
        let c = Curve { name: "loss".into(), values: vec![1.5, 0.5] };
        assert_eq!(c.to_csv(), "iteration,loss\n0,1.5\n1,0.5\n");
    }
}
