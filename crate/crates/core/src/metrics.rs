//! Pixel-wise confusion matrix and the scores derived from it.
//!
//! Counts are exact integers; division happens only when a score is read.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Rows are ground-truth classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some quotient was 0/0 and has been defined as 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// Adds one count per pixel pair.
    pub fn accumulate<P, G>(&mut self, predicted: &[P], truth: &[G]) -> Result<()>
    where
        P: Copy + Into<u64>,
        G: Copy + Into<u64>,
    {
        if predicted.len() != truth.len() {
            return Err(Error::shape(
                "confusion_matrix",
                format!("{} predicted vs {} ground-truth pixels", predicted.len(), truth.len()),
            ));
        }
        let n = self.classes as u64;
        let mut local = vec![0u64; self.counts.len()];
        for (&p, &g) in predicted.iter().zip(truth) {
            let (p, g) = (p.into(), g.into());
            if p >= n || g >= n {
                return Err(Error::invalid(format!(
                    "class id {} outside [0, {n})",
                    if p >= n { p } else { g }
                )));
            }
            local[(g * n + p) as usize] += 1;
        }
        for (c, l) in self.counts.iter_mut().zip(local) {
            *c += l;
        }
        Ok(())
    }

    /// Matrix addition.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("merging confusion matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.classes)
            .filter(|&g| g != class)
            .map(|g| self.get(g, class))
            .sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..self.classes)
            .filter(|&p| p != class)
            .map(|p| self.get(class, p))
            .sum()
    }

    pub fn precision_recall_f1(&self, class: usize) -> ClassScores {
        let tp = self.true_positives(class);
        let (precision, dp) = ratio(tp, tp + self.false_positives(class));
        let (recall, dr) = ratio(tp, tp + self.false_negatives(class));
        let (f1, df) = if precision + recall == 0.0 {
            (0.0, true)
        } else {
            (2.0 * precision * recall / (precision + recall), false)
        };
        ClassScores {
            precision,
            recall,
            f1,
            degenerate: dp || dr || df,
        }
    }

    /// Normalized trace.
    pub fn overall_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("accuracy of an empty confusion matrix"));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// `class,precision,recall,f1` per class, then `overall_accuracy,pixel_count`.
    pub fn report_csv(&self) -> Result<String> {
        let mut s = String::from("class,precision,recall,f1,degenerate\n");
        for c in 0..self.classes {
            let sc = self.precision_recall_f1(c);
            let _ = writeln!(
                s,
                "{c},{:.6},{:.6},{:.6},{}",
                sc.precision, sc.recall, sc.f1, sc.degenerate
            );
        }
        let _ = writeln!(
            s,
            "overall_accuracy,pixel_count\n{:.6},{}",
            self.overall_accuracy()?,
            self.total()
        );
        Ok(s)
    }
}
