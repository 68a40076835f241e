//! Confusion-matrix accumulation and segmentation metrics.

use std::io::Write;

use crate::cloud::IGNORE;
use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    class_count: usize,
    counts: Vec<u64>,
}

/// Summary of a confusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMetrics {
    pub miou: f64,
    pub macc: f64,
    /// `None` for classes absent from both ground truth and predictions.
    pub class_iou: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        Self { class_count, counts: vec![0; class_count * class_count] }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.class_count + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every non-ignored point.
    pub fn accumulate(&mut self, truth: &[i32], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        let k = self.class_count;
        if let Some(&y) = truth.iter().find(|&&y| y != IGNORE && (y < 0 || y as usize >= k)) {
            return Err(Error::InvalidInput(format!("label {y} out of range")));
        }
        if let Some(&p) = pred.iter().find(|&&p| p >= k) {
            return Err(Error::InvalidInput(format!("prediction {p} out of range")));
        }
        for (&y, &p) in truth.iter().zip(pred) {
            if y != IGNORE {
                self.counts[y as usize * k + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.class_count != self.class_count {
            return Err(Error::Shape("confusion matrices differ in size".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.class_count).map(|j| self.get(c, j)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.class_count).map(|i| self.get(i, c)).sum()
    }

    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.class_count)
            .map(|c| {
                let tp = self.get(c, c);
                let denom = self.row_sum(c) + self.col_sum(c) - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Per-class recall, `None` for classes without ground truth.
    pub fn class_recall(&self) -> Vec<Option<f64>> {
        (0..self.class_count)
            .map(|c| {
                let n = self.row_sum(c);
                (n > 0).then(|| self.get(c, c) as f64 / n as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        mean_present(&self.class_iou())
    }

    pub fn macc(&self) -> f64 {
        mean_present(&self.class_recall())
    }

    pub fn summary(&self) -> SegMetrics {
        SegMetrics { miou: self.miou(), macc: self.macc(), class_iou: self.class_iou() }
    }

    /// Writes `class,iou,recall,support` rows; absent values are left empty.
    pub fn write_class_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "class,iou,recall,support")?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for (c, (iou, rec)) in self.class_iou().into_iter().zip(self.class_recall()).enumerate() {
            writeln!(w, "{c},{},{},{}", fmt(iou), fmt(rec), self.row_sum(c))?;
        }
        Ok(())
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_example() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(cm.class_iou(), vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((cm.miou() - 0.583333).abs() < 1e-6);
        assert_eq!(cm.macc(), 0.75);
    }

    #[test]
    fn perfect_and_ignored() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 1], &[0, 1, 1]).unwrap();
        assert_eq!(cm.miou(), 1.0);
        assert_eq!(cm.macc(), 1.0);
        assert_eq!(cm.class_iou()[2], None);
        let before = cm.clone();
        cm.accumulate(&[IGNORE, IGNORE], &[2, 0]).unwrap();
        assert_eq!(cm, before);
    }

    #[test]
    fn rejects_bad_input() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&[0], &[0, 1]).is_err());
        assert!(cm.accumulate(&[2], &[0]).is_err());
        assert!(cm.accumulate(&[0], &[2]).is_err());
        assert!(cm.accumulate(&[-2], &[0]).is_err());
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn class_csv() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let mut out = Vec::new();
        cm.write_class_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "class,iou,recall,support\n0,0.500000,0.500000,2\n1,0.666667,1.000000,2\n");
    }
}
