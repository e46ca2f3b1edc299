//! Class-incremental accuracy grid and the metrics derived from it.
//!
//! `S[t][τ]` is the accuracy on task `τ` after training through task `t`
//! (both 1-based in the metric functions). With `t` tasks seen:
//!
//! ```text
//! A_t = (1/t) Σ_{τ≤t} S[t][τ]
//! F_t = (1/(t−1)) Σ_{τ<t} max_{τ≤τ'<t} (S[τ'][τ] − S[t][τ])
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular accuracy grid; row `t` (0-based) holds `t + 1` entries once
/// complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            rows: Vec::with_capacity(num_tasks),
        }
    }

    /// Builds a grid from complete rows (row `t` has `t + 1` entries).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut s = Self::new(rows.len());
        for r in rows {
            s.push_row(r)?;
        }
        Ok(s)
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    /// Number of completed rows.
    pub fn completed(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Appends the row for the next task; it must hold one accuracy per task
    /// seen so far, each in `[0, 1]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.num_tasks {
            return Err(Error::shape("accuracy matrix", "all rows already recorded"));
        }
        if row.len() != t + 1 {
            return Err(Error::shape(
                "accuracy matrix",
                format!("row {} needs {} entries, got {}", t + 1, t + 1, row.len()),
            ));
        }
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::shape(
                "accuracy matrix",
                format!("accuracy {bad} outside [0, 1]"),
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    /// `S[t][τ]`, 1-based; `None` above the diagonal or for unfinished rows.
    pub fn get(&self, t: usize, tau: usize) -> Option<f64> {
        if t == 0 || tau == 0 || tau > t {
            return None;
        }
        self.rows.get(t - 1).map(|r| r[tau - 1])
    }

    fn check_row(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.rows.len() {
            return Err(Error::UndefinedMetric(format!(
                "row {t} not recorded ({} rows complete)",
                self.rows.len()
            )));
        }
        Ok(())
    }
}

/// `A_t`, the mean of row `t`.
pub fn average_accuracy(s: &AccuracyMatrix, t: usize) -> Result<f64> {
    s.check_row(t)?;
    let row = &s.rows[t - 1];
    Ok(row.iter().sum::<f64>() / t as f64)
}

/// `F_t`, the mean drop from each earlier task's best accuracy. Negative when
/// tasks improved; not clamped.
pub fn forgetting(s: &AccuracyMatrix, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::UndefinedMetric(format!(
            "forgetting needs at least two tasks, got t = {t}"
        )));
    }
    s.check_row(t)?;
    let last = &s.rows[t - 1];
    let mut best = s.rows[0].clone();
    best.resize(t - 1, f64::NEG_INFINITY);
    for row in &s.rows[1..t - 1] {
        for (b, &a) in best.iter_mut().zip(row) {
            *b = b.max(a);
        }
    }
    let total: f64 = best.iter().zip(last).map(|(b, a)| b - a).sum();
    Ok(total / (t - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_examples() {
        let s = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.6]]).unwrap();
        assert_eq!(average_accuracy(&s, 1).unwrap(), 0.9);
        assert!((average_accuracy(&s, 2).unwrap() - 0.7).abs() < 1e-15);
        assert!(average_accuracy(&s, 3).is_err());
    }

    #[test]
    fn forgetting_examples() {
        let s = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.5, 0.8]]).unwrap();
        assert!((forgetting(&s, 2).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(forgetting(&s, 1), Err(Error::UndefinedMetric(_))));

        let improving = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.7, 0.9]]).unwrap();
        assert!((forgetting(&improving, 2).unwrap() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn grid_validation() {
        let mut s = AccuracyMatrix::new(2);
        assert!(s.push_row(vec![0.5, 0.5]).is_err());
        assert!(s.push_row(vec![1.5]).is_err());
        s.push_row(vec![0.5]).unwrap();
        s.push_row(vec![0.5, 0.25]).unwrap();
        assert!(s.push_row(vec![0.1, 0.1, 0.1]).is_err());
        assert_eq!(s.get(1, 2), None);
        assert_eq!(s.get(2, 2), Some(0.25));
    }
}
