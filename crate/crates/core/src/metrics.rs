//! Continual-learning metrics over the lower-triangular accuracy matrix, and
//! the train/inference prompt usage gap.

use crate::error::{Error, Result};

/// `A[i][j]`: accuracy on task `j` after training through task `i`, `j <= i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the row for the next task; it must have one entry per task so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::LengthMismatch(row.len(), self.rows.len() + 1));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("accuracy entries must lie in [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    fn last(&self) -> Result<&[f64]> {
        self.rows
            .last()
            .map(|r| r.as_slice())
            .ok_or(Error::Empty("accuracy matrix"))
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Final average accuracy: mean of the last row.
pub fn faa(a: &AccuracyMatrix) -> Result<f64> {
    Ok(mean(a.last()?))
}

/// Cumulative average accuracy: mean over tasks of each row's average.
pub fn caa(a: &AccuracyMatrix) -> Result<f64> {
    if a.tasks() == 0 {
        return Err(Error::Empty("accuracy matrix"));
    }
    Ok(a.rows.iter().map(|r| mean(r)).sum::<f64>() / a.tasks() as f64)
}

/// Final forgetting: mean over non-final tasks of (best accuracy before the
/// final model) minus (final accuracy).
pub fn ffm(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.tasks();
    if t < 2 {
        return Err(Error::ForgettingUndefined);
    }
    let last = &a.rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|j| {
            let peak = (j..t - 1)
                .map(|l| a.rows[l][j])
                .fold(f64::NEG_INFINITY, f64::max);
            peak - last[j]
        })
        .sum();
    Ok(total / (t - 1) as f64)
}

/// Share of selections per expert; all zeros when nothing was selected.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageDistribution {
    pub proportions: Vec<f64>,
}

impl UsageDistribution {
    pub fn from_counts(counts: &[u64]) -> Self {
        let total: u64 = counts.iter().sum();
        let proportions = if total == 0 {
            vec![0.0; counts.len()]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        Self { proportions }
    }

    pub fn len(&self) -> usize {
        self.proportions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proportions.is_empty()
    }
}

/// L1 distance between training-time and inference-time usage.
pub fn usage_gap(train: &UsageDistribution, val: &UsageDistribution) -> Result<f64> {
    if train.len() != val.len() {
        return Err(Error::LengthMismatch(train.len(), val.len()));
    }
    Ok(train
        .proportions
        .iter()
        .zip(&val.proportions)
        .map(|(a, b)| (a - b).abs())
        .sum())
}
