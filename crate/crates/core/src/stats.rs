//! Streaming Gaussian statistics over frozen features and the Mahalanobis
//! machinery built on them.
//!
//! Means and scatter matrices are merged chunk by chunk with the pairwise
//! (Chan et al.) update, so folding a sample set in any chunking yields the
//! same population mean and covariance as a single batch pass.

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, spd_inverse, Matrix};

/// Running mean and scatter (sum of centered outer products) of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: Vec<f64>,
    scatter: Matrix,
}

/// Background statistics pooled over every feature seen so far.
pub type GlobalStats = RunningStats;

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            scatter: Matrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population covariance (scatter divided by the count).
    pub fn cov(&self) -> Matrix {
        if self.count == 0 {
            return Matrix::zeros(self.dim(), self.dim());
        }
        self.scatter.scaled(1.0 / self.count as f64)
    }

    /// Folds a batch of samples in. An empty batch is a no-op.
    pub fn fold_samples<V: AsRef<[f64]>>(&mut self, batch: &[V]) -> Result<()> {
        let d = self.dim();
        for v in batch {
            check_dim(d, v.as_ref().len())?;
        }
        if batch.is_empty() {
            return Ok(());
        }
        let nb = batch.len() as f64;
        let mut mean_b = vec![0.0; d];
        for v in batch {
            for (m, x) in mean_b.iter_mut().zip(v.as_ref()) {
                *m += x;
            }
        }
        mean_b.iter_mut().for_each(|m| *m /= nb);

        let mut scatter_b = Matrix::zeros(d, d);
        let mut dev = vec![0.0; d];
        for v in batch {
            for ((o, x), m) in dev.iter_mut().zip(v.as_ref()).zip(&mean_b) {
                *o = x - m;
            }
            add_outer(&mut scatter_b, &dev, 1.0);
        }
        self.merge_parts(batch.len() as u64, &mean_b, &scatter_b);
        Ok(())
    }

    /// Merges another set of statistics over the same dimension.
    pub fn merge(&mut self, other: &RunningStats) -> Result<()> {
        check_dim(self.dim(), other.dim())?;
        if other.count > 0 {
            self.merge_parts(other.count, &other.mean, &other.scatter);
        }
        Ok(())
    }

    fn merge_parts(&mut self, nb: u64, mean_b: &[f64], scatter_b: &Matrix) {
        if self.count == 0 {
            self.count = nb;
            self.mean.copy_from_slice(mean_b);
            self.scatter = scatter_b.clone();
            return;
        }
        let na = self.count as f64;
        let nbf = nb as f64;
        let n = na + nbf;
        let delta: Vec<f64> = mean_b.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nbf / n;
        }
        for (s, b) in self
            .scatter
            .as_mut_slice()
            .iter_mut()
            .zip(scatter_b.as_slice())
        {
            *s += b;
        }
        add_outer(&mut self.scatter, &delta, na * nbf / n);
        self.count += nb;
    }

    #[cfg(test)]
    pub(crate) fn from_parts(count: u64, mean: Vec<f64>, scatter: Matrix) -> Self {
        Self {
            count,
            mean,
            scatter,
        }
    }
}

fn add_outer(m: &mut Matrix, v: &[f64], w: f64) {
    let d = v.len();
    for i in 0..d {
        let vi = v[i] * w;
        if vi == 0.0 {
            continue;
        }
        for (o, vj) in m.row_mut(i).iter_mut().zip(v) {
            *o += vi * vj;
        }
    }
}

/// Per-class running statistics plus the running average self-distance.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub class_id: u32,
    pub stats: RunningStats,
    pub md_hat: f64,
}

impl ClassStats {
    pub fn new(class_id: u32, dim: usize) -> Self {
        Self {
            class_id,
            stats: RunningStats::new(dim),
            md_hat: 0.0,
        }
    }

    pub fn mean(&self) -> &[f64] {
        self.stats.mean()
    }

    pub fn count(&self) -> u64 {
        self.stats.count()
    }
}

/// How much ridge to add to the background covariance before inverting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    /// `1e-6 * trace(cov) / d`, floored at `1e-6` for a degenerate covariance.
    Auto,
    Fixed(f64),
}

impl Epsilon {
    pub const AUTO_SCALE: f64 = 1e-6;

    pub fn resolve(self, cov: &Matrix) -> f64 {
        match self {
            Epsilon::Fixed(e) => e,
            Epsilon::Auto => {
                let d = cov.rows().max(1) as f64;
                let e = Self::AUTO_SCALE * cov.trace() / d;
                if e > 0.0 {
                    e
                } else {
                    Self::AUTO_SCALE
                }
            }
        }
    }
}

/// Inverse of the regularized background covariance, frozen at a task boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionCache {
    pub precision: Matrix,
    pub epsilon_used: f64,
    pub source_count: u64,
}

impl PrecisionCache {
    pub fn dim(&self) -> usize {
        self.precision.rows()
    }
}

/// Computes `(cov + eps * I)^-1`.
pub fn regularized_precision(global: &GlobalStats, epsilon: f64) -> Result<PrecisionCache> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mut a = global.cov();
    a.add_diagonal(epsilon);
    Ok(PrecisionCache {
        precision: spd_inverse(&a)?,
        epsilon_used: epsilon,
        source_count: global.count(),
    })
}

/// Squared Mahalanobis distance `(x - mean)^T P (x - mean)`, clamped at zero.
pub fn mahalanobis(x: &[f64], mean: &[f64], precision: &PrecisionCache) -> Result<f64> {
    let d = precision.dim();
    check_dim(d, x.len())?;
    check_dim(d, mean.len())?;
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let p = &precision.precision;
    let q: f64 = (0..d).map(|i| diff[i] * dot(p.row(i), &diff)).sum();
    Ok(q.max(0.0))
}

/// Count-weighted update of a class's running average Mahalanobis distance.
///
/// New terms are measured against the current class mean and background
/// precision; earlier contributions are kept as they were accumulated.
pub fn update_md_hat<V: AsRef<[f64]>>(
    prev_md_hat: f64,
    prev_count: u64,
    class_features: &[V],
    mean: &[f64],
    precision: &PrecisionCache,
) -> Result<f64> {
    let total = prev_count + class_features.len() as u64;
    if total == 0 {
        return Err(Error::Empty("class history and batch"));
    }
    if class_features.is_empty() {
        return Ok(prev_md_hat);
    }
    let prev = if prev_count == 0 {
        0.0
    } else {
        prev_count as f64 * prev_md_hat
    };
    let mut sum = 0.0;
    for x in class_features {
        sum += mahalanobis(x.as_ref(), mean, precision)?;
    }
    Ok((prev + sum) / total as f64)
}
