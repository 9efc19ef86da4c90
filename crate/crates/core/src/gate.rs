//! Novelty gate: relative Mahalanobis scoring against the task summary,
//! plus the score buffer whose quantile sets the per-sample mask threshold.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::stats::{
    mahalanobis, regularized_precision, update_md_hat, ClassStats, Epsilon, GlobalStats,
    PrecisionCache,
};

/// Everything the gate remembers about past tasks: per-class statistics,
/// background statistics and the precision frozen at the last boundary.
#[derive(Debug, Clone)]
pub struct TaskSummary {
    dim: usize,
    epsilon: Epsilon,
    pub per_class: BTreeMap<u32, ClassStats>,
    pub global: GlobalStats,
    pub precision: Option<PrecisionCache>,
    pub tasks_seen: usize,
}

impl TaskSummary {
    pub fn new(dim: usize, epsilon: Epsilon) -> Self {
        Self {
            dim,
            epsilon,
            per_class: BTreeMap::new(),
            global: GlobalStats::new(dim),
            precision: None,
            tasks_seen: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Folds one task's labeled features in at a task boundary.
    ///
    /// Order: class and background statistics, then the precision refresh,
    /// then the md_hat update of every class present in the task (which uses
    /// the refreshed class mean and precision).
    pub fn absorb_task<V: AsRef<[f64]>>(&mut self, features: &[V], labels: &[u32]) -> Result<()> {
        if features.len() != labels.len() {
            return Err(Error::LengthMismatch(features.len(), labels.len()));
        }
        for f in features {
            check_dim(self.dim, f.as_ref().len())?;
        }
        let mut by_class: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
        for (f, &y) in features.iter().zip(labels) {
            by_class.entry(y).or_default().push(f.as_ref());
        }

        let mut prev = BTreeMap::new();
        for (&c, batch) in &by_class {
            let cs = self
                .per_class
                .entry(c)
                .or_insert_with(|| ClassStats::new(c, self.dim));
            prev.insert(c, (cs.md_hat, cs.count()));
            cs.stats.fold_samples(batch)?;
        }
        self.global.fold_samples(features)?;
        let eps = self.epsilon.resolve(&self.global.cov());
        let precision = regularized_precision(&self.global, eps)?;

        for (c, batch) in &by_class {
            let (md_prev, n_prev) = prev[c];
            let cs = self.per_class.get_mut(c).expect("class inserted above");
            cs.md_hat = update_md_hat(md_prev, n_prev, batch, cs.stats.mean(), &precision)?;
        }
        self.precision = Some(precision);
        self.tasks_seen += 1;
        Ok(())
    }

    pub fn has_history(&self) -> bool {
        self.precision.is_some() && !self.per_class.is_empty()
    }

    /// Per-class means, ordered by class id.
    pub fn class_means(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.per_class.iter().map(|(&c, s)| (c, s.mean()))
    }
}

/// Relative Mahalanobis distance: the smallest class distance after
/// subtracting each class's average self-distance.
pub fn rmd_score(x: &[f64], summary: &TaskSummary) -> Result<f64> {
    let precision = summary.precision.as_ref().ok_or(Error::NoHistory)?;
    if summary.per_class.is_empty() {
        return Err(Error::NoHistory);
    }
    let mut best = f64::INFINITY;
    for cs in summary.per_class.values() {
        let s = mahalanobis(x, cs.mean(), precision)? - cs.md_hat;
        if s < best {
            best = s;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskDecision {
    /// 0 routes to existing experts, 1 to the current task's new experts.
    pub bit: u8,
    pub score: f64,
    pub threshold: f64,
}

impl MaskDecision {
    /// Decision for a task with no history: everything is novel.
    pub fn cold_start() -> Self {
        Self {
            bit: 1,
            score: f64::NAN,
            threshold: f64::NAN,
        }
    }

    pub fn from_score(score: f64, tau: f64) -> Self {
        Self {
            bit: u8::from(score > tau),
            score,
            threshold: tau,
        }
    }

    pub fn is_novel(&self) -> bool {
        self.bit == 1
    }
}

pub fn mask(x: &[f64], summary: &TaskSummary, tau: f64) -> Result<MaskDecision> {
    Ok(MaskDecision::from_score(rmd_score(x, summary)?, tau))
}

/// Per-task store of scalar scores with an optional uniform reservoir cap.
#[derive(Debug, Clone)]
pub struct ScoreBuffer {
    cap_per_task: Option<usize>,
    tasks: Vec<TaskScores>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskScores {
    pub task: u32,
    /// Number of scores offered for this task, kept or not.
    pub offered: u64,
    pub scores: Vec<f64>,
}

impl ScoreBuffer {
    pub const DEFAULT_CAP: usize = 2048;

    pub fn new(cap_per_task: Option<usize>, seed: u64) -> Self {
        Self {
            cap_per_task,
            tasks: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn unbounded() -> Self {
        Self::new(None, 0)
    }

    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        let mut b = Self::unbounded();
        for &s in scores {
            b.push(0, s)?;
        }
        Ok(b)
    }

    pub fn push(&mut self, task: u32, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::NonFinite("score"));
        }
        let needs_new = match self.tasks.last() {
            Some(last) if last.task == task => false,
            Some(last) if last.task > task => {
                return Err(Error::Config(format!(
                    "score buffer task index went backwards: {} after {}",
                    task, last.task
                )))
            }
            _ => true,
        };
        if needs_new {
            self.tasks.push(TaskScores {
                task,
                offered: 0,
                scores: Vec::new(),
            });
        }
        let cap = self.cap_per_task;
        let entry = self.tasks.last_mut().expect("pushed above");
        entry.offered += 1;
        match cap {
            Some(cap) if entry.scores.len() >= cap => {
                let j = self.rng.random_range(0..entry.offered);
                if (j as usize) < cap {
                    entry.scores[j as usize] = score;
                }
            }
            _ => entry.scores.push(score),
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tasks.iter().map(|t| t.scores.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tasks(&self) -> &[TaskScores] {
        &self.tasks
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.tasks.iter().flat_map(|t| t.scores.iter().copied())
    }
}

/// Nearest-rank empirical quantile: the `ceil(q * n)`-th smallest score.
pub fn threshold(buffer: &ScoreBuffer, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::QuantileRange(q));
    }
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let mut all: Vec<f64> = buffer.scores().collect();
    let k = nearest_rank(q, all.len());
    let (_, kth, _) = all.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

pub(crate) fn nearest_rank(q: f64, n: usize) -> usize {
    // tolerance absorbs representation error in q (0.95 * 100 and friends)
    let k = (q * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Rank-sum AUC: probability that a positive scores above a negative,
/// ties counting one half.
pub fn auc(negatives: &[f64], positives: &[f64]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Empty("negative (seen) scores"));
    }
    if positives.is_empty() {
        return Err(Error::Empty("positive (unseen) scores"));
    }
    if negatives.iter().chain(positives).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores"));
    }
    let mut all: Vec<(f64, bool)> = negatives
        .iter()
        .map(|&s| (s, false))
        .chain(positives.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // midranks over tie groups, 1-based
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let np = positives.len() as f64;
    let nn = negatives.len() as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// AUC of RMD scores with unseen samples as the positive class.
pub fn separability_auc<V: AsRef<[f64]>>(
    summary: &TaskSummary,
    seen: &[V],
    unseen: &[V],
) -> Result<f64> {
    if seen.is_empty() {
        return Err(Error::Empty("seen samples"));
    }
    if unseen.is_empty() {
        return Err(Error::Empty("unseen samples"));
    }
    let score = |v: &[V]| -> Result<Vec<f64>> {
        v.iter().map(|x| rmd_score(x.as_ref(), summary)).collect()
    };
    auc(&score(seen)?, &score(unseen)?)
}
