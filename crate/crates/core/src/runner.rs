//! Continual-learning driver: grow, mask, train, update statistics, update
//! the threshold and evaluate, task after task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledSample, TaskStream};
use crate::error::{check_dim, Error, Result};
use crate::gate::{auc, mask, rmd_score, threshold, MaskDecision, ScoreBuffer, TaskSummary};
use crate::metrics::{usage_gap, AccuracyMatrix, UsageDistribution};
use crate::model::{predict_routed, train_task, ClassifierHead, TrainConfig};
use crate::pool::{query_score, PromptPool, Route};
use crate::stats::Epsilon;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PolicyKind {
    /// Incremental pool with per-sample RMD masking.
    AdaptiveRmd,
    /// Fixed pool created up front, whole pool searchable.
    GlobalPool,
    /// New experts per task, training restricted to them.
    TaskSpecific,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [
        PolicyKind::AdaptiveRmd,
        PolicyKind::GlobalPool,
        PolicyKind::TaskSpecific,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::AdaptiveRmd => "adaptive",
            PolicyKind::GlobalPool => "global",
            PolicyKind::TaskSpecific => "task_specific",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "adaptive" | "adaptive_rmd" => Some(PolicyKind::AdaptiveRmd),
            "global" | "global_pool" => Some(PolicyKind::GlobalPool),
            "task_specific" | "task-specific" => Some(PolicyKind::TaskSpecific),
            _ => None,
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub policy: PolicyKind,
    /// Fixed pool size for [`PolicyKind::GlobalPool`]; `None` means
    /// `prompts_per_task * T` so capacities match across policies.
    pub pool_size: Option<usize>,
    pub prompt_len: usize,
    pub top_k: usize,
    pub prompts_per_task: usize,
    pub quantile: f64,
    pub epsilon: Epsilon,
    /// Per-task reservoir cap of the score buffer.
    pub score_cap: Option<usize>,
    pub train: TrainConfig,
    pub seed: u64,
    /// Compute seen/unseen separability probes at every task boundary.
    pub probe_auc: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::AdaptiveRmd,
            pool_size: None,
            prompt_len: 5,
            top_k: 1,
            prompts_per_task: 2,
            quantile: 0.95,
            epsilon: Epsilon::Auto,
            score_cap: Some(ScoreBuffer::DEFAULT_CAP),
            train: TrainConfig::default(),
            seed: 0,
            probe_auc: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::QuantileRange(self.quantile));
        }
        if self.prompt_len == 0 || self.top_k == 0 || self.prompts_per_task == 0 {
            return bad("prompt_len, top_k and prompts_per_task must be >= 1".into());
        }
        if self.pool_size == Some(0) {
            return bad("pool_size must be >= 1".into());
        }
        if let Epsilon::Fixed(e) = self.epsilon {
            if e.is_nan() || e < 0.0 {
                return bad(format!("epsilon must be >= 0, got {e}"));
            }
        }
        if self.score_cap == Some(0) {
            return bad("score_cap must be >= 1".into());
        }
        self.train.validate()
    }

    pub fn global_pool_size(&self, tasks: usize) -> usize {
        self.pool_size.unwrap_or(self.prompts_per_task * tasks)
    }
}

/// One gate decision, as streamed to the gate log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateRecord {
    pub task: usize,
    pub index: usize,
    pub decision: MaskDecision,
}

/// Seen-versus-unseen AUC at one task boundary for the three scorers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AucProbe {
    pub boundary: usize,
    pub rmd: f64,
    pub learnable_key: f64,
    pub task_centroids: f64,
}

/// Averages probes over boundaries `t >= 1`, or over all of them when the
/// stream only has the boundary after task 0.
pub fn average_probes(probes: &[AucProbe]) -> Option<AucProbe> {
    let later: Vec<&AucProbe> = probes.iter().filter(|p| p.boundary >= 1).collect();
    let pick: Vec<&AucProbe> = if later.is_empty() {
        probes.iter().collect()
    } else {
        later
    };
    if pick.is_empty() {
        return None;
    }
    let n = pick.len() as f64;
    Some(AucProbe {
        boundary: usize::MAX,
        rmd: pick.iter().map(|p| p.rmd).sum::<f64>() / n,
        learnable_key: pick.iter().map(|p| p.learnable_key).sum::<f64>() / n,
        task_centroids: pick.iter().map(|p| p.task_centroids).sum::<f64>() / n,
    })
}

/// Engine state carried across tasks. Holds statistics, scalar scores and
/// parameters only; no raw training features survive a task.
#[derive(Debug, Clone)]
pub struct Learner {
    pub summary: TaskSummary,
    pub pool: PromptPool,
    pub head: ClassifierHead,
    pub buffer: ScoreBuffer,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: RunConfig,
    pub accuracy: AccuracyMatrix,
    /// Threshold in force while training task `t` (none on cold start and
    /// for policies without a gate).
    pub taus: Vec<Option<f64>>,
    pub train_usage: Vec<u64>,
    pub val_usage: Vec<u64>,
    pub probes: Vec<AucProbe>,
    pub gate_log: Vec<GateRecord>,
    /// Wall-clock seconds per task; not part of any serialized output.
    pub task_seconds: Vec<f64>,
    pub state: Learner,
}

impl RunResult {
    pub fn usage_gap(&self) -> Result<f64> {
        usage_gap(
            &UsageDistribution::from_counts(&self.train_usage),
            &UsageDistribution::from_counts(&self.val_usage),
        )
    }

    /// Fraction of task `t` training samples the gate sent to existing experts.
    pub fn in_distribution_rate(&self, task: usize) -> Option<f64> {
        let recs: Vec<_> = self.gate_log.iter().filter(|r| r.task == task).collect();
        if recs.is_empty() {
            return None;
        }
        Some(recs.iter().filter(|r| r.decision.bit == 0).count() as f64 / recs.len() as f64)
    }

    pub fn average_probe(&self) -> Option<AucProbe> {
        average_probes(&self.probes)
    }
}

fn features_of(samples: &[LabeledSample]) -> Vec<&[f64]> {
    samples.iter().map(|s| s.features.as_slice()).collect()
}

/// Accuracy on each test set with task-free inference, plus how often each
/// expert was selected.
pub fn evaluate(
    head: &ClassifierHead,
    pool: &PromptPool,
    top_k: usize,
    test_sets: &[&[LabeledSample]],
) -> Result<(Vec<f64>, Vec<u64>)> {
    let mut usage = vec![0u64; pool.len()];
    let mut row = Vec::with_capacity(test_sets.len());
    for set in test_sets {
        if set.is_empty() {
            return Err(Error::Empty("test set"));
        }
        let mut correct = 0usize;
        for s in set.iter() {
            let (pred, ids) = predict_routed(&s.features, head, pool, top_k)?;
            for id in ids {
                usage[id] += 1;
            }
            correct += usize::from(pred == s.label);
        }
        row.push(correct as f64 / set.len() as f64);
    }
    Ok((row, usage))
}

fn neg_max_cosine<'a>(z: &[f64], refs: impl Iterator<Item = &'a [f64]>) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for r in refs {
        best = best.max(query_score(z, r)?);
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::Empty("reference vectors"));
    }
    Ok(-best)
}

/// Seen-versus-unseen separability after task `boundary`: seen are held-out
/// samples of tasks `<= boundary`, unseen those of later tasks.
pub fn auc_probe(
    summary: &TaskSummary,
    pool: &PromptPool,
    stream: &TaskStream,
    boundary: usize,
) -> Result<AucProbe> {
    if boundary + 1 >= stream.len() {
        return Err(Error::Config(format!(
            "no future tasks after boundary {boundary} of {}",
            stream.len()
        )));
    }
    let seen: Vec<&[f64]> = stream.tasks[..=boundary]
        .iter()
        .flat_map(|t| features_of(&t.test))
        .collect();
    let unseen: Vec<&[f64]> = stream.tasks[boundary + 1..]
        .iter()
        .flat_map(|t| features_of(&t.test))
        .collect();

    let score_all = |f: &dyn Fn(&[f64]) -> Result<f64>| -> Result<(Vec<f64>, Vec<f64>)> {
        let a = seen.iter().map(|z| f(z)).collect::<Result<Vec<_>>>()?;
        let b = unseen.iter().map(|z| f(z)).collect::<Result<Vec<_>>>()?;
        Ok((a, b))
    };
    let (s, u) = score_all(&|z| rmd_score(z, summary))?;
    let rmd = auc(&s, &u)?;
    let (s, u) = score_all(&|z| neg_max_cosine(z, pool.experts().iter().map(|e| e.key.as_slice())))?;
    let learnable_key = auc(&s, &u)?;
    let (s, u) = score_all(&|z| neg_max_cosine(z, summary.class_means().map(|(_, m)| m)))?;
    let task_centroids = auc(&s, &u)?;
    Ok(AucProbe {
        boundary,
        rmd,
        learnable_key,
        task_centroids,
    })
}

struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Stopwatch(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

/// Runs the full protocol over `stream` under `config.policy`.
pub fn run_sequence(config: &RunConfig, stream: &TaskStream) -> Result<RunResult> {
    config.validate()?;
    stream.validate()?;
    let d = stream.dim;
    let n_tasks = stream.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train_cfg = config.train.clone();
    train_cfg.seed = config.seed;

    let mut state = Learner {
        summary: TaskSummary::new(d, config.epsilon),
        pool: PromptPool::new(d, config.prompt_len),
        head: ClassifierHead::new(d),
        buffer: ScoreBuffer::new(config.score_cap, config.seed ^ 0x5C0_4E5),
        tau: None,
    };
    if config.policy == PolicyKind::GlobalPool {
        state.pool.grow(config.global_pool_size(n_tasks), 0, &mut rng)?;
    }

    let mut accuracy = AccuracyMatrix::new();
    let mut taus = Vec::with_capacity(n_tasks);
    let mut train_usage: Vec<u64> = Vec::new();
    let mut val_usage = Vec::new();
    let mut probes = Vec::new();
    let mut gate_log = Vec::new();
    let mut task_seconds = Vec::with_capacity(n_tasks);

    for (t, task) in stream.tasks.iter().enumerate() {
        let clock = Stopwatch::start();
        for s in &task.train {
            check_dim(d, s.features.len())?;
        }
        if config.policy != PolicyKind::GlobalPool {
            state.pool.grow(config.prompts_per_task, t, &mut rng)?;
        }
        let feats = features_of(&task.train);
        let labels: Vec<u32> = task.train.iter().map(|s| s.label).collect();

        let routes: Vec<Route> = match config.policy {
            PolicyKind::GlobalPool => vec![Route::Global; feats.len()],
            PolicyKind::TaskSpecific => vec![Route::TaskSpecific; feats.len()],
            PolicyKind::AdaptiveRmd => {
                let decisions = match state.tau {
                    Some(tau) if state.summary.has_history() => feats
                        .iter()
                        .map(|z| mask(z, &state.summary, tau))
                        .collect::<Result<Vec<_>>>()?,
                    _ => vec![MaskDecision::cold_start(); feats.len()],
                };
                gate_log.extend(decisions.iter().enumerate().map(|(index, &decision)| {
                    GateRecord {
                        task: t,
                        index,
                        decision,
                    }
                }));
                decisions.into_iter().map(Route::Masked).collect()
            }
        };
        taus.push(match config.policy {
            PolicyKind::AdaptiveRmd => state.tau,
            _ => None,
        });

        let usage = train_task(
            &feats,
            &labels,
            &routes,
            &mut state.pool,
            &mut state.head,
            config.top_k,
            &train_cfg,
            t,
        )?;
        train_usage.resize(state.pool.len(), 0);
        for (acc, u) in train_usage.iter_mut().zip(&usage) {
            *acc += u;
        }

        // Task boundary: statistics from frozen features, then the threshold
        // from this task's scores under the refreshed summary.
        state.summary.absorb_task(&feats, &labels)?;
        if config.policy == PolicyKind::AdaptiveRmd {
            for z in &feats {
                state.buffer.push(t as u32, rmd_score(z, &state.summary)?)?;
            }
            state.tau = Some(threshold(&state.buffer, config.quantile)?);
        }

        let tests: Vec<&[LabeledSample]> =
            stream.tasks[..=t].iter().map(|x| x.test.as_slice()).collect();
        let (row, usage) = evaluate(&state.head, &state.pool, config.top_k, &tests)?;
        accuracy.push_row(row)?;
        if t + 1 == n_tasks {
            val_usage = usage;
        }
        if config.probe_auc && t + 1 < n_tasks {
            probes.push(auc_probe(&state.summary, &state.pool, stream, t)?);
        }
        task_seconds.push(clock.seconds());
    }
    train_usage.resize(state.pool.len(), 0);

    Ok(RunResult {
        config: config.clone(),
        accuracy,
        taus,
        train_usage,
        val_usage,
        probes,
        gate_log,
        task_seconds,
        state,
    })
}
