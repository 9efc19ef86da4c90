//! Browser bindings. Every operation takes a JSON stream description and
//! returns a JSON document the static page in `www/` draws on a canvas.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use simoe::data::{generate_stream, SyntheticStreamConfig, TaskStream};
use simoe::gate::auc;
use simoe::metrics::{faa, ffm, UsageDistribution};
use simoe::runner::{run_sequence, PolicyKind, RunConfig, RunResult};
use wasm_bindgen::prelude::*;

/// Demo knobs. Missing fields take small defaults so runs finish quickly.
#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct DemoParams {
    pub tasks: usize,
    pub dim: usize,
    pub classes_per_task: usize,
    pub overlap_fraction: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub mean_separation: f64,
    pub seed: u64,
    pub q: f64,
    pub top_k: usize,
    pub epochs: usize,
    pub bins: usize,
}

impl Default for DemoParams {
    fn default() -> Self {
        Self {
            tasks: 4,
            dim: 16,
            classes_per_task: 3,
            overlap_fraction: 0.3,
            train_per_class: 40,
            test_per_class: 20,
            mean_separation: 4.0,
            seed: 0,
            q: 0.95,
            top_k: 1,
            epochs: 10,
            bins: 24,
        }
    }
}

impl DemoParams {
    fn stream(&self) -> simoe::Result<TaskStream> {
        generate_stream(&SyntheticStreamConfig {
            tasks: self.tasks,
            dim: self.dim,
            classes_per_task: self.classes_per_task,
            overlap_fraction: self.overlap_fraction,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            mean_separation: self.mean_separation,
            seed: self.seed,
            ..SyntheticStreamConfig::default()
        })
    }

    fn run(&self, policy: PolicyKind, stream: &TaskStream) -> simoe::Result<RunResult> {
        let mut c = RunConfig {
            policy,
            quantile: self.q,
            top_k: self.top_k,
            seed: self.seed,
            ..RunConfig::default()
        };
        c.train.epochs = self.epochs;
        run_sequence(&c, stream)
    }
}

#[derive(Debug, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub recurring: Vec<u32>,
    pub novel: Vec<u32>,
}

#[derive(Debug, Serialize)]
pub struct GateTask {
    pub task: usize,
    pub tau: Option<f64>,
    pub in_distribution_rate: Option<f64>,
    /// Separability of recurring-class and novel-class samples by score.
    pub auc: Option<f64>,
    pub histogram: Option<Histogram>,
}

#[derive(Debug, Serialize)]
pub struct PolicyReport {
    pub policy: String,
    pub accuracy: Vec<Vec<f64>>,
    pub faa: f64,
    pub ffm: Option<f64>,
    pub usage_gap: f64,
}

#[derive(Debug, Serialize)]
pub struct UsageReport {
    pub policy: String,
    pub birth_task: Vec<usize>,
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub usage_gap: f64,
}

fn histogram(recurring: &[f64], novel: &[f64], tau: f64, bins: usize) -> Histogram {
    let all = recurring.iter().chain(novel).chain(std::iter::once(&tau));
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let width = (hi - lo).max(1e-12);
    let count = |xs: &[f64]| {
        let mut h = vec![0u32; bins];
        for &x in xs {
            let i = (((x - lo) / width) * bins as f64) as usize;
            h[i.min(bins - 1)] += 1;
        }
        h
    };
    Histogram {
        lo,
        hi,
        recurring: count(recurring),
        novel: count(novel),
    }
}

/// Gate scores of each task's training samples under the adaptive policy,
/// split by whether the sample's class appeared in an earlier task.
pub fn gate_explorer_report(p: &DemoParams) -> simoe::Result<Vec<GateTask>> {
    let stream = p.stream()?;
    let r = p.run(PolicyKind::AdaptiveRmd, &stream)?;
    let bins = p.bins.max(1);
    let mut seen: BTreeSet<u32> = BTreeSet::new();
    let mut out = Vec::with_capacity(stream.len());
    for (t, task) in stream.tasks.iter().enumerate() {
        let (mut recurring, mut novel) = (Vec::new(), Vec::new());
        for g in r.gate_log.iter().filter(|g| g.task == t && g.decision.score.is_finite()) {
            if seen.contains(&task.train[g.index].label) {
                recurring.push(g.decision.score);
            } else {
                novel.push(g.decision.score);
            }
        }
        let tau = r.taus[t];
        out.push(GateTask {
            task: t,
            tau,
            in_distribution_rate: r.in_distribution_rate(t).filter(|_| tau.is_some()),
            auc: auc(&recurring, &novel).ok(),
            histogram: tau.map(|tau| histogram(&recurring, &novel, tau, bins)),
        });
        seen.extend(task.classes.iter().copied());
    }
    Ok(out)
}

/// Accuracy matrices and summary metrics for the three routing policies.
pub fn compare_policies_report(p: &DemoParams) -> simoe::Result<Vec<PolicyReport>> {
    let stream = p.stream()?;
    PolicyKind::ALL
        .iter()
        .map(|&policy| {
            let r = p.run(policy, &stream)?;
            Ok(PolicyReport {
                policy: policy.to_string(),
                accuracy: r.accuracy.rows().to_vec(),
                faa: faa(&r.accuracy)?,
                ffm: ffm(&r.accuracy).ok(),
                usage_gap: r.usage_gap()?,
            })
        })
        .collect()
}

/// Per-expert selection frequencies during training and on held-out data.
pub fn usage_report(p: &DemoParams) -> simoe::Result<Vec<UsageReport>> {
    let stream = p.stream()?;
    PolicyKind::ALL
        .iter()
        .map(|&policy| {
            let r = p.run(policy, &stream)?;
            Ok(UsageReport {
                policy: policy.to_string(),
                birth_task: r.state.pool.experts().iter().map(|e| e.birth_task).collect(),
                train: UsageDistribution::from_counts(&r.train_usage).proportions,
                val: UsageDistribution::from_counts(&r.val_usage).proportions,
                usage_gap: r.usage_gap()?,
            })
        })
        .collect()
}

fn respond<T: Serialize>(params: &str, op: impl Fn(&DemoParams) -> simoe::Result<T>) -> Result<String, JsError> {
    let p: DemoParams = if params.trim().is_empty() {
        DemoParams::default()
    } else {
        serde_json::from_str(params)?
    };
    let report = op(&p)?;
    Ok(serde_json::to_string(&report)?)
}

#[wasm_bindgen]
pub fn gate_explorer(params: &str) -> Result<String, JsError> {
    respond(params, gate_explorer_report)
}

#[wasm_bindgen]
pub fn compare_policies(params: &str) -> Result<String, JsError> {
    respond(params, compare_policies_report)
}

#[wasm_bindgen]
pub fn usage_distributions(params: &str) -> Result<String, JsError> {
    respond(params, usage_report)
}
