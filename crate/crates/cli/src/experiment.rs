use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use simoe::data::{generate_stream, load_embeddings, TaskStream};
use simoe::dump::encode_run_dump;
use simoe::metrics::{caa, faa, ffm};
use simoe::runner::{average_probes, run_sequence, GateRecord, PolicyKind, RunResult};

use crate::config::{ExperimentManifest, RunSpec, StreamSource};
use crate::{CliError, ENGINE_VERSION};

/// Command-line values that replace configuration entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub data_fractions: Vec<f64>,
    pub policies: Vec<PolicyKind>,
    pub out: Option<PathBuf>,
    /// Refuse to fall back to the default seed.
    pub strict: bool,
}

impl Overrides {
    pub fn apply(&self, m: &mut ExperimentManifest) -> Result<(), CliError> {
        if !self.seeds.is_empty() {
            m.seeds = self.seeds.clone();
            m.seeds_explicit = true;
        }
        if !self.data_fractions.is_empty() {
            if let Some(f) = self.data_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
                return Err(CliError::Usage(format!("--data-fraction {f} outside (0, 1]")));
            }
            m.data_fractions = self.data_fractions.clone();
        }
        if !self.policies.is_empty() {
            m.policies = self.policies.clone();
        }
        if let Some(out) = &self.out {
            m.out = out.clone();
        }
        if self.strict && !m.seeds_explicit {
            return Err(CliError::Usage(
                "--strict needs explicit seeds: set `seeds` in the config or pass --seed".into(),
            ));
        }
        Ok(())
    }
}

fn stream_for(m: &ExperimentManifest, run: &RunSpec) -> Result<TaskStream, CliError> {
    let full = match &m.source {
        StreamSource::Synthetic(s) => {
            let mut s = s.clone();
            s.seed = m.stream_seed_for(run.config.seed);
            generate_stream(&s)?
        }
        StreamSource::Embeddings(p) => load_embeddings(p)?,
    };
    if run.fraction < 1.0 {
        Ok(full.subsample_train(run.fraction, run.config.seed)?)
    } else {
        Ok(full)
    }
}

fn execute(m: &ExperimentManifest, probe: bool) -> Result<Vec<(RunSpec, RunResult)>, CliError> {
    m.runs()
        .into_par_iter()
        .map(|mut run| {
            run.config.probe_auc = probe;
            let stream = stream_for(m, &run)?;
            let result = run_sequence(&run.config, &stream)?;
            Ok((run, result))
        })
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn header(m: &ExperimentManifest) -> String {
    format!("# simoe {ENGINE_VERSION} config {}\n", m.config_hash())
}

/// Gate decisions as CSV; score and threshold are empty on cold start.
pub fn gate_log(records: &[GateRecord]) -> String {
    let mut out = String::from("task,index,score,tau,bit\n");
    let field = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
    for r in records {
        let d = r.decision;
        let _ = writeln!(out, "{},{},{},{},{}", r.task, r.index, field(d.score), field(d.threshold), d.bit);
    }
    out
}

/// Runs every manifest entry and writes `metrics.csv` plus one
/// `runs/<hash>/` directory per run holding `run.dump` and `gate.log`.
/// Returns the metrics table.
pub fn simulate(m: &ExperimentManifest) -> Result<String, CliError> {
    let results = execute(m, false)?;
    create_dir(&m.out)?;
    let mut table = header(m);
    table += "run_id,policy,fraction,seed,metric,value\n";
    for (run, r) in &results {
        let mut metrics = vec![("faa", faa(&r.accuracy)?), ("caa", caa(&r.accuracy)?)];
        if r.accuracy.tasks() >= 2 {
            metrics.push(("ffm", ffm(&r.accuracy)?));
        }
        metrics.push(("usage_gap", r.usage_gap()?));
        for (name, value) in metrics {
            let _ = writeln!(
                table,
                "{},{},{},{},{name},{value}",
                run.run_id(),
                run.config.policy,
                run.fraction,
                run.config.seed
            );
        }
        let dir = m.out.join("runs").join(m.run_hash(run));
        create_dir(&dir)?;
        write(&dir.join("run.dump"), &encode_run_dump(r))?;
        write(&dir.join("gate.log"), gate_log(&r.gate_log).as_bytes())?;
    }
    write(&m.out.join("metrics.csv"), table.as_bytes())?;
    Ok(table)
}

/// Seen-versus-unseen AUC per task boundary and averaged, for the three
/// scorers. Writes `auc.csv` and returns it.
pub fn auc_probe(m: &ExperimentManifest) -> Result<String, CliError> {
    let results = execute(m, true)?;
    create_dir(&m.out)?;
    let mut table = header(m);
    table += "run_id,policy,fraction,seed,boundary,rmd,learnable_key,task_centroids\n";
    for (run, r) in &results {
        if r.probes.is_empty() {
            return Err(CliError::Usage(format!(
                "{}: auc-probe needs a stream with at least 2 tasks",
                run.run_id()
            )));
        }
        let prefix = format!("{},{},{},{}", run.run_id(), run.config.policy, run.fraction, run.config.seed);
        for p in &r.probes {
            let _ = writeln!(table, "{prefix},{},{},{},{}", p.boundary, p.rmd, p.learnable_key, p.task_centroids);
        }
        if let Some(a) = average_probes(&r.probes) {
            let _ = writeln!(table, "{prefix},mean,{},{},{}", a.rmd, a.learnable_key, a.task_centroids);
        }
    }
    write(&m.out.join("auc.csv"), table.as_bytes())?;
    Ok(table)
}
