//! Experiment configuration: flat `key = value` lines, `#` starts a comment.
//!
//! Every key may appear at most once and unknown keys are rejected. See
//! `configs/sample.cfg` for the full list with defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use simoe::data::SyntheticStreamConfig;
use simoe::dump::canonical_config;
use simoe::runner::{PolicyKind, RunConfig};
use simoe::stats::Epsilon;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum StreamSource {
    /// Seed is replaced per run; see [`ExperimentManifest::stream_seed`].
    Synthetic(SyntheticStreamConfig),
    Embeddings(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentManifest {
    pub source: StreamSource,
    /// Fixed seed for the synthetic stream; `None` ties it to the run seed.
    pub stream_seed: Option<u64>,
    /// Template for every run; policy and seed are overwritten per run.
    pub base: RunConfig,
    pub policies: Vec<PolicyKind>,
    pub data_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Whether `seeds` came from the configuration rather than the default.
    pub seeds_explicit: bool,
    pub out: PathBuf,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        Self {
            source: StreamSource::Synthetic(SyntheticStreamConfig::default()),
            stream_seed: None,
            base: RunConfig::default(),
            policies: vec![PolicyKind::AdaptiveRmd],
            data_fractions: vec![1.0],
            seeds: vec![0],
            seeds_explicit: false,
            out: PathBuf::from("out"),
        }
    }
}

/// One fully resolved entry of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub config: RunConfig,
    pub fraction: f64,
}

impl RunSpec {
    pub fn run_id(&self) -> String {
        format!("{}-f{}-s{}", self.config.policy, self.fraction, self.config.seed)
    }
}

impl ExperimentManifest {
    /// Cartesian product policy x fraction x seed, in that nesting order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &policy in &self.policies {
            for &fraction in &self.data_fractions {
                for &seed in &self.seeds {
                    let mut config = self.base.clone();
                    config.policy = policy;
                    config.seed = seed;
                    out.push(RunSpec { config, fraction });
                }
            }
        }
        out
    }

    pub fn stream_seed_for(&self, run_seed: u64) -> u64 {
        self.stream_seed.unwrap_or(run_seed)
    }

    fn source_text(&self) -> String {
        match &self.source {
            StreamSource::Synthetic(s) => format!(
                "source = synthetic\ntasks = {}\ndim = {}\nclasses_per_task = {}\n\
                 overlap_fraction = {}\ntrain_per_class = {}\ntest_per_class = {}\n\
                 mean_separation = {}\nnoise_scale = {}\nrepeats = {}\nstream_seed = {}\n",
                s.tasks,
                s.dim,
                s.classes_per_task,
                s.overlap_fraction,
                s.train_per_class,
                s.test_per_class,
                s.mean_separation,
                s.noise_scale,
                s.repeats.iter().map(|(t, s)| format!("{t}:{s}")).collect::<Vec<_>>().join(","),
                self.stream_seed.map_or_else(|| "run".to_string(), |v| v.to_string()),
            ),
            StreamSource::Embeddings(p) => format!("source = embeddings\nembeddings = {}\n", p.display()),
        }
    }

    /// Hash of everything that determines the outputs, output path excluded.
    pub fn config_hash(&self) -> String {
        let mut text = self.source_text();
        let mut base = self.base.clone();
        base.seed = 0;
        text += &canonical_config(&base);
        let _ = write!(
            text,
            "policies = {}\ndata_fractions = {}\nseeds = {}\n",
            join(&self.policies),
            join(&self.data_fractions),
            join(&self.seeds)
        );
        short_hash(&text)
    }

    /// Identifier of a single run's inputs, used as its output directory name.
    pub fn run_hash(&self, run: &RunSpec) -> String {
        let mut text = self.source_text();
        text += &canonical_config(&run.config);
        let _ = writeln!(text, "data_fraction = {}", run.fraction);
        short_hash(&text)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

const KEYS: &[&str] = &[
    "source",
    "embeddings",
    "tasks",
    "dim",
    "classes_per_task",
    "overlap_fraction",
    "train_per_class",
    "test_per_class",
    "mean_separation",
    "noise_scale",
    "repeats",
    "stream_seed",
    "policies",
    "pool_size",
    "prompt_length",
    "top_k",
    "prompts_per_task",
    "q",
    "epsilon",
    "score_cap",
    "learning_rate",
    "epochs",
    "batch_size",
    "key_match_weight",
    "freeze_keys",
    "seeds",
    "data_fractions",
    "out",
];

struct Entry {
    line: usize,
    value: String,
}

fn err(line: usize, msg: impl Into<String>) -> CliError {
    CliError::Config {
        line,
        msg: msg.into(),
    }
}

fn scalar<T: FromStr>(key: &str, e: &Entry, what: &str) -> Result<T, CliError> {
    e.value
        .parse()
        .map_err(|_| err(e.line, format!("`{key}` expects {what}, got {:?}", e.value)))
}

fn list<T: FromStr>(key: &str, e: &Entry, what: &str) -> Result<Vec<T>, CliError> {
    let items = e
        .value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| err(e.line, format!("`{key}` expects a list of {what}, got {s:?}")))
        })
        .collect::<Result<Vec<T>, _>>()?;
    if items.is_empty() {
        return Err(err(e.line, format!("`{key}` must list at least one value")));
    }
    Ok(items)
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    PolicyKind::parse(s).ok_or_else(|| {
        format!("unknown policy {s:?}; expected adaptive, global or task_specific")
    })
}

pub fn parse_policies(text: &str) -> Result<Vec<PolicyKind>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_policy)
        .collect()
}

/// Parses configuration text into a manifest with every unspecified key at
/// its default.
pub fn parse_config(text: &str) -> Result<ExperimentManifest, CliError> {
    let mut entries: BTreeMap<&str, Entry> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(err(line, format!("expected `key = value`, got {body:?}")));
        };
        let key = key.trim();
        let Some(&known) = KEYS.iter().find(|k| **k == key) else {
            return Err(err(line, format!("unknown key `{key}`")));
        };
        if let Some(prev) = entries.get(known) {
            return Err(err(line, format!("duplicate key `{key}` (first set on line {})", prev.line)));
        }
        entries.insert(
            known,
            Entry {
                line,
                value: value.trim().to_string(),
            },
        );
    }

    let mut m = ExperimentManifest::default();
    let mut synth = SyntheticStreamConfig::default();
    let get = |k: &str| entries.get(k);

    if let Some(e) = get("tasks") {
        synth.tasks = scalar("tasks", e, "a positive integer")?;
    }
    if let Some(e) = get("dim") {
        synth.dim = scalar("dim", e, "a positive integer")?;
    }
    if let Some(e) = get("classes_per_task") {
        synth.classes_per_task = scalar("classes_per_task", e, "a positive integer")?;
    }
    if let Some(e) = get("overlap_fraction") {
        synth.overlap_fraction = scalar("overlap_fraction", e, "a number in [0, 1]")?;
        if !(0.0..=1.0).contains(&synth.overlap_fraction) {
            return Err(err(e.line, "`overlap_fraction` must lie in [0, 1]"));
        }
    }
    if let Some(e) = get("train_per_class") {
        synth.train_per_class = scalar("train_per_class", e, "a positive integer")?;
    }
    if let Some(e) = get("test_per_class") {
        synth.test_per_class = scalar("test_per_class", e, "an integer")?;
    }
    if let Some(e) = get("mean_separation") {
        synth.mean_separation = scalar("mean_separation", e, "a number")?;
    }
    if let Some(e) = get("noise_scale") {
        synth.noise_scale = scalar("noise_scale", e, "a positive number")?;
    }
    if let Some(e) = get("repeats") {
        synth.repeats = e
            .value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|pair| {
                let (t, s) = pair
                    .split_once(':')
                    .ok_or_else(|| err(e.line, format!("repeat {pair:?} is not `task:source`")))?;
                let t = t.trim().parse().map_err(|_| err(e.line, format!("bad task in {pair:?}")))?;
                let s = s.trim().parse().map_err(|_| err(e.line, format!("bad source in {pair:?}")))?;
                Ok((t, s))
            })
            .collect::<Result<_, CliError>>()?;
    }
    if let Some(e) = get("stream_seed") {
        m.stream_seed = Some(scalar("stream_seed", e, "an integer")?);
    }

    let source = get("source").map_or("synthetic", |e| e.value.as_str());
    m.source = match source {
        "synthetic" => {
            if let Some(e) = get("embeddings") {
                return Err(err(e.line, "`embeddings` requires `source = embeddings`"));
            }
            synth.validate().map_err(CliError::Core)?;
            StreamSource::Synthetic(synth)
        }
        "embeddings" => {
            let e = get("embeddings").ok_or_else(|| {
                err(get("source").map_or(0, |e| e.line), "`source = embeddings` needs an `embeddings` path")
            })?;
            StreamSource::Embeddings(PathBuf::from(&e.value))
        }
        other => {
            let line = get("source").map_or(0, |e| e.line);
            return Err(err(line, format!("`source` must be synthetic or embeddings, got {other:?}")));
        }
    };

    if let Some(e) = get("policies") {
        m.policies = parse_policies(&e.value).map_err(|msg| err(e.line, msg))?;
        if m.policies.is_empty() {
            return Err(err(e.line, "`policies` must list at least one policy"));
        }
    }
    let b = &mut m.base;
    if let Some(e) = get("pool_size") {
        b.pool_size = match e.value.as_str() {
            "auto" => None,
            _ => Some(scalar("pool_size", e, "a positive integer or `auto`")?),
        };
    }
    if let Some(e) = get("prompt_length") {
        b.prompt_len = scalar("prompt_length", e, "a positive integer")?;
    }
    if let Some(e) = get("top_k") {
        b.top_k = scalar("top_k", e, "a positive integer")?;
    }
    if let Some(e) = get("prompts_per_task") {
        b.prompts_per_task = scalar("prompts_per_task", e, "a positive integer")?;
    }
    if let Some(e) = get("q") {
        b.quantile = scalar("q", e, "a number")?;
        if !(b.quantile > 0.0 && b.quantile < 1.0) {
            return Err(err(e.line, format!("q = {} outside the open interval (0, 1)", e.value)));
        }
    }
    if let Some(e) = get("epsilon") {
        b.epsilon = match e.value.as_str() {
            "auto" => Epsilon::Auto,
            _ => Epsilon::Fixed(scalar("epsilon", e, "a non-negative number or `auto`")?),
        };
    }
    if let Some(e) = get("score_cap") {
        b.score_cap = match e.value.as_str() {
            "none" => None,
            _ => Some(scalar("score_cap", e, "a positive integer or `none`")?),
        };
    }
    if let Some(e) = get("learning_rate") {
        b.train.learning_rate = scalar("learning_rate", e, "a non-negative number")?;
    }
    if let Some(e) = get("epochs") {
        b.train.epochs = scalar("epochs", e, "a positive integer")?;
    }
    if let Some(e) = get("batch_size") {
        b.train.batch_size = scalar("batch_size", e, "a positive integer")?;
    }
    if let Some(e) = get("key_match_weight") {
        b.train.key_match_weight = scalar("key_match_weight", e, "a non-negative number")?;
    }
    if let Some(e) = get("freeze_keys") {
        b.train.freeze_keys = scalar("freeze_keys", e, "true or false")?;
    }
    if let Some(e) = get("seeds") {
        m.seeds = list("seeds", e, "integers")?;
        m.seeds_explicit = true;
    }
    if let Some(e) = get("data_fractions") {
        m.data_fractions = list("data_fractions", e, "numbers")?;
        if let Some(f) = m.data_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(err(e.line, format!("data fraction {f} outside (0, 1]")));
        }
    }
    if let Some(e) = get("out") {
        m.out = PathBuf::from(&e.value);
    }
    m.base.validate()?;
    Ok(m)
}
