//! Binary run dump: `"CLRD1"` followed by tagged sections, each a 4-byte
//! ASCII tag, a `u64` payload length and the payload. All integers and
//! floats are little-endian; matrices are row-major `f64`.
//!
//! | tag    | payload |
//! |--------|---------|
//! | `CONF` | canonical run configuration, UTF-8 `key = value` lines |
//! | `STAT` | `u32 d, u32 classes, u64 n_bg, mean_bg, cov_bg`, then per class `u32 id, u64 n, f64 md_hat, mean, cov` |
//! | `PREC` | `u8 present` then `f64 eps, u64 source_count, precision` |
//! | `SCOR` | `f64 tau` (NaN if unset), `u32 tasks`, per task `u32 task, u64 offered, u64 kept, kept f64` |
//! | `POOL` | `u32 experts, u32 prompt_len, u32 d`, per expert `u32 id, u32 birth, key, params` |
//! | `HEAD` | `u32 classes, u32 d, class ids u32, weights, bias` |
//! | `OPTM` | `f64 lr, u64 epochs, u64 batch, f64 key_weight, u8 freeze_keys` |
//! | `ACCM` | `u32 T`, then the lower triangle row by row |
//! | `USAG` | `u32 n`, `n u64` train counts, `n u64` inference counts |
//! | `AUCP` | `u32 n`, per probe `u32 boundary, f64 rmd, f64 key, f64 centroids` |

use crate::error::{Error, Result};
use crate::runner::{RunConfig, RunResult};
use crate::stats::{Epsilon, RunningStats};

pub const DUMP_MAGIC: &[u8; 5] = b"CLRD1";

#[derive(Default)]
struct Section(Vec<u8>);

impl Section {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn stats(&mut self, s: &RunningStats) {
        self.u64(s.count());
        self.f64s(s.mean());
        self.f64s(s.cov().as_slice());
    }
}

/// Stable text form of a run configuration, used for the `CONF` section and
/// for run identifiers.
pub fn canonical_config(c: &RunConfig) -> String {
    let opt = |v: Option<usize>| v.map_or_else(|| "auto".to_string(), |x| x.to_string());
    let eps = match c.epsilon {
        Epsilon::Auto => "auto".to_string(),
        Epsilon::Fixed(e) => format!("{e:e}"),
    };
    format!(
        "policy = {}\npool_size = {}\nprompt_length = {}\ntop_k = {}\nprompts_per_task = {}\n\
         quantile = {}\nepsilon = {}\nscore_cap = {}\nlearning_rate = {}\nepochs = {}\n\
         batch_size = {}\nkey_match_weight = {}\nfreeze_keys = {}\nseed = {}\nprobe_auc = {}\n",
        c.policy,
        opt(c.pool_size),
        c.prompt_len,
        c.top_k,
        c.prompts_per_task,
        c.quantile,
        eps,
        c.score_cap.map_or_else(|| "none".to_string(), |x| x.to_string()),
        c.train.learning_rate,
        c.train.epochs,
        c.train.batch_size,
        c.train.key_match_weight,
        c.train.freeze_keys,
        c.seed,
        c.probe_auc,
    )
}

pub fn encode_run_dump(r: &RunResult) -> Vec<u8> {
    let mut sections: Vec<(&[u8; 4], Section)> = Vec::new();
    let st = &r.state;

    let mut s = Section::default();
    s.0.extend(canonical_config(&r.config).as_bytes());
    sections.push((b"CONF", s));

    let mut s = Section::default();
    s.u32(st.summary.dim());
    s.u32(st.summary.per_class.len());
    s.stats(&st.summary.global);
    for cs in st.summary.per_class.values() {
        s.u32(cs.class_id as usize);
        s.u64(cs.count());
        s.f64(cs.md_hat);
        s.f64s(cs.mean());
        s.f64s(cs.stats.cov().as_slice());
    }
    sections.push((b"STAT", s));

    let mut s = Section::default();
    match &st.summary.precision {
        Some(p) => {
            s.u8(1);
            s.f64(p.epsilon_used);
            s.u64(p.source_count);
            s.f64s(p.precision.as_slice());
        }
        None => s.u8(0),
    }
    sections.push((b"PREC", s));

    let mut s = Section::default();
    s.f64(st.tau.unwrap_or(f64::NAN));
    s.u32(st.buffer.tasks().len());
    for ts in st.buffer.tasks() {
        s.u32(ts.task as usize);
        s.u64(ts.offered);
        s.u64(ts.scores.len() as u64);
        s.f64s(&ts.scores);
    }
    sections.push((b"SCOR", s));

    let mut s = Section::default();
    s.u32(st.pool.len());
    s.u32(st.pool.prompt_len());
    s.u32(st.pool.dim());
    for e in st.pool.experts() {
        s.u32(e.id);
        s.u32(e.birth_task);
        s.f64s(&e.key);
        s.f64s(e.params.as_slice());
    }
    sections.push((b"POOL", s));

    let mut s = Section::default();
    s.u32(st.head.num_classes());
    s.u32(st.head.dim());
    for &c in st.head.classes() {
        s.u32(c as usize);
    }
    s.f64s(st.head.weights());
    s.f64s(st.head.bias());
    sections.push((b"HEAD", s));

    let mut s = Section::default();
    let tc = &r.config.train;
    s.f64(tc.learning_rate);
    s.u64(tc.epochs as u64);
    s.u64(tc.batch_size as u64);
    s.f64(tc.key_match_weight);
    s.u8(u8::from(tc.freeze_keys));
    sections.push((b"OPTM", s));

    let mut s = Section::default();
    s.u32(r.accuracy.tasks());
    for row in r.accuracy.rows() {
        s.f64s(row);
    }
    sections.push((b"ACCM", s));

    let mut s = Section::default();
    s.u32(r.train_usage.len());
    for &c in r.train_usage.iter().chain(&r.val_usage) {
        s.u64(c);
    }
    sections.push((b"USAG", s));

    let mut s = Section::default();
    s.u32(r.probes.len());
    for p in &r.probes {
        s.u32(p.boundary);
        s.f64(p.rmd);
        s.f64(p.learnable_key);
        s.f64(p.task_centroids);
    }
    sections.push((b"AUCP", s));

    let mut out = DUMP_MAGIC.to_vec();
    for (tag, body) in sections {
        out.extend_from_slice(tag);
        out.extend((body.0.len() as u64).to_le_bytes());
        out.extend(body.0);
    }
    out
}

/// Splits a dump into `(tag, payload)` pairs.
pub fn read_sections(bytes: &[u8]) -> Result<Vec<([u8; 4], &[u8])>> {
    if bytes.len() < DUMP_MAGIC.len() || &bytes[..DUMP_MAGIC.len()] != DUMP_MAGIC {
        return Err(Error::Config("not a run dump".into()));
    }
    let mut pos = DUMP_MAGIC.len();
    let mut out = Vec::new();
    while pos < bytes.len() {
        if bytes.len() - pos < 12 {
            return Err(Error::Truncated {
                expected: (pos + 12) as u64,
                actual: bytes.len() as u64,
            });
        }
        let tag: [u8; 4] = bytes[pos..pos + 4].try_into().unwrap();
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().unwrap()) as usize;
        pos += 12;
        let end = pos.checked_add(len).filter(|&e| e <= bytes.len()).ok_or(Error::Truncated {
            expected: (pos + len) as u64,
            actual: bytes.len() as u64,
        })?;
        out.push((tag, &bytes[pos..end]));
        pos = end;
    }
    Ok(out)
}
