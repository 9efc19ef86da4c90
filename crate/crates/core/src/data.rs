//! Task streams: synthetic Gaussian class streams with controllable overlap,
//! and the `CLEB1` binary embedding format for precomputed features.
//!
//! Embedding file layout, little-endian throughout:
//!
//! ```text
//! "CLEB1" | u32 d | u64 n | u8 has_task_ids
//! n*d f32 features (row-major) | n u32 labels | [n u16 task ids]
//! ```
//!
//! Without embedded task ids, a sidecar `<file>.split` lists one task per
//! line as comma-separated class ids.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    /// Distinct labels of the task, ascending.
    pub classes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub dim: usize,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Empty("task stream"));
        }
        for task in &self.tasks {
            if task.train.is_empty() {
                return Err(Error::Empty("task training split"));
            }
            for s in task.train.iter().chain(&task.test) {
                check_dim(self.dim, s.features.len())?;
                if task.classes.binary_search(&s.label).is_err() {
                    return Err(Error::UnknownClass(s.label));
                }
                if s.features.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("features"));
                }
            }
        }
        Ok(())
    }

    /// Keeps `fraction` of every task's training split, drawn uniformly
    /// without replacement (at least one sample per task).
    pub fn subsample_train(&self, fraction: f64, seed: u64) -> Result<TaskStream> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data fraction {fraction} outside (0, 1]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD47A_F4AC);
        let tasks = self
            .tasks
            .iter()
            .map(|t| {
                let keep = ((t.train.len() as f64 * fraction).round() as usize).max(1);
                let mut idx: Vec<usize> = (0..t.train.len()).collect();
                idx.shuffle(&mut rng);
                idx.truncate(keep);
                idx.sort_unstable();
                let train: Vec<LabeledSample> = idx.iter().map(|&i| t.train[i].clone()).collect();
                Task {
                    classes: t.classes.clone(),
                    test: t.test.clone(),
                    train,
                }
            })
            .collect();
        Ok(TaskStream {
            dim: self.dim,
            tasks,
        })
    }

    /// Stable byte encoding, used for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend((self.dim as u64).to_le_bytes());
        for t in &self.tasks {
            out.extend((t.classes.len() as u64).to_le_bytes());
            for c in &t.classes {
                out.extend(c.to_le_bytes());
            }
            for split in [&t.train, &t.test] {
                out.extend((split.len() as u64).to_le_bytes());
                for s in split {
                    out.extend(s.label.to_le_bytes());
                    for v in &s.features {
                        out.extend(v.to_le_bytes());
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStreamConfig {
    pub tasks: usize,
    pub dim: usize,
    pub classes_per_task: usize,
    /// Fraction of each later task's classes drawn from already seen ones.
    pub overlap_fraction: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Radius of the class-mean sphere, in units of `noise_scale`.
    pub mean_separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
    /// `(task, source)` pairs: `task` replays the class set of `source`.
    pub repeats: Vec<(usize, usize)>,
}

impl Default for SyntheticStreamConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            dim: 32,
            classes_per_task: 5,
            overlap_fraction: 0.0,
            train_per_class: 50,
            test_per_class: 20,
            mean_separation: 4.0,
            noise_scale: 1.0,
            seed: 0,
            repeats: Vec::new(),
        }
    }
}

impl SyntheticStreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.tasks == 0 || self.dim == 0 || self.classes_per_task == 0 {
            return bad("tasks, dim and classes_per_task must be >= 1");
        }
        if self.train_per_class == 0 {
            return bad("train_per_class must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return bad("overlap_fraction must lie in [0, 1]");
        }
        if self.noise_scale.is_nan() || self.noise_scale <= 0.0 || self.mean_separation.is_nan() || self.mean_separation < 0.0 {
            return bad("noise_scale must be > 0 and mean_separation >= 0");
        }
        let total = (self.tasks as u128) * (self.classes_per_task as u128);
        if total > u32::MAX as u128 {
            return Err(Error::Config(format!(
                "{total} class labels exceed the 32-bit label space"
            )));
        }
        for &(t, s) in &self.repeats {
            if s >= t || t >= self.tasks {
                return Err(Error::Config(format!(
                    "repeat {t}:{s} must replay an earlier task inside the stream"
                )));
            }
        }
        Ok(())
    }
}

/// Builds a stream of isotropic Gaussian classes. Each class has one fixed
/// generator; classes recurring in later tasks draw from the same one.
pub fn generate_stream(config: &SyntheticStreamConfig) -> Result<TaskStream> {
    config.validate()?;
    let d = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let radius = config.mean_separation * config.noise_scale;
    let mut means: Vec<Vec<f64>> = Vec::new();
    let mut class_sets: Vec<Vec<u32>> = Vec::with_capacity(config.tasks);
    let repeats: BTreeMap<usize, usize> = config.repeats.iter().copied().collect();

    let new_class = |rng: &mut ChaCha8Rng, means: &mut Vec<Vec<f64>>| -> u32 {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v *= radius / n);
        means.push(dir);
        (means.len() - 1) as u32
    };

    let mut tasks = Vec::with_capacity(config.tasks);
    for t in 0..config.tasks {
        let classes: Vec<u32> = if let Some(&src) = repeats.get(&t) {
            class_sets[src].clone()
        } else {
            let seen: Vec<u32> = (0..means.len() as u32).collect();
            let want = if t == 0 {
                0
            } else {
                (config.overlap_fraction * config.classes_per_task as f64).round() as usize
            };
            let n_old = want.min(seen.len());
            let mut picked: Vec<u32> = seen.choose_multiple(&mut rng, n_old).copied().collect();
            while picked.len() < config.classes_per_task {
                picked.push(new_class(&mut rng, &mut means));
            }
            picked.sort_unstable();
            picked
        };

        let draw = |rng: &mut ChaCha8Rng, c: u32, n: usize| -> Vec<LabeledSample> {
            (0..n)
                .map(|_| LabeledSample {
                    features: means[c as usize]
                        .iter()
                        .map(|m| m + config.noise_scale * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                    label: c,
                })
                .collect()
        };
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            train.extend(draw(&mut rng, c, config.train_per_class));
            test.extend(draw(&mut rng, c, config.test_per_class));
        }
        train.shuffle(&mut rng);
        class_sets.push(classes.clone());
        tasks.push(Task {
            train,
            test,
            classes,
        });
    }
    Ok(TaskStream { dim: d, tasks })
}

/// Raw contents of a `CLEB1` embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: u32,
    /// Row-major `n x dim`.
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub task_ids: Option<Vec<u16>>,
}

pub const EMBEDDING_MAGIC: &[u8; 5] = b"CLEB1";
const HEADER_LEN: u64 = 5 + 4 + 8 + 1;

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.features[i * d..(i + 1) * d]
    }

    /// Flattens a stream, train split then test split per task, with task ids.
    pub fn from_stream(stream: &TaskStream) -> Result<Self> {
        let mut rows = Vec::new();
        for (t, task) in stream.tasks.iter().enumerate() {
            let tid = u16::try_from(t)
                .map_err(|_| Error::Config("more than 65536 tasks".into()))?;
            for s in task.train.iter().chain(&task.test) {
                rows.push((s.features.as_slice(), s.label, Some(tid)));
            }
        }
        Self::from_rows(stream.dim, &rows)
    }

    /// `rows`: (features, label, task id); task ids must be all present or all absent.
    pub fn from_rows(dim: usize, rows: &[(&[f64], u32, Option<u16>)]) -> Result<Self> {
        let dim32 = u32::try_from(dim).map_err(|_| Error::Config("dimension too large".into()))?;
        let with_tasks = rows.first().is_some_and(|r| r.2.is_some());
        let mut features = Vec::with_capacity(rows.len() * dim);
        let mut labels = Vec::with_capacity(rows.len());
        let mut task_ids = with_tasks.then(Vec::new);
        for (f, label, tid) in rows {
            check_dim(dim, f.len())?;
            features.extend(f.iter().map(|&v| v as f32));
            labels.push(*label);
            match (&mut task_ids, tid) {
                (Some(ids), Some(t)) => ids.push(*t),
                (None, None) => {}
                _ => return Err(Error::Config("task ids must be given for all rows or none".into())),
            }
        }
        Ok(Self {
            dim: dim32,
            features,
            labels,
            task_ids,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.labels.len();
        let mut out = Vec::with_capacity(HEADER_LEN as usize + n * (self.dim as usize * 4 + 6));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend(self.dim.to_le_bytes());
        out.extend((n as u64).to_le_bytes());
        out.push(u8::from(self.task_ids.is_some()));
        for v in &self.features {
            out.extend(v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend(l.to_le_bytes());
        }
        if let Some(ids) = &self.task_ids {
            for t in ids {
                out.extend(t.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..5] != EMBEDDING_MAGIC {
            return Err(Error::BadMagic);
        }
        if (bytes.len() as u64) < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len() as u64,
            });
        }
        let dim = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        let n = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
        let flag = bytes[17];
        if dim == 0 {
            return Err(Error::ZeroSize("dimension"));
        }
        if n == 0 {
            return Err(Error::ZeroSize("sample count"));
        }
        if flag > 1 {
            return Err(Error::Config(format!("has_task_ids flag must be 0 or 1, got {flag}")));
        }
        let per_row = dim as u64 * 4 + 4 + if flag == 1 { 2 } else { 0 };
        let expected = n
            .checked_mul(per_row)
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or(Error::Config("embedding header sizes overflow".into()))?;
        let actual = bytes.len() as u64;
        if actual != expected {
            return Err(Error::Truncated { expected, actual });
        }
        let n = n as usize;
        let d = dim as usize;
        let mut pos = HEADER_LEN as usize;
        let mut take = |len: usize| {
            let s = &bytes[pos..pos + len];
            pos += len;
            s
        };
        let features = take(n * d * 4)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = take(n * 4)
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let task_ids = (flag == 1).then(|| {
            take(n * 2)
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect()
        });
        Ok(Self {
            dim,
            features,
            labels,
            task_ids,
        })
    }
}

pub fn store_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, set.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_embedding_set(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingSet::decode(&bytes)
}

/// Sidecar path holding the class split for files without task ids.
pub fn split_manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".split");
    PathBuf::from(s)
}

/// Parses a split manifest: one task per line, comma-separated class ids.
/// Blank lines and `#` comments are ignored.
pub fn parse_split_manifest(text: &str) -> Result<Vec<Vec<u32>>> {
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let classes = line
            .split(',')
            .map(|c| {
                c.trim().parse::<u32>().map_err(|e| Error::SplitManifest {
                    line: i + 1,
                    msg: format!("{c:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        tasks.push(classes);
    }
    if tasks.is_empty() {
        return Err(Error::SplitManifest {
            line: 0,
            msg: "no tasks listed".into(),
        });
    }
    Ok(tasks)
}

/// Every `TEST_EVERY`-th sample of a task (in file order) is held out.
pub const TEST_EVERY: usize = 5;

/// Groups an embedding set into tasks. With `split` given (class ids per
/// task), samples go to the task listing their label; otherwise the embedded
/// task ids are used.
pub fn stream_from_embeddings(set: &EmbeddingSet, split: Option<&[Vec<u32>]>) -> Result<TaskStream> {
    if set.is_empty() {
        return Err(Error::ZeroSize("sample count"));
    }
    let mut grouped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    match (split, &set.task_ids) {
        (Some(split), _) => {
            let mut owner = BTreeMap::new();
            for (t, classes) in split.iter().enumerate() {
                for &c in classes {
                    if owner.insert(c, t).is_some() {
                        return Err(Error::SplitManifest {
                            line: t + 1,
                            msg: format!("class {c} assigned to more than one task"),
                        });
                    }
                }
            }
            for (i, l) in set.labels.iter().enumerate() {
                let &t = owner.get(l).ok_or(Error::UnknownClass(*l))?;
                grouped.entry(t).or_default().push(i);
            }
        }
        (None, Some(ids)) => {
            for (i, &t) in ids.iter().enumerate() {
                grouped.entry(t as usize).or_default().push(i);
            }
        }
        (None, None) => {
            return Err(Error::Config(
                "embedding file has no task ids and no split manifest".into(),
            ))
        }
    }

    let to_sample = |i: usize| LabeledSample {
        features: set.row(i).iter().map(|&v| v as f64).collect(),
        label: set.labels[i],
    };
    let tasks = grouped
        .into_values()
        .map(|idx| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (k, &i) in idx.iter().enumerate() {
                if k % TEST_EVERY == TEST_EVERY - 1 {
                    test.push(to_sample(i));
                } else {
                    train.push(to_sample(i));
                }
            }
            let classes: BTreeSet<u32> = idx.iter().map(|&i| set.labels[i]).collect();
            Task {
                train,
                test,
                classes: classes.into_iter().collect(),
            }
        })
        .collect();
    Ok(TaskStream {
        dim: set.dim as usize,
        tasks,
    })
}

/// Reads a `CLEB1` file and groups it into a task stream, consulting the
/// `.split` sidecar when the file carries no task ids.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<TaskStream> {
    let path = path.as_ref();
    let set = read_embedding_set(path)?;
    let split = if set.task_ids.is_none() {
        let side = split_manifest_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        Some(parse_split_manifest(&text)?)
    } else {
        None
    };
    stream_from_embeddings(&set, split.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjoint_without_overlap() {
        let cfg = SyntheticStreamConfig {
            tasks: 2,
            dim: 4,
            classes_per_task: 3,
            train_per_class: 2,
            test_per_class: 1,
            ..Default::default()
        };
        let s = generate_stream(&cfg).unwrap();
        assert!(s.tasks[0].classes.iter().all(|c| !s.tasks[1].classes.contains(c)));
        assert_eq!(s.tasks[0].train.len(), 6);
        assert_eq!(s.tasks[1].test.len(), 3);
        s.validate().unwrap();
    }

    #[test]
    fn full_overlap_reuses_classes() {
        let cfg = SyntheticStreamConfig {
            tasks: 2,
            dim: 4,
            classes_per_task: 3,
            overlap_fraction: 1.0,
            ..Default::default()
        };
        let s = generate_stream(&cfg).unwrap();
        assert_eq!(s.tasks[0].classes, s.tasks[1].classes);
    }

    #[test]
    fn repeats_replay_class_sets() {
        let cfg = SyntheticStreamConfig {
            tasks: 3,
            dim: 4,
            classes_per_task: 2,
            repeats: vec![(2, 1)],
            ..Default::default()
        };
        let s = generate_stream(&cfg).unwrap();
        assert_eq!(s.tasks[2].classes, s.tasks[1].classes);
        assert_ne!(s.tasks[0].classes, s.tasks[1].classes);
        let bad = SyntheticStreamConfig {
            repeats: vec![(1, 1)],
            ..cfg
        };
        assert!(generate_stream(&bad).is_err());
    }

    #[test]
    fn label_space_guard() {
        let cfg = SyntheticStreamConfig {
            tasks: 1 << 20,
            classes_per_task: 1 << 13,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn minimal_file_loads() {
        let set = EmbeddingSet::from_rows(2, &[(&[0.5, -1.0], 3, Some(0))]).unwrap();
        let bytes = set.encode();
        assert_eq!(bytes.len(), 18 + 8 + 4 + 2);
        let back = EmbeddingSet::decode(&bytes).unwrap();
        assert_eq!(back, set);
        let s = stream_from_embeddings(&back, None).unwrap();
        assert_eq!(s.tasks.len(), 1);
        assert_eq!(s.tasks[0].train.len() + s.tasks[0].test.len(), 1);
        assert_eq!(s.tasks[0].train[0].features, vec![0.5, -1.0]);
    }

    #[test]
    fn decode_errors() {
        let set = EmbeddingSet::from_rows(2, &[(&[0.5, -1.0], 3, None)]).unwrap();
        let mut bytes = set.encode();
        bytes[4] = b'X';
        assert!(matches!(EmbeddingSet::decode(&bytes), Err(Error::BadMagic)));
        let bytes = set.encode();
        let err = EmbeddingSet::decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 30, actual: 29 }), "{err}");
        let mut zero_d = bytes.clone();
        zero_d[5..9].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(EmbeddingSet::decode(&zero_d), Err(Error::ZeroSize(_))));
        let mut zero_n = bytes;
        zero_n[9..17].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(EmbeddingSet::decode(&zero_n), Err(Error::ZeroSize(_))));
    }

    #[test]
    fn dimension_mismatch_refused() {
        let rows: [(&[f64], u32, Option<u16>); 2] = [(&[1.0, 2.0], 0, None), (&[1.0], 0, None)];
        assert!(matches!(
            EmbeddingSet::from_rows(2, &rows),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn split_manifest_groups_by_class() {
        let rows: Vec<(Vec<f64>, u32)> = (0..12).map(|i| (vec![i as f64], i % 4)).collect();
        let refs: Vec<(&[f64], u32, Option<u16>)> =
            rows.iter().map(|(f, l)| (f.as_slice(), *l, None)).collect();
        let set = EmbeddingSet::from_rows(1, &refs).unwrap();
        let split = parse_split_manifest("# two tasks\n0, 1\n2,3\n").unwrap();
        let s = stream_from_embeddings(&set, Some(&split)).unwrap();
        assert_eq!(s.tasks.len(), 2);
        assert_eq!(s.tasks[1].classes, vec![2, 3]);
        assert_eq!(s.tasks[0].train.len(), 5);
        assert_eq!(s.tasks[0].test.len(), 1);
        assert!(parse_split_manifest("0,x\n").is_err());
        assert!(stream_from_embeddings(&set, None).is_err());
    }
}
