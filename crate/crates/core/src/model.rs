//! Prompt-modulated linear classifier over frozen features.
//!
//! Modulation is an additive shift: the input embedding plus the mean of all
//! prompt rows of the selected experts. The frozen backbone cannot re-run
//! attention, so this surrogate keeps what routing experiments depend on:
//! the prediction, and the gradient each expert receives, follow from which
//! experts were selected.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::pool::{candidate_set, select_top_k, PromptExpert, PromptPool, Route};

/// Shared linear head whose rows grow as classes are discovered.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    dim: usize,
    classes: Vec<u32>,
    index: BTreeMap<u32, usize>,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            classes: Vec::new(),
            index: BTreeMap::new(),
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Known classes in row order.
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn row_of(&self, class: u32) -> Result<usize> {
        self.index.get(&class).copied().ok_or(Error::UnknownClass(class))
    }

    /// Adds zero-initialized rows for classes not yet known, in ascending order.
    pub fn ensure_classes(&mut self, classes: impl IntoIterator<Item = u32>) {
        let mut fresh: Vec<u32> = classes
            .into_iter()
            .filter(|c| !self.index.contains_key(c))
            .collect();
        fresh.sort_unstable();
        fresh.dedup();
        for c in fresh {
            self.index.insert(c, self.classes.len());
            self.classes.push(c);
            self.weights.extend(std::iter::repeat_n(0.0, self.dim));
            self.bias.push(0.0);
        }
    }

    pub fn weight_row(&self, row: usize) -> &[f64] {
        &self.weights[row * self.dim..(row + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, features.len())?;
        Ok((0..self.classes.len())
            .map(|r| dot(self.weight_row(r), features) + self.bias[r])
            .collect())
    }

    /// Argmax class; equal logits resolve to the lowest class id.
    pub fn classify(&self, features: &[f64]) -> Result<u32> {
        if self.classes.is_empty() {
            return Err(Error::Empty("classifier head"));
        }
        let logits = self.logits(features)?;
        let mut best = 0;
        for r in 1..logits.len() {
            let better = logits[r] > logits[best]
                || (logits[r] == logits[best] && self.classes[r] < self.classes[best]);
            if better {
                best = r;
            }
        }
        Ok(self.classes[best])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the `1 - cos(z, key)` pull on selected keys.
    pub key_match_weight: f64,
    pub freeze_keys: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 32,
            key_match_weight: 0.5,
            freeze_keys: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.key_match_weight.is_nan() || self.key_match_weight < 0.0 {
            return Err(Error::Config("key_match_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// `z` plus the mean of every row of every selected prompt block.
pub fn modulate(z: &[f64], selected: &[&PromptExpert]) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::Empty("prompt selection"));
    }
    let mut out = z.to_vec();
    let rows: usize = selected.iter().map(|e| e.params.rows()).sum();
    let inv = 1.0 / rows as f64;
    for e in selected {
        check_dim(z.len(), e.params.cols())?;
        for r in 0..e.params.rows() {
            for (o, p) in out.iter_mut().zip(e.params.row(r)) {
                *o += p * inv;
            }
        }
    }
    Ok(out)
}

fn selected_experts<'a>(pool: &'a PromptPool, ids: &[usize]) -> Result<Vec<&'a PromptExpert>> {
    ids.iter().map(|&id| pool.expert(id)).collect()
}

/// Inference: top-K over the whole pool, modulate, classify.
pub fn predict(z: &[f64], head: &ClassifierHead, pool: &PromptPool, k: usize) -> Result<u32> {
    Ok(predict_routed(z, head, pool, k)?.0)
}

/// Like [`predict`] but also returns the selected expert ids.
pub fn predict_routed(
    z: &[f64],
    head: &ClassifierHead,
    pool: &PromptPool,
    k: usize,
) -> Result<(u32, Vec<usize>)> {
    let ids = select_top_k(z, pool, &pool.all_ids(), k)?;
    let zp = modulate(z, &selected_experts(pool, &ids)?)?;
    Ok((head.classify(&zp)?, ids))
}

/// Numerically stable `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelRange {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Gradients of the per-sample objective, sparse over experts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub params: BTreeMap<usize, Matrix>,
    pub keys: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn zeros(head: &ClassifierHead) -> Self {
        Self {
            weights: vec![0.0; head.weights.len()],
            bias: vec![0.0; head.bias.len()],
            params: BTreeMap::new(),
            keys: BTreeMap::new(),
        }
    }
}

/// Objective for one sample under a fixed expert selection:
/// cross-entropy of the modulated prediction plus
/// `key_match_weight * mean_s (1 - cos(z, key_s))`.
pub fn sample_loss(
    z: &[f64],
    label_row: usize,
    head: &ClassifierHead,
    pool: &PromptPool,
    selected: &[usize],
    key_match_weight: f64,
) -> Result<f64> {
    let experts = selected_experts(pool, selected)?;
    let zp = modulate(z, &experts)?;
    let mut loss = cross_entropy(&head.logits(&zp)?, label_row)?;
    if key_match_weight > 0.0 {
        let nz = norm(z);
        let mut pull = 0.0;
        for e in &experts {
            pull += 1.0 - dot(z, &e.key) / (nz * norm(&e.key));
        }
        loss += key_match_weight * pull / experts.len() as f64;
    }
    Ok(loss)
}

/// Analytic gradient of [`sample_loss`], accumulated into `grads` with `scale`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_gradients(
    z: &[f64],
    label_row: usize,
    head: &ClassifierHead,
    pool: &PromptPool,
    selected: &[usize],
    key_match_weight: f64,
    scale: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    let d = head.dim();
    let experts = selected_experts(pool, selected)?;
    let zp = modulate(z, &experts)?;
    let logits = head.logits(&zp)?;
    let loss_ce = cross_entropy(&logits, label_row)?;
    let mut dlogits = softmax(&logits);
    dlogits[label_row] -= 1.0;

    let mut dz = vec![0.0; d];
    for (r, &g) in dlogits.iter().enumerate() {
        let g = g * scale;
        grads.bias[r] += g;
        let w = head.weight_row(r);
        let gw = &mut grads.weights[r * d..(r + 1) * d];
        for i in 0..d {
            gw[i] += g * zp[i];
            dz[i] += g * w[i];
        }
    }

    let rows: usize = experts.iter().map(|e| e.params.rows()).sum();
    let inv = 1.0 / rows as f64;
    for e in &experts {
        let gp = grads
            .params
            .entry(e.id)
            .or_insert_with(|| Matrix::zeros(e.params.rows(), d));
        for r in 0..e.params.rows() {
            for (o, g) in gp.row_mut(r).iter_mut().zip(&dz) {
                *o += g * inv;
            }
        }
    }

    let mut loss = loss_ce;
    if key_match_weight > 0.0 {
        let nz = norm(z);
        let w = key_match_weight / experts.len() as f64;
        for e in &experts {
            let nk = norm(&e.key);
            let cos = dot(z, &e.key) / (nz * nk);
            loss += w * (1.0 - cos);
            // d(1 - cos)/dk = -(z / (|z||k|) - cos * k / |k|^2)
            let gk = grads.keys.entry(e.id).or_insert_with(|| vec![0.0; d]);
            for i in 0..d {
                gk[i] -= scale * w * (z[i] / (nz * nk) - cos * e.key[i] / (nk * nk));
            }
        }
    }
    Ok(loss)
}

/// One gradient step restricted to the experts present in `grads`.
pub fn apply_gradients(
    head: &mut ClassifierHead,
    pool: &mut PromptPool,
    grads: &Gradients,
    learning_rate: f64,
    freeze_keys: bool,
) -> Result<()> {
    for (w, g) in head.weights.iter_mut().zip(&grads.weights) {
        *w -= learning_rate * g;
    }
    for (b, g) in head.bias.iter_mut().zip(&grads.bias) {
        *b -= learning_rate * g;
    }
    for (&id, g) in &grads.params {
        let e = pool.expert_mut(id)?;
        for (p, gv) in e.params.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *p -= learning_rate * gv;
        }
    }
    if !freeze_keys {
        for (&id, g) in &grads.keys {
            let e = pool.expert_mut(id)?;
            for (k, gv) in e.key.iter_mut().zip(g) {
                *k -= learning_rate * gv;
            }
        }
    }
    Ok(())
}

/// Trains the selected experts and the head on one task.
///
/// `routes[i]` fixes the candidate set of sample `i`; top-K selection inside
/// it is re-evaluated every step. Returns how often each expert was selected.
#[allow(clippy::too_many_arguments)]
pub fn train_task<V: AsRef<[f64]>>(
    features: &[V],
    labels: &[u32],
    routes: &[Route],
    pool: &mut PromptPool,
    head: &mut ClassifierHead,
    top_k: usize,
    config: &TrainConfig,
    current_task: usize,
) -> Result<Vec<u64>> {
    if features.is_empty() {
        return Err(Error::Empty("task data"));
    }
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch(features.len(), labels.len()));
    }
    if features.len() != routes.len() {
        return Err(Error::LengthMismatch(features.len(), routes.len()));
    }
    config.validate()?;
    head.ensure_classes(labels.iter().copied());
    let label_rows = labels
        .iter()
        .map(|&c| head.row_of(c))
        .collect::<Result<Vec<_>>>()?;
    let candidates = routes
        .iter()
        .map(|&r| candidate_set(pool, r, current_task))
        .collect::<Result<Vec<_>>>()?;

    let mut usage = vec![0u64; pool.len()];
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (current_task as u64).wrapping_mul(0x9E37_79B9));
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros(head);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let z = features[i].as_ref();
                let sel = select_top_k(z, pool, &candidates[i], top_k)?;
                for &id in &sel {
                    usage[id] += 1;
                }
                accumulate_gradients(
                    z,
                    label_rows[i],
                    head,
                    pool,
                    &sel,
                    config.key_match_weight,
                    scale,
                    &mut grads,
                )?;
            }
            apply_gradients(head, pool, &grads, config.learning_rate, config.freeze_keys)?;
        }
    }
    Ok(usage)
}
