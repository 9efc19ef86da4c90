//! The growing prompt pool: orthogonal expert creation, cosine key queries
//! and mask-conditioned top-K routing.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::gate::MaskDecision;
use crate::linalg::{dot, norm, Matrix};

/// Scale of randomly initialized prompt rows.
pub const PROMPT_INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptExpert {
    pub id: usize,
    pub key: Vec<f64>,
    /// `prompt_len x d` block.
    pub params: Matrix,
    pub birth_task: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    dim: usize,
    prompt_len: usize,
    experts: Vec<PromptExpert>,
    growth_log: Vec<(usize, Vec<usize>)>,
}

/// Which experts a sample may be routed to during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Route {
    /// Gate decision: bit 0 restricts to older experts, bit 1 to the new ones.
    Masked(MaskDecision),
    /// Whole pool.
    Global,
    /// Only experts born at the current task.
    TaskSpecific,
}

impl PromptPool {
    pub fn new(dim: usize, prompt_len: usize) -> Self {
        Self {
            dim,
            prompt_len,
            experts: Vec::new(),
            growth_log: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn experts(&self) -> &[PromptExpert] {
        &self.experts
    }

    pub fn expert(&self, id: usize) -> Result<&PromptExpert> {
        self.experts.get(id).ok_or(Error::UnknownExpert(id))
    }

    pub fn expert_mut(&mut self, id: usize) -> Result<&mut PromptExpert> {
        self.experts.get_mut(id).ok_or(Error::UnknownExpert(id))
    }

    pub fn growth_log(&self) -> &[(usize, Vec<usize>)] {
        &self.growth_log
    }

    pub fn all_ids(&self) -> Vec<usize> {
        (0..self.experts.len()).collect()
    }

    /// Appends `k_new` experts whose keys are unit-norm and orthogonal to
    /// every existing key and to each other. Returns the new ids.
    pub fn grow<R: Rng + ?Sized>(
        &mut self,
        k_new: usize,
        task: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if k_new == 0 {
            return Err(Error::Config("prompts per task must be >= 1".into()));
        }
        if let Some(last) = self.experts.last() {
            if task < last.birth_task {
                return Err(Error::Config(format!(
                    "cannot grow for task {task} after task {}",
                    last.birth_task
                )));
            }
        }
        let d = self.dim;
        if self.experts.len() + k_new > d {
            return Err(Error::OrthogonalExhausted {
                requested: k_new,
                existing: self.experts.len(),
                dim: d,
            });
        }

        let mut key_basis = orthonormal_basis(self.experts.iter().map(|e| e.key.as_slice()), d);
        let mut keys = Vec::with_capacity(k_new);
        for _ in 0..k_new {
            let k = orthogonal_unit(&key_basis, d, rng).ok_or(Error::OrthogonalExhausted {
                requested: k_new,
                existing: self.experts.len(),
                dim: d,
            })?;
            key_basis.push(k.clone());
            keys.push(k);
        }

        let existing_rows = self.experts.len() * self.prompt_len;
        let orthogonal_rows = existing_rows + k_new * self.prompt_len <= d;
        let mut row_basis = if orthogonal_rows {
            orthonormal_basis(
                self.experts
                    .iter()
                    .flat_map(|e| (0..self.prompt_len).map(move |r| e.params.row(r))),
                d,
            )
        } else {
            Vec::new()
        };
        let row_norm = PROMPT_INIT_SCALE * (d as f64).sqrt();

        let mut ids = Vec::with_capacity(k_new);
        for key in keys {
            let mut params = Matrix::zeros(self.prompt_len, d);
            for r in 0..self.prompt_len {
                let row = params.row_mut(r);
                match orthogonal_rows.then(|| orthogonal_unit(&row_basis, d, rng)).flatten() {
                    Some(u) => {
                        for (o, v) in row.iter_mut().zip(&u) {
                            *o = v * row_norm;
                        }
                        row_basis.push(u);
                    }
                    None => {
                        for o in row.iter_mut() {
                            *o = PROMPT_INIT_SCALE * rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                }
            }
            let id = self.experts.len();
            self.experts.push(PromptExpert {
                id,
                key,
                params,
                birth_task: task,
            });
            ids.push(id);
        }
        self.growth_log.push((task, ids.clone()));
        Ok(ids)
    }

    /// Largest |cosine| between any two keys in the pool.
    pub fn max_key_coherence(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.experts.iter().enumerate() {
            for b in &self.experts[i + 1..] {
                let c = dot(&a.key, &b.key) / (norm(&a.key) * norm(&b.key));
                worst = worst.max(c.abs());
            }
        }
        worst
    }
}

/// Modified Gram-Schmidt over `vectors`, dropping numerically dependent ones.
fn orthonormal_basis<'a>(vectors: impl Iterator<Item = &'a [f64]>, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        if basis.len() == d {
            break;
        }
        let mut u = v.to_vec();
        let n0 = norm(&u);
        if n0 == 0.0 {
            continue;
        }
        project_out(&mut u, &basis);
        project_out(&mut u, &basis);
        let n = norm(&u);
        if n > 1e-10 * n0 {
            u.iter_mut().for_each(|x| *x /= n);
            basis.push(u);
        }
    }
    basis
}

fn project_out(u: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(u, b);
        for (x, y) in u.iter_mut().zip(b) {
            *x -= c * y;
        }
    }
}

/// A random unit vector orthogonal to the (orthonormal) `basis`.
fn orthogonal_unit<R: Rng + ?Sized>(basis: &[Vec<f64>], d: usize, rng: &mut R) -> Option<Vec<f64>> {
    if basis.len() >= d {
        return None;
    }
    for _ in 0..16 {
        let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n0 = norm(&u);
        project_out(&mut u, basis);
        project_out(&mut u, basis);
        let n = norm(&u);
        if n > 1e-6 * n0 {
            u.iter_mut().for_each(|x| *x /= n);
            return Some(u);
        }
    }
    None
}

/// Cosine similarity between an input embedding and a key.
pub fn query_score(z: &[f64], key: &[f64]) -> Result<f64> {
    check_dim(z.len(), key.len())?;
    let nz = norm(z);
    let nk = norm(key);
    if nz == 0.0 || nk == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(z, key) / (nz * nk)).clamp(-1.0, 1.0))
}

/// Expert ids a training sample may be routed to.
pub fn candidate_set(pool: &PromptPool, route: Route, current_task: usize) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::Empty("prompt pool"));
    }
    let pick = |f: &dyn Fn(usize) -> bool| -> Vec<usize> {
        pool.experts
            .iter()
            .filter(|e| f(e.birth_task))
            .map(|e| e.id)
            .collect()
    };
    let ids = match route {
        Route::Global => pool.all_ids(),
        Route::TaskSpecific => pick(&|b| b == current_task),
        Route::Masked(m) if m.bit == 0 => {
            let ids = pick(&|b| b < current_task);
            if ids.is_empty() {
                return Err(Error::NoPriorExperts(current_task));
            }
            ids
        }
        Route::Masked(_) => pick(&|b| b == current_task),
    };
    if ids.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    Ok(ids)
}

/// Top-K candidates by cosine score, descending, ties to the lower id.
pub fn select_top_k(
    z: &[f64],
    pool: &PromptPool,
    candidates: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    if k == 0 {
        return Err(Error::Config("top-K needs K >= 1".into()));
    }
    let mut scored = candidates
        .iter()
        .map(|&id| Ok((id, query_score(z, &pool.expert(id)?.key)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored.into_iter().map(|(id, _)| id).collect())
}
