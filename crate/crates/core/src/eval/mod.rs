//! Exact gallery ranking, recall metrics, the benchmark runner and
//! ablation sweeps.

mod report;
mod runner;
mod sweep;

pub use report::{fingerprint, RecallReport, SubtaskCell};
pub use runner::{
    caption_recall, decode_queries, query_for_prompt, reply_prefix, run_chatsearch_eval, ChatEvalOptions,
    ContextMode, QueryOutcome,
};
pub use sweep::{ablation_sweep, AblationAxis, SweepPoint, SweepReport, SweepSetup};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::model::{FeatureStore, Model, ModelError};
use crate::objective::cosine;
use crate::sequence::{ImageId, SequenceError};
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("duplicate gallery id {0}")]
    DuplicateId(ImageId),
    #[error("k = {k} exceeds gallery size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("subset for query {query} does not contain its target {target}")]
    SubsetMissingTarget { query: usize, target: ImageId },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Train(#[from] crate::trainer::TrainError),
    #[error(transparent)]
    World(#[from] crate::synthworld::WorldError),
}

/// Gallery images with their projected keys `normalize(f_cls · M_Q)` for
/// one checkpoint.
#[derive(Debug, Clone)]
pub struct Gallery {
    ids: Vec<ImageId>,
    keys: Vec<Vec<f32>>,
}

impl Gallery {
    pub fn build<R: Real>(model: &Model<R>, store: &FeatureStore, ids: &[ImageId]) -> Result<Self, EvalError> {
        let mut seen = std::collections::HashSet::new();
        let mut keys = Vec::with_capacity(ids.len());
        for &id in ids {
            if !seen.insert(id) {
                return Err(EvalError::DuplicateId(id));
            }
            keys.push(model.project_key(&store.get(id)?.f_cls));
        }
        Ok(Self {
            ids: ids.to_vec(),
            keys,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ImageId] {
        &self.ids
    }

    pub fn contains(&self, id: ImageId) -> bool {
        self.ids.contains(&id)
    }

    /// Top-`k` `(id, sim)` for a decoder state, best first, ties broken by
    /// ascending id.
    pub fn rank<R: Real>(&self, model: &Model<R>, h: &[f32], k: usize) -> Result<Vec<(ImageId, f64)>, EvalError> {
        self.rank_projected(&model.project_query(h), k)
    }

    /// As [`Gallery::rank`] for an already projected query.
    pub fn rank_projected(&self, q: &[f32], k: usize) -> Result<Vec<(ImageId, f64)>, EvalError> {
        if self.ids.is_empty() {
            return Err(EvalError::EmptyGallery);
        }
        if k > self.ids.len() {
            return Err(EvalError::KTooLarge {
                k,
                size: self.ids.len(),
            });
        }
        let mut scored: Vec<(ImageId, f64)> = self
            .ids
            .iter()
            .zip(&self.keys)
            .map(|(&id, key)| (id, cosine(q, key)))
            .collect();
        scored.sort_by(order);
        scored.truncate(k);
        Ok(scored)
    }
}

/// Descending score, then ascending id.
pub fn order(a: &(ImageId, f64), b: &(ImageId, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Percentage of queries whose target is among the first `k` of its list.
/// Targets absent from a list count as misses; their query indices are
/// returned alongside.
pub fn recall_at_k(ranked: &[Vec<ImageId>], targets: &[ImageId], k: usize) -> Result<(f64, Vec<usize>), EvalError> {
    if ranked.len() != targets.len() {
        return Err(EvalError::Input(format!(
            "{} ranked lists for {} targets",
            ranked.len(),
            targets.len()
        )));
    }
    if ranked.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let mut hits = 0;
    let mut absent = Vec::new();
    for (i, (list, t)) in ranked.iter().zip(targets).enumerate() {
        match list.iter().position(|x| x == t) {
            Some(p) if p < k => hits += 1,
            Some(_) => {}
            None => absent.push(i),
        }
    }
    Ok((100.0 * hits as f64 / ranked.len() as f64, absent))
}

/// Recall within each query's six-image subset: the full ranking is
/// restricted to the subset, keeping its order.
pub fn subset_recall(
    ranked: &[Vec<ImageId>],
    targets: &[ImageId],
    subsets: &[Vec<ImageId>],
    k: usize,
) -> Result<f64, EvalError> {
    if ranked.len() != targets.len() || subsets.len() != targets.len() {
        return Err(EvalError::Input("ranked lists, targets and subsets differ in length".into()));
    }
    if ranked.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (i, ((list, t), sub)) in ranked.iter().zip(targets).zip(subsets).enumerate() {
        if !sub.contains(t) {
            return Err(EvalError::SubsetMissingTarget { query: i, target: *t });
        }
        let restricted: Vec<ImageId> = list.iter().copied().filter(|x| sub.contains(x)).collect();
        if restricted.iter().take(k).any(|x| x == t) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / ranked.len() as f64)
}

/// Ranking produced by a scorer that ignores the query: a uniformly
/// random permutation of `ids`.
pub fn random_ranking<R: Rng>(ids: &[ImageId], rng: &mut R) -> Vec<ImageId> {
    let mut v = ids.to_vec();
    v.shuffle(rng);
    v
}

/// Expected recall (percent) of the random scorer and its binomial
/// standard deviation over `n` queries.
pub fn random_baseline(k: usize, candidates: usize, n: usize) -> (f64, f64) {
    let p = (k.min(candidates) as f64) / candidates as f64;
    (100.0 * p, 100.0 * (p * (1.0 - p) / n as f64).sqrt())
}
