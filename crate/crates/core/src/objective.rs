//! Queue-contrastive image matching and the unified text+image objective.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FeatureStore, ForwardOutput, Model, ModelError};
use crate::sequence::{ImageId, PackedSequence, Target};
use crate::tensor::{Graph, NodeId, Real, Tensor};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("enqueue of {batch} features exceeds queue capacity {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },
    #[error("feature width {got} does not match queue width {want}")]
    Width { got: usize, want: usize },
    #[error("no candidates: queue is empty and no positive was given")]
    NoCandidates,
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::tensor::TensorError> for ObjectiveError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: ImageId,
    pub f_cls: Vec<f32>,
}

/// Fixed-capacity FIFO of frozen `f_cls` vectors used as negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureQueue {
    capacity: usize,
    width: usize,
    entries: VecDeque<QueueEntry>,
    /// Total number of entries ever enqueued.
    inserted: u64,
}

impl FeatureQueue {
    pub fn new(capacity: usize, width: usize) -> Self {
        Self {
            capacity,
            width,
            entries: VecDeque::with_capacity(capacity),
            inserted: 0,
        }
    }

    /// Rebuilds a queue from a snapshot (oldest entry first).
    pub fn from_parts(
        capacity: usize,
        width: usize,
        entries: Vec<QueueEntry>,
        inserted: u64,
    ) -> Result<Self, ObjectiveError> {
        if entries.len() > capacity {
            return Err(ObjectiveError::BatchTooLarge {
                batch: entries.len(),
                capacity,
            });
        }
        if let Some(e) = entries.iter().find(|e| e.f_cls.len() != width) {
            return Err(ObjectiveError::Width {
                got: e.f_cls.len(),
                want: width,
            });
        }
        Ok(Self {
            capacity,
            width,
            entries: entries.into(),
            inserted,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn ids(&self) -> Vec<ImageId> {
        self.entries.iter().map(|e| e.id).collect()
    }

    /// Appends a batch (in order) and evicts the oldest entries beyond
    /// capacity.
    pub fn enqueue_batch(&mut self, batch: &[QueueEntry]) -> Result<(), ObjectiveError> {
        if batch.len() > self.capacity {
            return Err(ObjectiveError::BatchTooLarge {
                batch: batch.len(),
                capacity: self.capacity,
            });
        }
        if let Some(e) = batch.iter().find(|e| e.f_cls.len() != self.width) {
            return Err(ObjectiveError::Width {
                got: e.f_cls.len(),
                want: self.width,
            });
        }
        for e in batch {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(e.clone());
            self.inserted += 1;
        }
        Ok(())
    }

    /// Queue features as a `[len × width]` tensor, oldest first.
    pub fn keys<R: Real>(&self) -> Option<Tensor<R>> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self
            .entries
            .iter()
            .flat_map(|e| e.f_cls.iter().map(|&v| R::from_f64_lossy(v as f64)))
            .collect();
        Some(Tensor::new(vec![self.entries.len(), self.width], data).expect("queue shape"))
    }
}

static ZERO_NORM_EVENTS: AtomicU64 = AtomicU64::new(0);

/// How many times [`cosine`] met a zero-norm vector in this process.
pub fn zero_norm_events() -> u64 {
    ZERO_NORM_EVENTS.load(Ordering::Relaxed)
}

/// Cosine similarity; 0 (and a counter bump) when either side has zero
/// norm.
pub fn cosine(x: &[f32], y: &[f32]) -> f64 {
    let (mut xy, mut xx, mut yy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a as f64, b as f64);
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    if xx == 0.0 || yy == 0.0 {
        ZERO_NORM_EVENTS.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    xy / (xx.sqrt() * yy.sqrt())
}

/// `sim(h, f) = cos(h·M_v, f·M_Q)`.
pub fn sim<R: Real>(model: &Model<R>, h: &[f32], f_cls: &[f32]) -> f64 {
    cosine(&model.project_query(h), &model.project_key(f_cls))
}

/// Softmax of `sim/τ` over the queue similarities followed by the
/// positive's similarity (if given, it is the last entry).
pub fn image_match_prob(
    queue_sims: &[f64],
    positive_sim: Option<f64>,
    tau: f64,
) -> Result<Vec<f64>, ObjectiveError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ObjectiveError::Temperature(tau));
    }
    let mut z: Vec<f64> = queue_sims.iter().chain(positive_sim.iter()).map(|s| s / tau).collect();
    if z.is_empty() {
        return Err(ObjectiveError::NoCandidates);
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    z.iter_mut().for_each(|v| *v /= total);
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub text: f64,
    pub image: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            text: 1.0,
            image: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: NodeId,
    /// Mean masked cross-entropy, `None` when no text target is active.
    pub text: Option<NodeId>,
    /// Mean `-log P(positive)`, `None` when no image is in scope.
    pub retrieval: Option<NodeId>,
    pub n_text: usize,
    pub n_images: usize,
    /// `(id, f_cls)` of every in-scope image, in batch order; these are
    /// what the trainer enqueues after the step.
    pub positives: Vec<QueueEntry>,
}

/// Text cross-entropy over loss-active text targets plus queue-contrastive
/// matching at every in-scope image span. Candidates for each query are
/// the queue contents followed by its own positive.
pub fn unified_loss<R: Real>(
    model: &Model<R>,
    g: &mut Graph<'_, R>,
    batch: &[&PackedSequence],
    fwd: &ForwardOutput,
    queue: &FeatureQueue,
    store: &FeatureStore,
    weights: LossWeights,
) -> Result<LossOutput, ObjectiveError> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (si, s) in batch.iter().enumerate() {
        for (t, tg) in s.targets.iter().enumerate() {
            if let Some(Target::Token(tok)) = tg {
                if s.loss_mask[t] {
                    rows.push(fwd.row(si, t));
                    targets.push(*tok as usize);
                }
            }
        }
    }
    let text = if rows.is_empty() {
        None
    } else {
        let logits = model.text_logits(g, fwd.hidden, &rows)?;
        let mask = vec![true; rows.len()];
        Some(g.cross_entropy(logits, &targets, &mask)?)
    };

    let in_scope: Vec<_> = fwd.queries.iter().filter(|q| q.in_loss).collect();
    let mut positives = Vec::with_capacity(in_scope.len());
    let retrieval = if in_scope.is_empty() {
        None
    } else {
        let qrows: Vec<usize> = in_scope.iter().map(|q| q.row).collect();
        let q = model.query_embed(g, fwd.hidden, &qrows)?;
        let d_img = model.config.d_img;
        let mut pos_data = Vec::with_capacity(in_scope.len() * d_img);
        for r in &in_scope {
            let f = &store.get(r.id)?.f_cls;
            pos_data.extend(f.iter().map(|&v| R::from_f64_lossy(v as f64)));
            positives.push(QueueEntry {
                id: r.id,
                f_cls: f.clone(),
            });
        }
        let pk = model.key_embed(g, Tensor::new(vec![in_scope.len(), d_img], pos_data)?)?;
        let sp = g.row_dot(q, pk)?;
        let sims = match queue.keys::<R>() {
            Some(keys) => {
                let k = model.key_embed(g, keys)?;
                let sq = g.matmul_bt(q, k)?;
                g.concat_cols(sq, sp)?
            }
            None => sp,
        };
        let inv_tau = model.inv_temperature(g);
        let logits = g.mul_scalar(sims, inv_tau)?;
        let target = vec![queue.len(); in_scope.len()];
        let mask = vec![true; in_scope.len()];
        Some(g.cross_entropy(logits, &target, &mask)?)
    };

    let weighted = |g: &mut Graph<'_, R>, n: Option<NodeId>, w: f64| {
        n.map(|n| {
            if w == 1.0 {
                n
            } else {
                g.scale(n, R::from_f64_lossy(w))
            }
        })
    };
    let a = weighted(g, text, weights.text);
    let b = weighted(g, retrieval, weights.image);
    let total = match (a, b) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => g.constant(Tensor::scalar(R::zero())),
    };
    Ok(LossOutput {
        total,
        text,
        retrieval,
        n_text: rows.len(),
        n_images: in_scope.len(),
        positives,
    })
}
