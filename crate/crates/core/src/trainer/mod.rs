//! Two-stage training: data sets, the step loop, divergence checks and
//! checkpoints.

mod checkpoint;
mod data;

pub use checkpoint::{load_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{
    read_instruction_corpus, read_stage1_corpus, stage1_set, stage2_set, write_instruction_corpus,
    write_stage1_corpus, InstructionCorpus, TrainSet, INSTRUCTION_FILES, STAGE1_FILE,
};

use std::path::PathBuf;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FeatureStore, Model, ModelError};
use crate::objective::{unified_loss, FeatureQueue, LossWeights, ObjectiveError, QueueEntry};
use crate::sequence::{ImageId, PackedSequence, SequenceError, Stage};
use crate::synthworld::MixtureWeights;
use crate::tensor::{lr_at_step, AdamW, AdamWConfig, Graph, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; last good checkpoint: {last_checkpoint:?}")]
    NonFinite {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("diverged at step {step}: loss {loss} stayed above {factor}x the initial {initial} for {window} steps")]
    Diverged {
        step: u64,
        loss: f64,
        initial: f64,
        factor: f64,
        window: u64,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

/// Abort rule: loss above `factor` times the first step's loss for
/// `window` consecutive steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceConfig {
    pub factor: f64,
    pub window: u64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            factor: 10.0,
            window: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub queue_capacity: usize,
    pub seed: u64,
    /// Steps between evaluations; 0 disables them.
    pub eval_every: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Stage-2 source proportions (QA : retrieval dialogues : edits).
    pub mixture: MixtureWeights,
    pub loss_weights: LossWeights,
    pub adam: AdamWConfig,
    /// Train only the heads, projectors and perceiver.
    pub freeze_backbone: bool,
    /// Residual dropout rate; 0 keeps every run bit-reproducible without
    /// extra state.
    pub dropout: f64,
    pub divergence: DivergenceConfig,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::Alignment,
            peak_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 32,
            queue_capacity: 1000,
            seed: 1,
            eval_every: 0,
            checkpoint_every: 0,
            mixture: MixtureWeights::default(),
            loss_weights: LossWeights::default(),
            adam: AdamWConfig::default(),
            freeze_backbone: false,
            dropout: 0.0,
            divergence: DivergenceConfig::default(),
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::Instruction,
            peak_lr: 5e-4,
            warmup_steps: 25,
            total_steps: 500,
            seed: 2,
            // At 500 steps the 150:10:10 default weights show a retrieval
            // dialogue too rarely for [IMG] emission to be learned.
            mixture: MixtureWeights {
                qa: 1.0,
                chatsearch: 1.0,
                edit: 0.5,
            },
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.queue_capacity < self.batch_size {
            return bad(format!(
                "queue capacity {} is smaller than batch size {}",
                self.queue_capacity, self.batch_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.divergence.factor <= 1.0 || self.divergence.window == 0 {
            return bad("divergence factor must exceed 1 and window be positive".into());
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: Stage,
    /// Steps completed, including this one.
    pub step: u64,
    pub loss: f64,
    pub text_loss: Option<f64>,
    pub retrieval_loss: Option<f64>,
    pub tau: f64,
    pub lr: f64,
    pub queue_fill: usize,
    pub n_text: usize,
    pub n_images: usize,
    pub millis: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub(crate) struct Monitor {
    pub initial: Option<f64>,
    pub over: u64,
}

/// Owns the model, optimizer, queue and sampling stream of one stage.
pub struct Trainer {
    pub model: Model<f32>,
    pub opt: AdamW<f32>,
    pub queue: FeatureQueue,
    pub config: TrainConfig,
    pub step: u64,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) monitor: Monitor,
    pub last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    /// Starts a stage on `model` with fresh optimizer state and an empty
    /// queue.
    pub fn new(mut model: Model<f32>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        model.set_backbone_trainable(!config.freeze_backbone);
        let opt = AdamW::new(config.adam, &model.params);
        let queue = FeatureQueue::new(config.queue_capacity, model.config.d_img);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            opt,
            queue,
            config,
            step: 0,
            rng,
            monitor: Monitor::default(),
            last_checkpoint: None,
        })
    }

    /// Learning rate applied by the next step.
    pub fn lr(&self) -> Result<f64, TrainError> {
        let c = &self.config;
        Ok(lr_at_step(
            (self.step + 1).min(c.total_steps),
            c.peak_lr,
            c.warmup_steps,
            c.total_steps,
        )?)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Fills the queue to capacity with features of images drawn (with
    /// replacement) from `pool`.
    pub fn warm_fill(&mut self, pool: &[ImageId], store: &FeatureStore) -> Result<(), TrainError> {
        if pool.is_empty() {
            return Ok(());
        }
        let need = self.queue.capacity() - self.queue.len();
        let mut batch = Vec::with_capacity(need);
        for _ in 0..need {
            let id = *pool.choose(&mut self.rng).expect("pool");
            batch.push(QueueEntry {
                id,
                f_cls: store.get(id)?.f_cls.clone(),
            });
        }
        self.queue.enqueue_batch(&batch)?;
        Ok(())
    }

    /// Draws one batch: a source by mixture weight, then a sequence
    /// uniformly within it.
    pub fn sample_batch<'a>(&mut self, set: &'a TrainSet) -> Result<Vec<&'a PackedSequence>, TrainError> {
        let weights: Vec<f64> = set
            .sources
            .iter()
            .map(|(w, s)| if s.is_empty() { 0.0 } else { *w })
            .collect();
        let pick = WeightedIndex::new(&weights)
            .map_err(|e| TrainError::Config(format!("training set has no usable source: {e}")))?;
        Ok((0..self.config.batch_size)
            .map(|_| {
                let src = &set.sources[pick.sample(&mut self.rng)].1;
                &src[self.rng.random_range(0..src.len())]
            })
            .collect())
    }

    /// forward → unified loss → backward → AdamW → τ clamp → enqueue.
    pub fn train_step(
        &mut self,
        batch: &[&PackedSequence],
        store: &FeatureStore,
    ) -> Result<StepMetrics, TrainError> {
        if self.is_done() {
            return Err(TrainError::Config(format!(
                "already at total_steps {}",
                self.config.total_steps
            )));
        }
        let started = Instant::now();
        let lr = self.lr()?;
        let dropout = (self.config.dropout > 0.0).then(|| (self.config.dropout, self.rng.random::<u64>()));
        let (grads, loss, text, retrieval, n_text, n_images, positives) = {
            let mut g = Graph::new(&self.model.params);
            let fwd = self.model.forward_train(&mut g, batch, store, dropout)?;
            let out = unified_loss(
                &self.model,
                &mut g,
                batch,
                &fwd,
                &self.queue,
                store,
                self.config.loss_weights,
            )?;
            let scalar = |g: &Graph<'_, f32>, n| g.value(n).item() as f64;
            let loss = scalar(&g, out.total);
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    step: self.step,
                    last_checkpoint: self.last_checkpoint.clone(),
                });
            }
            let text = out.text.map(|n| scalar(&g, n));
            let retrieval = out.retrieval.map(|n| scalar(&g, n));
            let grads = g.backward(out.total)?;
            (grads, loss, text, retrieval, out.n_text, out.n_images, out.positives)
        };
        self.model.params.zero_grad();
        self.model.params.accumulate(&grads);
        if let Err(e) = self.opt.step(&mut self.model.params, lr) {
            return Err(match e {
                TensorError::NonFiniteGrad { .. } => TrainError::NonFinite {
                    step: self.step,
                    last_checkpoint: self.last_checkpoint.clone(),
                },
                e => e.into(),
            });
        }
        self.model.clamp_temperature();
        // A batch can hold more images than the queue; keep the newest.
        let keep = positives.len().saturating_sub(self.queue.capacity());
        self.queue.enqueue_batch(&positives[keep..])?;
        self.step += 1;
        self.check_divergence(loss)?;
        Ok(StepMetrics {
            stage: self.config.stage,
            step: self.step,
            loss,
            text_loss: text,
            retrieval_loss: retrieval,
            tau: self.model.temperature(),
            lr,
            queue_fill: self.queue.len(),
            n_text,
            n_images,
            millis: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn check_divergence(&mut self, loss: f64) -> Result<(), TrainError> {
        let d = self.config.divergence;
        let initial = *self.monitor.initial.get_or_insert(loss);
        if loss > d.factor * initial {
            self.monitor.over += 1;
        } else {
            self.monitor.over = 0;
        }
        if self.monitor.over >= d.window {
            return Err(TrainError::Diverged {
                step: self.step,
                loss,
                initial,
                factor: d.factor,
                window: d.window,
            });
        }
        Ok(())
    }

    /// Runs until `total_steps`, calling `observe` after every step.
    pub fn run(
        &mut self,
        set: &TrainSet,
        store: &FeatureStore,
        mut observe: impl FnMut(&mut Trainer, &StepMetrics) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while !self.is_done() {
            let batch = self.sample_batch(set)?;
            let m = self.train_step(&batch, store)?;
            observe(self, &m)?;
        }
        Ok(())
    }
}

/// Stage-1 alignment from a fresh model: warm-fills the queue from the
/// corpus images and trains to `total_steps`.
pub fn run_stage1(
    model: Model<f32>,
    set: &TrainSet,
    store: &FeatureStore,
    config: TrainConfig,
    observe: impl FnMut(&mut Trainer, &StepMetrics) -> Result<(), TrainError>,
) -> Result<Trainer, TrainError> {
    if config.stage != Stage::Alignment {
        return Err(TrainError::Config("stage-1 run needs an alignment config".into()));
    }
    let mut t = Trainer::new(model, config)?;
    t.warm_fill(&set.images, store)?;
    t.run(set, store, observe)?;
    Ok(t)
}

/// Stage-2 instruction tuning on top of a stage-1 result. The queue is
/// rebuilt from the instruction corpus rather than carried over.
pub fn run_stage2(
    stage1: &Checkpoint,
    set: &TrainSet,
    store: &FeatureStore,
    config: TrainConfig,
    observe: impl FnMut(&mut Trainer, &StepMetrics) -> Result<(), TrainError>,
) -> Result<Trainer, TrainError> {
    let mut t = prepare_stage2(stage1, set, store, config)?;
    t.run(set, store, observe)?;
    Ok(t)
}

/// Checks the stage-2 preconditions and builds a trainer with a fresh,
/// warm-filled queue.
pub fn prepare_stage2(
    stage1: &Checkpoint,
    set: &TrainSet,
    store: &FeatureStore,
    config: TrainConfig,
) -> Result<Trainer, TrainError> {
    if config.stage != Stage::Instruction {
        return Err(TrainError::Config("stage-2 run needs an instruction config".into()));
    }
    if stage1.train.stage != Stage::Alignment {
        return Err(TrainError::Config("stage-2 must start from a stage-1 checkpoint".into()));
    }
    if config.peak_lr > stage1.train.peak_lr {
        return Err(TrainError::Config(format!(
            "stage-2 peak_lr {} exceeds stage-1 peak_lr {}",
            config.peak_lr, stage1.train.peak_lr
        )));
    }
    let mut t = Trainer::new(stage1.model()?, config)?;
    t.warm_fill(&set.images, store)?;
    Ok(t)
}
