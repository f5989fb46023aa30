use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::runner::{caption_recall, run_chatsearch_eval, ChatEvalOptions, ContextMode};
use super::EvalError;
use crate::model::{FeatureStore, Model, ModelConfig};
use crate::sequence::ImageId;
use crate::synthworld::{Benchmark, Subtask, World};
use crate::trainer::{run_stage1, TrainConfig, TrainSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// One stage-1 run per capacity.
    QueueSize(Vec<usize>),
    /// Stage-1 runs with the decoder trainable, then frozen.
    FrozenBackbone,
    /// Full context versus final turn only, on the benchmark's mchat split.
    History,
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            Self::QueueSize(_) => "queue_size",
            Self::FrozenBackbone => "frozen_backbone",
            Self::History => "history",
        }
    }
}

/// Everything a sweep holds fixed.
pub struct SweepSetup<'a> {
    pub world: &'a World,
    pub store: &'a FeatureStore,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub train_set: &'a TrainSet,
    /// Held-out images for caption-to-image recall.
    pub gallery: &'a [ImageId],
    /// Needed by the history axis.
    pub bench: Option<&'a Benchmark>,
    /// Model evaluated by the history axis.
    pub model: Option<&'a Model<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub average: f64,
}

impl SweepPoint {
    fn new(value: impl Into<String>, [r1, r5, r10]: [f64; 3]) -> Self {
        Self {
            value: value.into(),
            r1,
            r5,
            r10,
            average: (r1 + r5 + r10) / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: String,
    /// What the recall numbers measure.
    pub metric: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn table(&self) -> String {
        let mut s = format!("{} ({})\n", self.axis, self.metric);
        let _ = writeln!(s, "{:<12} {:>7} {:>7} {:>7} {:>7}", "value", "R@1", "R@5", "R@10", "avg");
        for p in &self.points {
            let _ = writeln!(s, "{:<12} {:>7.2} {:>7.2} {:>7.2} {:>7.2}", p.value, p.r1, p.r5, p.r10, p.average);
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("axis,value,r1,r5,r10,average\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{},{},{}", self.axis, p.value, p.r1, p.r5, p.r10, p.average);
        }
        s
    }
}

fn train_and_score(setup: &SweepSetup<'_>, cfg: TrainConfig) -> Result<[f64; 3], EvalError> {
    let model = Model::new(setup.model_config.clone())?;
    let t = run_stage1(model, setup.train_set, setup.store, cfg, |_, _| Ok(()))?;
    caption_recall(&t.model, setup.world, setup.store, setup.gallery)
}

/// One full train+eval per value (eval only for the history axis), all
/// with the setup's seed.
pub fn ablation_sweep(axis: &AblationAxis, setup: &SweepSetup<'_>) -> Result<SweepReport, EvalError> {
    let mut points = Vec::new();
    let metric = match axis {
        AblationAxis::QueueSize(sizes) => {
            for &c in sizes {
                let cfg = TrainConfig {
                    queue_capacity: c,
                    ..setup.train_config.clone()
                };
                points.push(SweepPoint::new(c.to_string(), train_and_score(setup, cfg)?));
            }
            "caption-to-image recall"
        }
        AblationAxis::FrozenBackbone => {
            for frozen in [false, true] {
                let cfg = TrainConfig {
                    freeze_backbone: frozen,
                    ..setup.train_config.clone()
                };
                let name = if frozen { "frozen" } else { "trainable" };
                points.push(SweepPoint::new(name, train_and_score(setup, cfg)?));
            }
            "caption-to-image recall"
        }
        AblationAxis::History => {
            let (Some(bench), Some(model)) = (setup.bench, setup.model) else {
                return Err(EvalError::Input("history sweep needs a benchmark and a model".into()));
            };
            for (name, context) in [("full", ContextMode::Full), ("last_turn", ContextMode::LastTurn)] {
                let opts = ChatEvalOptions {
                    context,
                    ..ChatEvalOptions::default()
                };
                let r = run_chatsearch_eval(model, setup.world, bench, setup.store, &opts)?;
                let c = r
                    .cell(Subtask::Mchat)
                    .ok_or_else(|| EvalError::Input("benchmark has no mchat samples".into()))?;
                points.push(SweepPoint::new(name, [c.r1, c.r5, c.r10]));
            }
            "mchat recall"
        }
    };
    Ok(SweepReport {
        axis: axis.name().into(),
        metric: metric.into(),
        points,
    })
}
