//! Synthetic attribute world, dialogue recipes and benchmark emission.

mod benchmark;
mod corpora;
mod recipes;
pub mod resolve;
mod world;

pub use benchmark::{
    emit_benchmark, gallery_record, generate_samples, integrity, read_benchmark, subset_for,
    write_benchmark, Benchmark, BenchmarkConfig, GalleryRecord, IntegrityStats, BENCHMARK_SCHEMA,
};
pub use corpora::{
    caption_query, make_instruction_pools, make_stage1_corpus, training_caption,
    InstructionPoolSizes, InstructionPools, MixtureWeights, Stage1CorpusConfig,
};
pub use recipes::{
    describe, make_chitchat, make_edit, make_mdc_i, make_mdc_t, make_qa, make_text_dialogue,
    merge_contexts, top_neighbors, DialogueSample, Provenance, Subtask, ALIAS_PROB,
};
pub use world::{feature_cosine, Attr, SynthImage, World, WorldSpec, TEMPLATE_WORDS};

use thiserror::Error;

use crate::model::{FeatureStore, Model, ModelError};
use crate::sequence::{ImageId, SequenceError};
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("world spec: {0}")]
    Spec(String),
    #[error("size: {0}")]
    Size(String),
    #[error("recipe: {0}")]
    Recipe(String),
    #[error("no usable neighbour for image {0}")]
    NoNeighbor(ImageId),
    #[error("dialogues share no common image")]
    NoCommonImage,
    #[error("context does not single out image {0}")]
    NotUnique(ImageId),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl World {
    /// Runs every image through the model's frozen encoder.
    pub fn feature_store<R: Real>(&self, model: &Model<R>) -> Result<FeatureStore, WorldError> {
        let mut store = FeatureStore::new();
        for img in &self.images {
            store.insert(img.id, model.encode_image(&img.raw)?);
        }
        Ok(store.freeze())
    }
}
