use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::benchmark::generate_samples;
use super::recipes::{describe, make_chitchat, make_edit, make_qa, DialogueSample, Subtask};
use super::{Attr, World, WorldError};
use crate::sequence::{arrange_pair, ChatDialogue, ImageId, MultimodalDocument, PairMode, SpanRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1CorpusConfig {
    pub docs: usize,
    /// Fraction of interleaved multi-image documents; the rest are pairs.
    pub interleaved_frac: f64,
    pub max_pairs_per_doc: usize,
    pub seed: u64,
}

impl Default for Stage1CorpusConfig {
    fn default() -> Self {
        Self {
            docs: 5000,
            interleaved_frac: 0.3,
            max_pairs_per_doc: 3,
            seed: 21,
        }
    }
}

/// Caption with every attribute, aliases drawn at the usual rate.
pub fn training_caption<R: Rng>(world: &World, id: ImageId, rng: &mut R) -> String {
    let img = world.image(id);
    let vals: Vec<(Attr, usize)> = Attr::ALL.iter().map(|&a| (a, img.get(a))).collect();
    describe(world, &vals, rng)
}

/// Caption/image pairs (image first or last with a fair coin) and
/// interleaved documents (each image independently before or after its
/// caption) over `pool`.
pub fn make_stage1_corpus(
    world: &World,
    pool: &[ImageId],
    cfg: &Stage1CorpusConfig,
) -> Result<Vec<MultimodalDocument>, WorldError> {
    if pool.is_empty() {
        return Err(WorldError::Size("empty image pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = world.vocab();
    let mut docs = Vec::with_capacity(cfg.docs);
    for _ in 0..cfg.docs {
        let n = if rng.random_bool(cfg.interleaved_frac.clamp(0.0, 1.0)) {
            rng.random_range(2..=cfg.max_pairs_per_doc.max(2))
        } else {
            1
        };
        let mut doc = MultimodalDocument::new();
        for _ in 0..n {
            let id = *pool.choose(&mut rng).expect("pool");
            let cap = vocab.tokenize(&training_caption(world, id, &mut rng))?;
            let mode = if rng.random_bool(0.5) {
                PairMode::ImageFirst
            } else {
                PairMode::ImageLast
            };
            doc.extend(arrange_pair(cap, id, mode));
        }
        docs.push(doc);
    }
    Ok(docs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub qa: f64,
    pub chatsearch: f64,
    pub edit: f64,
}

impl Default for MixtureWeights {
    /// 150k visual conversation : 10k retrieval dialogues : 10k edits.
    fn default() -> Self {
        Self {
            qa: 150.0,
            chatsearch: 10.0,
            edit: 10.0,
        }
    }
}

impl MixtureWeights {
    pub fn normalized(&self) -> [f64; 3] {
        let t = self.qa + self.chatsearch + self.edit;
        if t <= 0.0 {
            return [0.0; 3];
        }
        [self.qa / t, self.chatsearch / t, self.edit / t]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionPoolSizes {
    pub chatsearch: usize,
    pub qa: usize,
    pub edit: usize,
    /// Fraction of the QA pool that is text-only small talk.
    pub chitchat_frac: f64,
    pub seed: u64,
}

impl Default for InstructionPoolSizes {
    fn default() -> Self {
        Self {
            chatsearch: 2000,
            qa: 2000,
            edit: 1000,
            chitchat_frac: 0.1,
            seed: 31,
        }
    }
}

/// Source material for stage 2, all drawn from the training pool.
#[derive(Debug, Clone)]
pub struct InstructionPools {
    pub chatsearch: Vec<DialogueSample>,
    pub qa: Vec<ChatDialogue>,
    pub edit: Vec<DialogueSample>,
}

pub fn make_instruction_pools(
    world: &World,
    pool: &[ImageId],
    sizes: &InstructionPoolSizes,
) -> Result<InstructionPools, WorldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(sizes.seed);
    let mut resamples = 0;
    let per = sizes.chatsearch / 5;
    let mut chatsearch = Vec::with_capacity(sizes.chatsearch);
    for (t, n) in [
        (Subtask::Tchat, sizes.chatsearch - 4 * per),
        (Subtask::Ichat, 2 * per),
        (Subtask::Mchat, 2 * per),
    ] {
        chatsearch.extend(generate_samples(world, pool, t, n, &mut rng, &mut resamples)?);
    }
    let qa = (0..sizes.qa)
        .map(|_| {
            if rng.random_bool(sizes.chitchat_frac.clamp(0.0, 1.0)) {
                make_chitchat(&mut rng)
            } else {
                let id = *pool.choose(&mut rng).expect("pool");
                let rounds = rng.random_range(1..=3);
                make_qa(world, id, rounds, &mut rng)
            }
        })
        .collect();
    let mut edit = Vec::with_capacity(sizes.edit);
    while edit.len() < sizes.edit {
        let id = *pool.choose(&mut rng).expect("pool");
        if let Some(s) = make_edit(world, pool, id, &mut rng) {
            edit.push(s);
        }
    }
    Ok(InstructionPools {
        chatsearch,
        qa,
        edit,
    })
}

/// A pair document for the held-out caption-to-image check: the canonical
/// caption followed by its image.
pub fn caption_query(world: &World, id: ImageId) -> Result<MultimodalDocument, WorldError> {
    let cap = world.vocab().tokenize(&world.caption(world.image(id)))?;
    Ok(MultimodalDocument::new().text(cap, SpanRole::Plain))
}
