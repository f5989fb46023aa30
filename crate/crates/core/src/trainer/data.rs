use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::model::ModelConfig;
use crate::sequence::corpus::{read_jsonl, write_jsonl, CorpusRecord};
use crate::sequence::Vocab;
use crate::sequence::{
    pack_document, render_chat_template, segment_long_document, ChatDialogue, ImageId,
    MultimodalDocument, PackOptions, PackedSequence, SequenceError, Stage,
};
use crate::synthworld::{InstructionPools, MixtureWeights, World};

/// Packed training sequences grouped into weighted sources.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub sources: Vec<(f64, Vec<PackedSequence>)>,
    pub names: Vec<String>,
    /// Every image referenced by the set, ascending; the queue warm-fill
    /// draws from it.
    pub images: Vec<ImageId>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.sources.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn collect_images(&mut self) {
        let ids: BTreeSet<ImageId> = self
            .sources
            .iter()
            .flat_map(|(_, s)| s.iter().flat_map(|p| p.images.iter().copied()))
            .collect();
        self.images = ids.into_iter().collect();
    }
}

fn opts(cfg: &ModelConfig) -> PackOptions {
    PackOptions {
        n_latents: cfg.n_latents,
        max_len: cfg.max_seq,
        query_at: cfg.query_at,
    }
}

/// Segments (leaving room for `<s>`) and packs every document.
fn pack_all(
    docs: &[MultimodalDocument],
    stage: Stage,
    cfg: &ModelConfig,
) -> Result<Vec<PackedSequence>, SequenceError> {
    let o = opts(cfg);
    let mut out = Vec::with_capacity(docs.len());
    for doc in docs {
        for piece in segment_long_document(doc, cfg.max_seq - 1, cfg.n_latents)? {
            out.push(pack_document(&piece, stage, &o)?);
        }
    }
    Ok(out)
}

pub fn stage1_set(docs: &[MultimodalDocument], cfg: &ModelConfig) -> Result<TrainSet, SequenceError> {
    let mut set = TrainSet {
        sources: vec![(1.0, pack_all(docs, Stage::Alignment, cfg)?)],
        names: vec!["alignment".into()],
        images: Vec::new(),
    };
    set.collect_images();
    Ok(set)
}

fn render_all(
    dialogues: impl Iterator<Item = ChatDialogue>,
    world: &World,
    cfg: &ModelConfig,
) -> Result<Vec<PackedSequence>, SequenceError> {
    let o = opts(cfg);
    let mut out = Vec::new();
    for d in dialogues {
        let doc = render_chat_template(&d, world.vocab())?;
        // Dialogues are never split: a cut would orphan the answer.
        out.push(pack_document(&doc, Stage::Instruction, &o)?);
    }
    Ok(out)
}

/// Answered stage-2 dialogues, one list per mixture source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstructionCorpus {
    pub qa: Vec<ChatDialogue>,
    pub chatsearch: Vec<ChatDialogue>,
    pub edit: Vec<ChatDialogue>,
}

impl InstructionCorpus {
    pub fn from_pools(pools: &InstructionPools) -> Self {
        Self {
            qa: pools.qa.clone(),
            chatsearch: pools.chatsearch.iter().map(|s| s.with_answer()).collect(),
            edit: pools.edit.iter().map(|s| s.with_answer()).collect(),
        }
    }
}

/// Renders the three stage-2 sources and packs them with assistant-only
/// loss.
pub fn stage2_set(
    world: &World,
    corpus: &InstructionCorpus,
    mixture: &MixtureWeights,
    cfg: &ModelConfig,
) -> Result<TrainSet, SequenceError> {
    let [qa, cs, ed] = mixture.normalized();
    let mut set = TrainSet {
        sources: vec![
            (qa, render_all(corpus.qa.iter().cloned(), world, cfg)?),
            (cs, render_all(corpus.chatsearch.iter().cloned(), world, cfg)?),
            (ed, render_all(corpus.edit.iter().cloned(), world, cfg)?),
        ],
        names: vec!["qa".into(), "chatsearch".into(), "edit".into()],
        images: Vec::new(),
    };
    set.collect_images();
    Ok(set)
}

fn io<E: std::fmt::Display>(e: E) -> SequenceError {
    SequenceError::Schema(e.to_string())
}

fn write_records(path: &Path, recs: &[CorpusRecord]) -> Result<(), SequenceError> {
    let f = BufWriter::new(File::create(path).map_err(io)?);
    write_jsonl(f, recs).map_err(io)
}

fn read_records(path: &Path) -> Result<Vec<CorpusRecord>, SequenceError> {
    read_jsonl(BufReader::new(File::open(path).map_err(|e| io(format!("{}: {e}", path.display())))?))
}

pub const STAGE1_FILE: &str = "stage1.jsonl";
pub const INSTRUCTION_FILES: [&str; 3] = ["instruct_qa.jsonl", "instruct_chatsearch.jsonl", "instruct_edit.jsonl"];

/// Writes `stage1.jsonl` in the corpus schema.
pub fn write_stage1_corpus(dir: &Path, docs: &[MultimodalDocument], vocab: &Vocab) -> Result<(), SequenceError> {
    let recs: Vec<CorpusRecord> = docs.iter().map(|d| CorpusRecord::from_document(d, vocab)).collect();
    write_records(&dir.join(STAGE1_FILE), &recs)
}

pub fn read_stage1_corpus(dir: &Path, vocab: &Vocab) -> Result<Vec<MultimodalDocument>, SequenceError> {
    read_records(&dir.join(STAGE1_FILE))?
        .iter()
        .map(|r| r.to_document(vocab))
        .collect()
}

/// Writes one dialogue file per stage-2 source.
pub fn write_instruction_corpus(dir: &Path, c: &InstructionCorpus) -> Result<(), SequenceError> {
    for (name, ds) in INSTRUCTION_FILES.iter().zip([&c.qa, &c.chatsearch, &c.edit]) {
        let recs: Vec<CorpusRecord> = ds.iter().map(CorpusRecord::from_dialogue).collect();
        write_records(&dir.join(name), &recs)?;
    }
    Ok(())
}

pub fn read_instruction_corpus(dir: &Path) -> Result<InstructionCorpus, SequenceError> {
    let mut lists = Vec::new();
    for name in INSTRUCTION_FILES {
        let ds = read_records(&dir.join(name))?
            .into_iter()
            .map(|r| {
                let turns = r.turns.ok_or_else(|| SequenceError::Schema(format!("{name}: record without turns")))?;
                let d = ChatDialogue::new(turns);
                d.validate()?;
                Ok(d)
            })
            .collect::<Result<Vec<_>, SequenceError>>()?;
        lists.push(ds);
    }
    let edit = lists.pop().unwrap_or_default();
    let chatsearch = lists.pop().unwrap_or_default();
    let qa = lists.pop().unwrap_or_default();
    Ok(InstructionCorpus { qa, chatsearch, edit })
}
