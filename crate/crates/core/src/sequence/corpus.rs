//! Line-delimited corpus records (schema version 1).
//!
//! Each line is one JSON object. A plain document lists its `segments`:
//!
//! ```json
//! {"schema":1,"segments":[{"text":"two red cats"},{"image":17}]}
//! ```
//!
//! A dialogue lists `turns` instead; images inside a turn are referenced by
//! `[image]` placeholders in order:
//!
//! ```json
//! {"schema":1,"turns":[{"role":"user","text":"[image] same but on sand","images":[3]},
//!                      {"role":"assistant","text":"[image]","images":[9]}]}
//! ```
//!
//! `meta` is free-form and ignored by the loader.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{
    render_chat_template, ChatDialogue, ImageId, MultimodalDocument, Segment, SequenceError,
    SpanRole, Turn, Vocab,
};

pub const CORPUS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SegmentRecord {
    Text { text: String },
    Image { image: ImageId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<SegmentRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turns: Option<Vec<Turn>>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

impl CorpusRecord {
    pub fn from_document(doc: &MultimodalDocument, vocab: &Vocab) -> Self {
        let segments = doc
            .segments
            .iter()
            .map(|s| match s {
                Segment::Text { tokens, .. } => SegmentRecord::Text {
                    text: vocab.detokenize(tokens),
                },
                Segment::Image { id, .. } => SegmentRecord::Image { image: *id },
            })
            .collect();
        Self {
            schema: CORPUS_SCHEMA,
            segments: Some(segments),
            turns: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn from_dialogue(d: &ChatDialogue) -> Self {
        Self {
            schema: CORPUS_SCHEMA,
            segments: None,
            turns: Some(d.turns.clone()),
            meta: serde_json::Value::Null,
        }
    }

    /// Resolves the record into a document: plain segments become
    /// [`SpanRole::Plain`], dialogues go through the chat template.
    pub fn to_document(&self, vocab: &Vocab) -> Result<MultimodalDocument, SequenceError> {
        if self.schema != CORPUS_SCHEMA {
            return Err(SequenceError::Schema(format!(
                "unsupported corpus schema {}",
                self.schema
            )));
        }
        match (&self.segments, &self.turns) {
            (Some(segs), None) => {
                let mut doc = MultimodalDocument::new();
                for s in segs {
                    match s {
                        SegmentRecord::Text { text } => {
                            doc.push_text(vocab.tokenize(text)?, SpanRole::Plain)
                        }
                        SegmentRecord::Image { image } => doc.push_image(*image, SpanRole::Plain),
                    }
                }
                doc.validate()?;
                Ok(doc)
            }
            (None, Some(turns)) => render_chat_template(&ChatDialogue::new(turns.clone()), vocab),
            _ => Err(SequenceError::Schema(
                "record needs exactly one of `segments` or `turns`".into(),
            )),
        }
    }
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, records: &[T]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(r: impl BufRead) -> Result<Vec<T>, SequenceError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| SequenceError::Schema(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| SequenceError::Schema(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}
