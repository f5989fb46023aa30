//! Multimodal vocabulary, chat templating, packing and segmentation.

mod chat;
pub mod corpus;
mod doc;
mod pack;
mod segment;
pub mod vocab;

pub use chat::{render_chat_template, render_reply_prompt, ChatDialogue, Role, Turn, IMAGE_PLACEHOLDER};
pub use doc::{arrange_pair, image_span_len, ImageId, MultimodalDocument, PairMode, Segment, SpanRole};
pub use pack::{
    pack_document, ImagePosition, PackOptions, PackedSequence, QueryPosition, Slot, Stage, Target,
};
pub use segment::segment_long_document;
pub use vocab::Vocab;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SequenceError {
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("document is empty")]
    EmptyDocument,
    #[error("turn {0} breaks user/assistant alternation")]
    RoleOrder(usize),
    #[error("{placeholders} [image] placeholders but {images} attached images")]
    PlaceholderMismatch { placeholders: usize, images: usize },
    #[error("packed length {len} exceeds max {max}; segment the document first")]
    Overlength { len: usize, max: usize },
    #[error("segment length {max_len} cannot hold an image span ({needed} slots)")]
    SegmentTooShort { max_len: usize, needed: usize },
    #[error("corpus: {0}")]
    Schema(String),
}
