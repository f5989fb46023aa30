use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, ASSISTANT, EOS, USER};
use super::{ImageId, MultimodalDocument, SequenceError, SpanRole};

/// Marks where an attached image sits inside a turn's text.
pub const IMAGE_PLACEHOLDER: &str = "[image]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

/// One turn: text with one `[image]` placeholder per attached image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub images: Vec<ImageId>,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn with_image(mut self, id: ImageId) -> Self {
        self.images.push(id);
        self
    }

    /// Splits the text at placeholders and interleaves the attached images.
    pub fn content(&self, vocab: &Vocab, role: SpanRole) -> Result<MultimodalDocument, SequenceError> {
        let pieces: Vec<&str> = self.text.split(IMAGE_PLACEHOLDER).collect();
        let placeholders = pieces.len() - 1;
        if placeholders != self.images.len() {
            return Err(SequenceError::PlaceholderMismatch {
                placeholders,
                images: self.images.len(),
            });
        }
        let mut doc = MultimodalDocument::new();
        for (i, piece) in pieces.iter().enumerate() {
            doc.push_text(vocab.tokenize(piece)?, role);
            if let Some(&img) = self.images.get(i) {
                doc.push_image(img, role);
            }
        }
        Ok(doc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChatDialogue {
    pub turns: Vec<Turn>,
}

impl ChatDialogue {
    pub fn new(turns: Vec<Turn>) -> Self {
        Self { turns }
    }

    /// Roles must alternate starting with the user.
    pub fn validate(&self) -> Result<(), SequenceError> {
        if self.turns.is_empty() {
            return Err(SequenceError::EmptyDocument);
        }
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if t.role != expected {
                return Err(SequenceError::RoleOrder(i));
            }
        }
        Ok(())
    }

    /// Number of user turns.
    pub fn rounds(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::User).count()
    }

    pub fn push(&mut self, turn: Turn) {
        self.turns.push(turn);
    }
}

/// Renders `USER: <q> ASSISTANT: <a> </s> ...`. The `ASSISTANT:` marker is
/// prompt-side; the answer and its closing `</s>` form the assistant span.
pub fn render_chat_template(
    dialogue: &ChatDialogue,
    vocab: &Vocab,
) -> Result<MultimodalDocument, SequenceError> {
    dialogue.validate()?;
    let mut doc = MultimodalDocument::new();
    for turn in &dialogue.turns {
        match turn.role {
            Role::User => {
                doc.push_text(vec![USER], SpanRole::User);
                doc.extend(turn.content(vocab, SpanRole::User)?);
            }
            Role::Assistant => {
                doc.push_text(vec![ASSISTANT], SpanRole::User);
                doc.extend(turn.content(vocab, SpanRole::Assistant)?);
                doc.push_text(vec![EOS], SpanRole::Assistant);
            }
        }
    }
    Ok(doc)
}

/// Renders a dialogue that ends with a user turn, followed by the
/// `ASSISTANT:` marker that cues the reply.
pub fn render_reply_prompt(
    dialogue: &ChatDialogue,
    vocab: &Vocab,
) -> Result<MultimodalDocument, SequenceError> {
    if dialogue.turns.last().map(|t| t.role) != Some(Role::User) {
        return Err(SequenceError::RoleOrder(dialogue.turns.len()));
    }
    let mut doc = render_chat_template(dialogue, vocab)?;
    doc.push_text(vec![ASSISTANT], SpanRole::User);
    Ok(doc)
}
