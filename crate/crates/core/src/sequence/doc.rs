use serde::{Deserialize, Serialize};

use super::SequenceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u32);

impl std::fmt::Display for ImageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which side of a conversation a span belongs to. Plain documents
/// (captions, interleaved pages) carry no role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanRole {
    Plain,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Text { tokens: Vec<u32>, role: SpanRole },
    Image { id: ImageId, role: SpanRole },
}

impl Segment {
    pub fn role(&self) -> SpanRole {
        match self {
            Segment::Text { role, .. } | Segment::Image { role, .. } => *role,
        }
    }

    /// Slot count once packed: one per token, `n_latents + 3` per image.
    pub fn expanded_len(&self, n_latents: usize) -> usize {
        match self {
            Segment::Text { tokens, .. } => tokens.len(),
            Segment::Image { .. } => image_span_len(n_latents),
        }
    }
}

/// `[IMG] <CLS> q_1..q_N [/IMG]`.
pub fn image_span_len(n_latents: usize) -> usize {
    n_latents + 3
}

/// Ordered text and image segments; the universal model input.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MultimodalDocument {
    pub segments: Vec<Segment>,
}

impl MultimodalDocument {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(mut self, tokens: Vec<u32>, role: SpanRole) -> Self {
        self.push_text(tokens, role);
        self
    }

    pub fn image(mut self, id: ImageId, role: SpanRole) -> Self {
        self.push_image(id, role);
        self
    }

    /// Appends tokens, merging with a preceding text segment of the same role.
    pub fn push_text(&mut self, tokens: Vec<u32>, role: SpanRole) {
        if tokens.is_empty() {
            return;
        }
        if let Some(Segment::Text {
            tokens: prev,
            role: r,
        }) = self.segments.last_mut()
        {
            if *r == role {
                prev.extend(tokens);
                return;
            }
        }
        self.segments.push(Segment::Text { tokens, role });
    }

    pub fn push_image(&mut self, id: ImageId, role: SpanRole) {
        self.segments.push(Segment::Image { id, role });
    }

    pub fn extend(&mut self, other: MultimodalDocument) {
        for s in other.segments {
            match s {
                Segment::Text { tokens, role } => self.push_text(tokens, role),
                Segment::Image { id, role } => self.push_image(id, role),
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn expanded_len(&self, n_latents: usize) -> usize {
        self.segments.iter().map(|s| s.expanded_len(n_latents)).sum()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Image { id, .. } => Some(*id),
            _ => None,
        })
    }

    /// Canonical form: empty text dropped, adjacent same-role text merged.
    pub fn normalized(&self) -> MultimodalDocument {
        let mut out = MultimodalDocument::new();
        out.extend(self.clone());
        out
    }

    pub fn validate(&self) -> Result<(), SequenceError> {
        if self.segments.is_empty() {
            return Err(SequenceError::EmptyDocument);
        }
        Ok(())
    }
}

/// Placement of the image relative to its caption in a pair document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Image then caption: teaches captioning.
    ImageFirst,
    /// Caption then image: teaches text-to-image retrieval.
    ImageLast,
}

pub fn arrange_pair(caption: Vec<u32>, image: ImageId, mode: PairMode) -> MultimodalDocument {
    let doc = MultimodalDocument::new();
    match mode {
        PairMode::ImageLast => doc
            .text(caption, SpanRole::Plain)
            .image(image, SpanRole::Plain),
        PairMode::ImageFirst => doc
            .image(image, SpanRole::Plain)
            .text(caption, SpanRole::Plain),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_modes_are_mirror_images() {
        let last = arrange_pair(vec![10, 11], ImageId(7), PairMode::ImageLast);
        assert!(matches!(
            last.segments.as_slice(),
            [Segment::Text { .. }, Segment::Image { id: ImageId(7), .. }]
        ));
        let first = arrange_pair(vec![10, 11], ImageId(7), PairMode::ImageFirst);
        let mut rev = last.segments.clone();
        rev.reverse();
        assert_eq!(first.segments, rev);
    }

    #[test]
    fn push_text_merges_same_role_only() {
        let mut d = MultimodalDocument::new();
        d.push_text(vec![1], SpanRole::User);
        d.push_text(vec![2], SpanRole::User);
        d.push_text(vec![3], SpanRole::Assistant);
        d.push_text(vec![], SpanRole::Assistant);
        assert_eq!(d.segments.len(), 2);
        assert_eq!(d.expanded_len(8), 3);
    }
}
