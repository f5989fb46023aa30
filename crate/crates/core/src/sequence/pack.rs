use serde::{Deserialize, Serialize};

use super::vocab::{BOS, IMG, IMG_END};
use super::{image_span_len, ImageId, MultimodalDocument, Segment, SequenceError, SpanRole};

/// Training stage, which decides the loss scope when packing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Bidirectional alignment: every text token and every image is a target.
    Alignment,
    /// Instruction tuning: only assistant answers are targets.
    Instruction,
}

/// Where the retrieval query `h_I` is read for an image span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryPosition {
    /// Output at the `[IMG]` token, i.e. the state that predicts `<CLS>`.
    #[default]
    Img,
    /// Output at the `<CLS>` slot. The target's own `<CLS>` input is blanked
    /// so the query cannot copy it.
    Cls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackOptions {
    pub n_latents: usize,
    pub max_len: usize,
    pub query_at: QueryPosition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(u32),
    /// Projected global feature of image occurrence `image`.
    Cls { image: usize, blank: bool },
    /// Projected perceiver latent `index` of image occurrence `image`.
    Latent { image: usize, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Token(u32),
    /// Feature match against the queue for image occurrence `k`.
    Image(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImagePosition {
    pub img_token_index: usize,
    /// Position whose output is the retrieval query.
    pub query_index: usize,
    pub image: ImageId,
    pub in_loss: bool,
}

/// Decoder-ready sequence. `targets[t]` is what position `t` predicts
/// (the content of slot `t + 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub slots: Vec<Slot>,
    pub targets: Vec<Option<Target>>,
    pub loss_mask: Vec<bool>,
    pub image_positions: Vec<ImagePosition>,
    pub images: Vec<ImageId>,
    pub roles: Vec<SpanRole>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Text targets `(position, token)` with the loss flag set.
    pub fn text_targets(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.targets.iter().enumerate().filter_map(|(t, tg)| match tg {
            Some(Target::Token(tok)) if self.loss_mask[t] => Some((t, *tok)),
            _ => None,
        })
    }

    /// Appends a bare `[IMG]` (plus a blank `<CLS>` in CLS mode) so the
    /// model can be queried for an image that is not known yet. Returns the
    /// query position.
    pub fn append_query(&mut self, query_at: QueryPosition) -> usize {
        let img_index = self.slots.len();
        self.slots.push(Slot::Token(IMG));
        self.targets.push(None);
        self.loss_mask.push(false);
        self.roles.push(SpanRole::Assistant);
        match query_at {
            QueryPosition::Img => img_index,
            QueryPosition::Cls => {
                self.images.push(ImageId(u32::MAX));
                self.slots.push(Slot::Cls {
                    image: self.images.len() - 1,
                    blank: true,
                });
                self.targets.push(None);
                self.loss_mask.push(false);
                self.roles.push(SpanRole::Assistant);
                img_index + 1
            }
        }
    }

    /// Appends one text token (used by greedy decoding).
    pub fn push_token(&mut self, tok: u32, role: SpanRole) {
        if let Some(last) = self.targets.last_mut() {
            if last.is_none() && matches!(self.slots.last(), Some(Slot::Token(_))) {
                *last = Some(Target::Token(tok));
            }
        }
        self.slots.push(Slot::Token(tok));
        self.targets.push(None);
        self.loss_mask.push(false);
        self.roles.push(role);
    }
}

/// Expands image references into `[IMG] <CLS> q_1..q_N [/IMG]` spans,
/// prepends `<s>`, and builds next-slot targets with the stage's loss mask.
/// Latent slots never carry a target.
pub fn pack_document(
    doc: &MultimodalDocument,
    stage: Stage,
    opts: &PackOptions,
) -> Result<PackedSequence, SequenceError> {
    doc.validate()?;
    let len = 1 + doc.expanded_len(opts.n_latents);
    if len > opts.max_len {
        return Err(SequenceError::Overlength {
            len,
            max: opts.max_len,
        });
    }
    let mut slots = Vec::with_capacity(len);
    let mut roles = Vec::with_capacity(len);
    let mut images = Vec::new();
    let mut positions = Vec::new();
    slots.push(Slot::Token(BOS));
    roles.push(SpanRole::Plain);
    for seg in &doc.segments {
        match seg {
            Segment::Text { tokens, role } => {
                for &t in tokens {
                    slots.push(Slot::Token(t));
                    roles.push(*role);
                }
            }
            Segment::Image { id, role } => {
                let k = images.len();
                images.push(*id);
                let in_loss = stage == Stage::Alignment || *role == SpanRole::Assistant;
                let img_token_index = slots.len();
                let query_index = match opts.query_at {
                    QueryPosition::Img => img_token_index,
                    QueryPosition::Cls => img_token_index + 1,
                };
                positions.push(ImagePosition {
                    img_token_index,
                    query_index,
                    image: *id,
                    in_loss,
                });
                slots.push(Slot::Token(IMG));
                slots.push(Slot::Cls {
                    image: k,
                    blank: opts.query_at == QueryPosition::Cls && in_loss,
                });
                slots.extend((0..opts.n_latents).map(|index| Slot::Latent { image: k, index }));
                slots.push(Slot::Token(IMG_END));
                roles.extend(std::iter::repeat_n(*role, image_span_len(opts.n_latents)));
            }
        }
    }
    let n = slots.len();
    let mut targets = vec![None; n];
    let mut loss_mask = vec![false; n];
    let query_owner: std::collections::HashMap<usize, usize> = positions
        .iter()
        .enumerate()
        .map(|(k, p)| (p.query_index, k))
        .collect();
    for t in 0..n.saturating_sub(1) {
        let target = if let Some(&k) = query_owner.get(&t) {
            Some(Target::Image(k))
        } else {
            match (slots[t], slots[t + 1]) {
                (Slot::Cls { .. } | Slot::Latent { .. }, _) => None,
                (_, Slot::Token(tok)) => Some(Target::Token(tok)),
                _ => None,
            }
        };
        if target.is_some() {
            loss_mask[t] = stage == Stage::Alignment || roles[t + 1] == SpanRole::Assistant;
        }
        targets[t] = target;
    }
    Ok(PackedSequence {
        slots,
        targets,
        loss_mask,
        image_positions: positions,
        images,
        roles,
    })
}
