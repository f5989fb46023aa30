use super::{image_span_len, MultimodalDocument, Segment, SequenceError};

/// Cuts a document into pieces of at most `max_len` expanded slots.
/// Text is split anywhere; an image span that would straddle a cut moves
/// wholly into the next piece.
pub fn segment_long_document(
    doc: &MultimodalDocument,
    max_len: usize,
    n_latents: usize,
) -> Result<Vec<MultimodalDocument>, SequenceError> {
    let span = image_span_len(n_latents);
    if max_len < span + 1 {
        return Err(SequenceError::SegmentTooShort {
            max_len,
            needed: span + 1,
        });
    }
    let mut out = Vec::new();
    let mut cur = MultimodalDocument::new();
    let mut used = 0usize;
    for seg in &doc.segments {
        match seg {
            Segment::Image { id, role } => {
                if used + span > max_len {
                    out.push(std::mem::take(&mut cur));
                    used = 0;
                }
                cur.push_image(*id, *role);
                used += span;
            }
            Segment::Text { tokens, role } => {
                let mut rest = tokens.as_slice();
                while !rest.is_empty() {
                    if used == max_len {
                        out.push(std::mem::take(&mut cur));
                        used = 0;
                    }
                    let take = rest.len().min(max_len - used);
                    cur.push_text(rest[..take].to_vec(), *role);
                    used += take;
                    rest = &rest[take..];
                }
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::{ImageId, SpanRole};

    #[test]
    fn short_doc_is_untouched() {
        let d = MultimodalDocument::new().text(vec![1, 2, 3], SpanRole::Plain);
        assert_eq!(segment_long_document(&d, 20, 2).unwrap(), vec![d]);
    }

    #[test]
    fn text_splits_evenly() {
        let d = MultimodalDocument::new().text((0..40).collect(), SpanRole::Plain);
        let parts = segment_long_document(&d, 20, 2).unwrap();
        assert_eq!(parts.len(), 2);
        assert!(parts.iter().all(|p| p.expanded_len(2) == 20));
    }

    #[test]
    fn straddling_image_moves_forward() {
        let d = MultimodalDocument::new()
            .text(vec![0; 8], SpanRole::Plain)
            .image(ImageId(1), SpanRole::Plain)
            .text(vec![1; 2], SpanRole::Plain);
        let parts = segment_long_document(&d, 10, 2).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].expanded_len(2), 8);
        assert!(matches!(parts[1].segments[0], Segment::Image { .. }));
    }

    #[test]
    fn too_short_limit_is_rejected() {
        let d = MultimodalDocument::new().text(vec![0], SpanRole::Plain);
        assert!(segment_long_document(&d, 5, 2).is_err());
    }
}
