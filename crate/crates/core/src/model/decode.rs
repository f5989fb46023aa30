use super::{FeatureStore, Model, ModelError};
use crate::sequence::vocab::{EOS, IMG};
use crate::sequence::{PackedSequence, Slot, SpanRole};
use crate::tensor::{Graph, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStop {
    /// `[IMG]` was emitted; the query state is returned.
    Image,
    /// `</s>` was emitted, or the prefix already ended with it.
    End,
    /// `max_new` tokens (or `max_seq`) ran out first.
    Truncated,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// Emitted text tokens, excluding `[IMG]` and `</s>`.
    pub tokens: Vec<u32>,
    pub stop: DecodeStop,
    /// Decoder state at the query position when `stop == Image`.
    pub query: Option<Vec<f32>>,
    /// Prefix plus everything appended during decoding.
    pub sequence: PackedSequence,
}

impl<R: Real> Model<R> {
    /// Hidden state of the last position of `seq`, plus its text logits.
    fn last_state(
        &self,
        seq: &PackedSequence,
        store: &FeatureStore,
        row: usize,
    ) -> Result<(Vec<f32>, Vec<f64>), ModelError> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, &[seq], store)?;
        let h: Vec<f32> = g.value(out.hidden).row(row).iter().map(|v| v.as_f64() as f32).collect();
        let logits = self.text_logits(&mut g, out.hidden, &[row])?;
        let l = g.value(logits).data().iter().map(|v| v.as_f64()).collect();
        Ok((h, l))
    }

    /// Appends a query cue to `seq` and returns the decoder state at the
    /// query position. Used when the caller retrieves regardless of
    /// whether the model chose to emit `[IMG]`.
    pub fn query_state(
        &self,
        seq: &mut PackedSequence,
        store: &FeatureStore,
    ) -> Result<Vec<f32>, ModelError> {
        let q = seq.append_query(self.config.query_at);
        if seq.len() > self.config.max_seq {
            return Err(ModelError::Overlength {
                len: seq.len(),
                max: self.config.max_seq,
            });
        }
        Ok(self.last_state(seq, store, q)?.0)
    }
}

/// Greedy decoding from `prefix`. Ties in the argmax go to the lowest id.
pub fn decode_greedy<R: Real>(
    model: &Model<R>,
    prefix: &PackedSequence,
    store: &FeatureStore,
    max_new: usize,
) -> Result<DecodeOutput, ModelError> {
    let mut seq = prefix.clone();
    let mut tokens = Vec::new();
    if matches!(seq.slots.last(), Some(Slot::Token(EOS))) {
        return Ok(DecodeOutput {
            tokens,
            stop: DecodeStop::End,
            query: None,
            sequence: seq,
        });
    }
    for _ in 0..max_new {
        if seq.len() >= model.config.max_seq {
            break;
        }
        let (_, logits) = model.last_state(&seq, store, seq.len() - 1)?;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        let tok = best as u32;
        if tok == IMG {
            if seq.len() + 2 > model.config.max_seq {
                break;
            }
            let h = model.query_state(&mut seq, store)?;
            return Ok(DecodeOutput {
                tokens,
                stop: DecodeStop::Image,
                query: Some(h),
                sequence: seq,
            });
        }
        seq.push_token(tok, SpanRole::Assistant);
        if tok == EOS {
            return Ok(DecodeOutput {
                tokens,
                stop: DecodeStop::End,
                query: None,
                sequence: seq,
            });
        }
        tokens.push(tok);
    }
    Ok(DecodeOutput {
        tokens,
        stop: DecodeStop::Truncated,
        query: None,
        sequence: seq,
    })
}
