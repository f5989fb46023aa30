use serde::{Deserialize, Serialize};

use super::report::{fingerprint, RecallReport, SubtaskCell};
use super::{recall_at_k, subset_recall, EvalError, Gallery};
use crate::model::{DecodeStop, FeatureStore, Model};
use crate::sequence::vocab::{EOS, IMG};
use crate::sequence::{
    pack_document, render_reply_prompt, ChatDialogue, ImageId, PackOptions, PackedSequence, Slot,
    SpanRole, Stage,
};
use crate::synthworld::{caption_query, Benchmark, Subtask, World};
use crate::tensor::{Graph, Real};

const BATCH: usize = 32;

/// What the model was conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Full,
    /// Only the final user turn.
    LastTurn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChatEvalOptions {
    pub context: ContextMode,
    /// Greedy decoding budget before retrieval is forced.
    pub max_new: usize,
}

impl Default for ChatEvalOptions {
    fn default() -> Self {
        Self {
            context: ContextMode::Full,
            max_new: 8,
        }
    }
}

/// Result of decoding one prompt up to its retrieval query.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    /// Text emitted before `[IMG]` (or before giving up).
    pub tokens: Vec<u32>,
    pub stop: DecodeStop,
    /// Decoder state at the query position.
    pub query: Vec<f32>,
    /// True when the model did not emit `[IMG]` and the query was cued.
    pub forced: bool,
}

fn opts<R: Real>(model: &Model<R>) -> PackOptions {
    PackOptions {
        n_latents: model.config.n_latents,
        max_len: model.config.max_seq,
        query_at: model.config.query_at,
    }
}

/// Hidden rows at `pos[i]` of `seqs[i]`, plus their text logits when asked.
fn states<R: Real>(
    model: &Model<R>,
    store: &FeatureStore,
    seqs: &[&PackedSequence],
    pos: &[usize],
    logits: bool,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f64>>), EvalError> {
    let mut g = Graph::new(&model.params);
    let out = model.forward(&mut g, seqs, store)?;
    let rows: Vec<usize> = pos.iter().enumerate().map(|(i, &p)| out.row(i, p)).collect();
    let hv = g.value(out.hidden);
    let h = rows
        .iter()
        .map(|&r| hv.row(r).iter().map(|v| v.as_f64() as f32).collect())
        .collect();
    let mut l = Vec::new();
    if logits {
        let n = model.text_logits(&mut g, out.hidden, &rows)?;
        let t = g.value(n);
        l = (0..rows.len())
            .map(|i| t.row(i).iter().map(|v| v.as_f64()).collect())
            .collect();
    }
    Ok((h, l))
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy-decodes every prefix in lock-step batches until it emits
/// `[IMG]`, `</s>` or runs out of budget; prefixes that never emit `[IMG]`
/// get the query cued at the end of the original prefix.
pub fn decode_queries<R: Real>(
    model: &Model<R>,
    store: &FeatureStore,
    prefixes: &[PackedSequence],
    max_new: usize,
) -> Result<Vec<QueryOutcome>, EvalError> {
    let max_seq = model.config.max_seq;
    let qa = model.config.query_at;
    let mut seqs: Vec<PackedSequence> = prefixes.to_vec();
    let mut tokens = vec![Vec::new(); seqs.len()];
    let mut stop = vec![None; seqs.len()];
    for (i, s) in seqs.iter().enumerate() {
        if matches!(s.slots.last(), Some(Slot::Token(EOS))) {
            stop[i] = Some(DecodeStop::End);
        }
    }
    for _ in 0..max_new {
        let active: Vec<usize> = (0..seqs.len())
            .filter(|&i| stop[i].is_none() && seqs[i].len() < max_seq)
            .collect();
        if active.is_empty() {
            break;
        }
        for chunk in active.chunks(BATCH) {
            let batch: Vec<&PackedSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let pos: Vec<usize> = batch.iter().map(|s| s.len() - 1).collect();
            let (_, logits) = states(model, store, &batch, &pos, true)?;
            for (&i, l) in chunk.iter().zip(&logits) {
                match argmax(l) {
                    IMG => stop[i] = Some(DecodeStop::Image),
                    EOS => {
                        seqs[i].push_token(EOS, SpanRole::Assistant);
                        stop[i] = Some(DecodeStop::End);
                    }
                    tok => {
                        seqs[i].push_token(tok, SpanRole::Assistant);
                        tokens[i].push(tok);
                    }
                }
            }
        }
    }
    // Emitted queries continue the decoded sequence; forced ones cue the
    // original prefix.
    let mut qseqs = Vec::with_capacity(seqs.len());
    let mut qpos = Vec::with_capacity(seqs.len());
    let mut forced = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.into_iter().enumerate() {
        let emitted = stop[i] == Some(DecodeStop::Image) && s.len() + 2 <= max_seq;
        let mut q = if emitted { s } else { prefixes[i].clone() };
        let p = q.append_query(qa);
        if q.len() > max_seq {
            return Err(EvalError::Input(format!(
                "prompt {i} leaves no room for a query within max_seq {max_seq}"
            )));
        }
        qpos.push(p);
        qseqs.push(q);
        forced.push(!emitted);
    }
    let mut out = Vec::with_capacity(qseqs.len());
    for (c, chunk) in qseqs.chunks(BATCH).enumerate() {
        let batch: Vec<&PackedSequence> = chunk.iter().collect();
        let (h, _) = states(model, store, &batch, &qpos[c * BATCH..c * BATCH + chunk.len()], false)?;
        for (j, h) in h.into_iter().enumerate() {
            let i = c * BATCH + j;
            out.push(QueryOutcome {
                tokens: std::mem::take(&mut tokens[i]),
                stop: stop[i].unwrap_or(DecodeStop::Truncated),
                query: h,
                forced: forced[i],
            });
        }
    }
    Ok(out)
}

/// Packs a dialogue that ends with a user turn as a reply prompt.
pub fn reply_prefix<R: Real>(model: &Model<R>, world_vocab: &crate::sequence::Vocab, d: &ChatDialogue) -> Result<PackedSequence, EvalError> {
    let doc = render_reply_prompt(d, world_vocab)?;
    Ok(pack_document(&doc, Stage::Instruction, &opts(model))?)
}

/// Decodes one dialogue to its retrieval query; the session service and
/// the benchmark runner share this path.
pub fn query_for_prompt<R: Real>(
    model: &Model<R>,
    store: &FeatureStore,
    vocab: &crate::sequence::Vocab,
    d: &ChatDialogue,
    max_new: usize,
) -> Result<QueryOutcome, EvalError> {
    let p = reply_prefix(model, vocab, d)?;
    Ok(decode_queries(model, store, &[p], max_new)?.remove(0))
}

fn last_turn(d: &ChatDialogue) -> ChatDialogue {
    ChatDialogue::new(d.turns.last().cloned().into_iter().collect())
}

/// Scores every benchmark sample against the full gallery.
pub fn run_chatsearch_eval<R: Real>(
    model: &Model<R>,
    world: &World,
    bench: &Benchmark,
    store: &FeatureStore,
    opts: &ChatEvalOptions,
) -> Result<RecallReport, EvalError> {
    let gallery = Gallery::build(model, store, &bench.gallery)?;
    let mut cells = Vec::new();
    for t in Subtask::ALL {
        let samples: Vec<_> = bench.by_subtask(t).collect();
        let prefixes = samples
            .iter()
            .map(|s| {
                let ctx = match opts.context {
                    ContextMode::Full => s.context.clone(),
                    ContextMode::LastTurn => last_turn(&s.context),
                };
                reply_prefix(model, world.vocab(), &ctx)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let outcomes = decode_queries(model, store, &prefixes, opts.max_new)?;
        let ranked = outcomes
            .iter()
            .map(|o| {
                Ok(gallery
                    .rank(model, &o.query, gallery.len())?
                    .into_iter()
                    .map(|(id, _)| id)
                    .collect())
            })
            .collect::<Result<Vec<Vec<ImageId>>, EvalError>>()?;
        let targets: Vec<ImageId> = samples.iter().map(|s| s.target).collect();
        let (r1, missing) = recall_at_k(&ranked, &targets, 1)?;
        let (r5, _) = recall_at_k(&ranked, &targets, 5)?;
        let (r10, _) = recall_at_k(&ranked, &targets, 10)?;
        let subsets: Option<Vec<Vec<ImageId>>> = samples.iter().map(|s| s.subset.clone()).collect();
        let subset = match subsets {
            Some(sub) if !sub.is_empty() => Some([
                subset_recall(&ranked, &targets, &sub, 1)?,
                subset_recall(&ranked, &targets, &sub, 2)?,
                subset_recall(&ranked, &targets, &sub, 3)?,
            ]),
            _ => None,
        };
        cells.push(SubtaskCell {
            subtask: t,
            n: samples.len(),
            r1,
            r5,
            r10,
            forced: outcomes.iter().filter(|o| o.forced).count(),
            missing_targets: missing.len(),
            subset,
        });
    }
    Ok(RecallReport::new(cells, opts.context, fingerprint(model)))
}

/// Caption-to-image R@1/5/10 (percent): each gallery image's canonical
/// caption is the query.
pub fn caption_recall<R: Real>(
    model: &Model<R>,
    world: &World,
    store: &FeatureStore,
    gallery_ids: &[ImageId],
) -> Result<[f64; 3], EvalError> {
    let gallery = Gallery::build(model, store, gallery_ids)?;
    let o = opts(model);
    let mut seqs = Vec::with_capacity(gallery_ids.len());
    let mut pos = Vec::with_capacity(gallery_ids.len());
    for &id in gallery_ids {
        let mut s = pack_document(&caption_query(world, id)?, Stage::Alignment, &o)?;
        pos.push(s.append_query(model.config.query_at));
        seqs.push(s);
    }
    let mut ranked = Vec::with_capacity(seqs.len());
    for (c, chunk) in seqs.chunks(BATCH).enumerate() {
        let batch: Vec<&PackedSequence> = chunk.iter().collect();
        let (h, _) = states(model, store, &batch, &pos[c * BATCH..c * BATCH + chunk.len()], false)?;
        for h in h {
            ranked.push(gallery.rank(model, &h, 10.min(gallery.len()))?.into_iter().map(|(id, _)| id).collect());
        }
    }
    let mut out = [0.0; 3];
    for (o, k) in out.iter_mut().zip([1, 5, 10]) {
        *o = recall_at_k(&ranked, gallery_ids, k)?.0;
    }
    Ok(out)
}
