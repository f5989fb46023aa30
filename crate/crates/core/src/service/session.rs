use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::ServiceError;
use crate::eval::{decode_queries, reply_prefix, EvalError, Gallery};
use crate::model::{DecodeStop, FeatureStore, Model, RawImage};
use crate::sequence::{ChatDialogue, ImageId, Role, Turn, IMAGE_PLACEHOLDER};
use crate::synthworld::World;

/// Uploaded images get ids from here up, per session.
pub const UPLOAD_ID_BASE: u32 = 0x8000_0000;

/// Shared, read-only inference state.
pub struct Engine {
    pub model: Model<f32>,
    pub world: World,
    pub store: FeatureStore,
    pub gallery: Gallery,
    /// Candidates returned per retrieval.
    pub k: usize,
    /// Greedy decoding budget per turn.
    pub max_new: usize,
    pub fingerprint: String,
}

impl Engine {
    pub fn new(
        model: Model<f32>,
        world: World,
        store: FeatureStore,
        gallery_ids: &[ImageId],
        k: usize,
    ) -> Result<Self, ServiceError> {
        let gallery = Gallery::build(&model, &store, gallery_ids)?;
        if k == 0 || k > gallery.len() {
            return Err(ServiceError::bad_request(format!(
                "k must lie in 1..={}, got {k}",
                gallery.len()
            )));
        }
        let fingerprint = crate::eval::fingerprint(&model);
        Ok(Self {
            model,
            world,
            store: store.freeze(),
            gallery,
            k,
            max_new: 8,
            fingerprint,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageInput {
    /// A known image (gallery or world) by id.
    Id(ImageId),
    /// Raw features run through the frozen encoder.
    Upload(RawImage),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserInput {
    #[serde(default)]
    pub text: String,
    /// One per `[image]` placeholder; without placeholders the images are
    /// placed before the text.
    #[serde(default)]
    pub images: Vec<ImageInput>,
    /// Retrieve even if the model answers in text.
    #[serde(default)]
    pub force_retrieval: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub image_id: ImageId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub text: String,
    /// Best first; empty for a text-only reply.
    pub candidates: Vec<Candidate>,
    /// Retrieval was cued rather than chosen by the model.
    pub forced: bool,
    /// Oldest rounds left out of the model's view to fit `max_seq`.
    pub truncated_rounds: usize,
    pub millis: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    AwaitingSelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pending {
    /// Text the model produced before `[IMG]`.
    pub text: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    UserTurn { input: UserInput },
    Select { image_id: ImageId },
    Dismiss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    #[serde(flatten)]
    pub action: Action,
    /// Recorded reply of a user turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<TurnResponse>,
}

/// Replayable record of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub session_id: String,
    pub model: String,
    pub entries: Vec<TranscriptEntry>,
}

/// Persisted session state. Features of uploaded images live in a
/// per-session overlay rebuilt from `uploads`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub history: ChatDialogue,
    pub pending: Option<Pending>,
    pub turns: u64,
    pub entries: Vec<TranscriptEntry>,
    pub uploads: Vec<(ImageId, RawImage)>,
    #[serde(skip)]
    store: Option<FeatureStore>,
}

impl Session {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            history: ChatDialogue::default(),
            pending: None,
            turns: 0,
            entries: Vec::new(),
            uploads: Vec::new(),
            store: None,
        }
    }

    pub fn state(&self) -> SessionState {
        if self.pending.is_some() {
            SessionState::AwaitingSelection
        } else {
            SessionState::Idle
        }
    }

    pub fn transcript(&self, engine: &Engine) -> Transcript {
        Transcript {
            session_id: self.id.clone(),
            model: engine.fingerprint.clone(),
            entries: self.entries.clone(),
        }
    }

    fn store(&mut self, engine: &Engine) -> Result<&mut FeatureStore, ServiceError> {
        if self.store.is_none() {
            let mut s = engine.store.overlay();
            for (id, raw) in &self.uploads {
                s.insert(*id, engine.model.encode_image(raw).map_err(EvalError::from)?);
            }
            self.store = Some(s);
        }
        Ok(self.store.as_mut().expect("store"))
    }

    fn resolve_images(&mut self, engine: &Engine, images: &[ImageInput]) -> Result<Vec<ImageId>, ServiceError> {
        let mut ids = Vec::with_capacity(images.len());
        let mut next = UPLOAD_ID_BASE + self.uploads.len() as u32;
        let mut fresh = Vec::new();
        for img in images {
            match img {
                ImageInput::Id(id) => {
                    if id.0 >= UPLOAD_ID_BASE {
                        if !self.uploads.iter().any(|(u, _)| u == id) {
                            return Err(ServiceError::image_not_found(*id));
                        }
                    } else if !engine.store.contains(*id) {
                        return Err(ServiceError::image_not_found(*id));
                    }
                    ids.push(*id);
                }
                ImageInput::Upload(raw) => {
                    let v = engine
                        .model
                        .encode_image(raw)
                        .map_err(|e| ServiceError::invalid_turn(e.to_string()))?;
                    let id = ImageId(next);
                    next += 1;
                    fresh.push((id, raw.clone(), v));
                    ids.push(id);
                }
            }
        }
        for (id, raw, v) in fresh {
            self.store(engine)?.insert(id, v);
            self.uploads.push((id, raw));
        }
        Ok(ids)
    }

    /// Appends the user turn, decodes, and either stores ranked candidates
    /// (awaiting selection) or appends the text reply.
    pub fn post_user_turn(&mut self, engine: &Engine, input: UserInput) -> Result<TurnResponse, ServiceError> {
        let started = Instant::now();
        if self.pending.is_some() {
            return Err(ServiceError::candidates_pending());
        }
        let mut text = input.text.trim().to_string();
        let placeholders = text.matches(IMAGE_PLACEHOLDER).count();
        if placeholders == 0 && !input.images.is_empty() {
            let lead = vec![IMAGE_PLACEHOLDER; input.images.len()].join(" ");
            text = format!("{lead} {text}").trim().to_string();
        } else if placeholders != input.images.len() {
            return Err(ServiceError::invalid_turn(format!(
                "{placeholders} placeholders for {} images",
                input.images.len()
            )));
        }
        for piece in text.split(IMAGE_PLACEHOLDER) {
            engine
                .world
                .vocab()
                .tokenize(piece)
                .map_err(|e| ServiceError::invalid_turn(e.to_string()))?;
        }
        let uploads_before = self.uploads.len();
        let ids = match self.resolve_images(engine, &input.images) {
            Ok(ids) => ids,
            Err(e) => {
                self.uploads.truncate(uploads_before);
                self.store = None;
                return Err(e);
            }
        };
        let mut turn = Turn::user(text);
        turn.images = ids;

        let mut view = self.history.clone();
        view.push(turn.clone());
        let (prefix, truncated) = fit_context(engine, &view)?;
        let store = self.store(engine)?.clone();
        let out = decode_queries(&engine.model, &store, &[prefix], engine.max_new)?.remove(0);
        let reply = engine.world.vocab().detokenize(&out.tokens);

        self.history.push(turn);
        self.turns += 1;
        let response = if !out.forced || input.force_retrieval {
            let candidates: Vec<Candidate> = engine
                .gallery
                .rank(&engine.model, &out.query, engine.k)?
                .into_iter()
                .map(|(image_id, score)| Candidate { image_id, score })
                .collect();
            self.pending = Some(Pending {
                text: reply.clone(),
                candidates: candidates.clone(),
            });
            TurnResponse {
                text: reply,
                candidates,
                forced: out.forced,
                truncated_rounds: truncated,
                millis: 0.0,
            }
        } else {
            debug_assert!(out.stop != DecodeStop::Image);
            self.history.push(Turn::assistant(reply.clone()));
            TurnResponse {
                text: reply,
                candidates: Vec::new(),
                forced: false,
                truncated_rounds: truncated,
                millis: 0.0,
            }
        };
        let mut response = response;
        response.millis = started.elapsed().as_secs_f64() * 1e3;
        self.entries.push(TranscriptEntry {
            action: Action::UserTurn { input },
            response: Some(response.clone()),
        });
        Ok(response)
    }

    /// Appends the chosen candidate as the assistant's image answer.
    pub fn select(&mut self, image_id: ImageId) -> Result<(), ServiceError> {
        let Some(p) = &self.pending else {
            return Err(ServiceError::no_pending());
        };
        if !p.candidates.iter().any(|c| c.image_id == image_id) {
            return Err(ServiceError::not_a_candidate(image_id));
        }
        let text = format!("{} {IMAGE_PLACEHOLDER}", p.text).trim().to_string();
        self.history.push(Turn::assistant(text).with_image(image_id));
        self.pending = None;
        self.entries.push(TranscriptEntry {
            action: Action::Select { image_id },
            response: None,
        });
        Ok(())
    }

    /// Drops the candidates. The round closes with whatever text preceded
    /// `[IMG]` so roles keep alternating.
    pub fn dismiss(&mut self) -> Result<(), ServiceError> {
        let Some(p) = self.pending.take() else {
            return Err(ServiceError::no_pending());
        };
        self.history.push(Turn::assistant(p.text));
        self.entries.push(TranscriptEntry {
            action: Action::Dismiss,
            response: None,
        });
        Ok(())
    }
}

/// Packs `view` as a reply prompt, dropping the oldest whole rounds until
/// the prompt plus a query fits `max_seq`.
fn fit_context(engine: &Engine, view: &ChatDialogue) -> Result<(crate::sequence::PackedSequence, usize), ServiceError> {
    let max = engine.model.config.max_seq;
    let mut turns = view.turns.as_slice();
    let mut dropped = 0;
    loop {
        let d = ChatDialogue::new(turns.to_vec());
        let p = reply_prefix(&engine.model, engine.world.vocab(), &d);
        match p {
            Ok(p) if p.len() + 2 <= max => return Ok((p, dropped)),
            Ok(_) | Err(EvalError::Sequence(crate::sequence::SequenceError::Overlength { .. })) => {
                // A round is a user turn plus its reply.
                if turns.len() <= 1 {
                    return Err(ServiceError::invalid_turn(format!(
                        "turn alone does not fit max_seq {max}"
                    )));
                }
                let cut = turns[1..]
                    .iter()
                    .position(|t| t.role == Role::User)
                    .map(|i| i + 1)
                    .unwrap_or(turns.len());
                turns = &turns[cut..];
                dropped += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub turns: usize,
    /// Entry indices whose candidates (or text) differ from the record.
    pub mismatches: Vec<usize>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-runs a transcript in a fresh session and compares every reply.
pub fn replay(engine: &Engine, t: &Transcript) -> Result<ReplayReport, ServiceError> {
    let mut s = Session::new(format!("replay-{}", t.session_id));
    let mut mismatches = Vec::new();
    let mut turns = 0;
    for (i, e) in t.entries.iter().enumerate() {
        match &e.action {
            Action::UserTurn { input } => {
                turns += 1;
                let r = s.post_user_turn(engine, input.clone())?;
                let same = e.response.as_ref().is_some_and(|want| {
                    want.text == r.text && want.candidates == r.candidates && want.forced == r.forced
                });
                if !same {
                    mismatches.push(i);
                }
            }
            Action::Select { image_id } => s.select(*image_id)?,
            Action::Dismiss => s.dismiss()?,
        }
    }
    Ok(ReplayReport { turns, mismatches })
}
