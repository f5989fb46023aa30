//! C ABI over the retrieval engine and chat sessions.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `_free`. Every fallible call returns an [`ImgchatStatus`]; on failure the
//! message is available from [`imgchat_last_error`] on the same thread.
//! Strings returned through `out` parameters are NUL-terminated JSON and
//! must be released with [`imgchat_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use imgchat_core::objective::image_match_prob;
use imgchat_core::sequence::ImageId;
use imgchat_core::service::{replay, Engine, ServiceError, Session, Transcript, UserInput};
use imgchat_core::synthworld::read_benchmark;
use imgchat_core::trainer::load_checkpoint;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImgchatStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    Io = 4,
    NotFound = 5,
    /// The session is in the wrong state for the call.
    Conflict = 6,
    InvalidInput = 7,
    Internal = 8,
    Panic = 9,
}

/// Model, world, feature store and gallery index.
pub struct ImgchatEngine(Engine);

/// One conversation. Not thread-safe; serialize calls per session.
pub struct ImgchatSession(Session);

struct Failure(ImgchatStatus, String);

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        let status = match e.status() {
            404 => ImgchatStatus::NotFound,
            409 => ImgchatStatus::Conflict,
            400 => ImgchatStatus::InvalidInput,
            _ => ImgchatStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Outcome) -> ImgchatStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ImgchatStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            ImgchatStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ImgchatStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(ImgchatStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn json_arg<T: serde::de::DeserializeOwned>(p: *const c_char, what: &str) -> Result<T, Failure> {
    serde_json::from_str(str_arg(p, what)?).map_err(|e| Failure(ImgchatStatus::InvalidJson, format!("{what}: {e}")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put_json(out: *mut *mut c_char, v: &impl serde::Serialize) -> Outcome {
    if out.is_null() {
        return Err(null("out"));
    }
    let s = serde_json::to_string(v).map_err(|e| Failure(ImgchatStatus::Internal, e.to_string()))?;
    *out = CString::new(s).map_err(|e| Failure(ImgchatStatus::Internal, e.to_string()))?.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn imgchat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn imgchat_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a generated data directory and a checkpoint and index the
/// benchmark gallery. `k` is the number of candidates per retrieval.
///
/// # Safety
/// `data_dir` and `checkpoint` must be NUL-terminated strings; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn imgchat_engine_open(
    data_dir: *const c_char,
    checkpoint: *const c_char,
    k: usize,
    out: *mut *mut ImgchatEngine,
) -> ImgchatStatus {
    guard(|| {
        let dir = str_arg(data_dir, "data_dir")?;
        let ckpt = str_arg(checkpoint, "checkpoint")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let io = |e: &dyn std::fmt::Display| Failure(ImgchatStatus::Io, e.to_string());
        let (world, bench) = read_benchmark(Path::new(dir)).map_err(|e| io(&e))?;
        let model = load_checkpoint(Path::new(ckpt)).and_then(|c| c.model()).map_err(|e| io(&e))?;
        let store = world
            .feature_store(&model)
            .map_err(|e| Failure(ImgchatStatus::Internal, e.to_string()))?;
        let engine = Engine::new(model, world, store, &bench.gallery, k)?;
        *out = Box::into_raw(Box::new(ImgchatEngine(engine)));
        Ok(())
    })
}

/// # Safety
/// `engine` must be NULL or a handle from [`imgchat_engine_open`] with no
/// sessions still in use against it.
#[no_mangle]
pub unsafe extern "C" fn imgchat_engine_free(engine: *mut ImgchatEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Number of images in the indexed gallery, or 0 for NULL.
///
/// # Safety
/// `engine` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn imgchat_engine_gallery_size(engine: *const ImgchatEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.0.gallery.len())
}

/// # Safety
/// `id` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imgchat_session_new(id: *const c_char, out: *mut *mut ImgchatSession) -> ImgchatStatus {
    guard(|| {
        let id = str_arg(id, "id")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(ImgchatSession(Session::new(id))));
        Ok(())
    })
}

/// # Safety
/// `session` must be NULL or a handle from [`imgchat_session_new`].
#[no_mangle]
pub unsafe extern "C" fn imgchat_session_free(session: *mut ImgchatSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Post a user turn. `input_json` has the shape of the HTTP turn body:
/// `{"text": ..., "images": [...], "force_retrieval": bool}`. On success
/// `*out_json` receives the turn response.
///
/// # Safety
/// Handles must be live; `input_json` NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn imgchat_session_post_turn(
    engine: *const ImgchatEngine,
    session: *mut ImgchatSession,
    input_json: *const c_char,
    out_json: *mut *mut c_char,
) -> ImgchatStatus {
    guard(|| {
        let engine = ref_arg(engine, "engine")?;
        let session = mut_arg(session, "session")?;
        let input: UserInput = json_arg(input_json, "input_json")?;
        let r = session.0.post_user_turn(&engine.0, input)?;
        put_json(out_json, &r)
    })
}

/// Accept one of the pending candidates.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn imgchat_session_select(session: *mut ImgchatSession, image_id: u32) -> ImgchatStatus {
    guard(|| {
        mut_arg(session, "session")?.0.select(ImageId(image_id))?;
        Ok(())
    })
}

/// Reject all pending candidates.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn imgchat_session_dismiss(session: *mut ImgchatSession) -> ImgchatStatus {
    guard(|| {
        mut_arg(session, "session")?.0.dismiss()?;
        Ok(())
    })
}

/// 1 while candidates await selection, 0 otherwise or for NULL.
///
/// # Safety
/// `session` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn imgchat_session_awaiting_selection(session: *const ImgchatSession) -> i32 {
    session.as_ref().map_or(0, |s| s.0.pending.is_some() as i32)
}

/// # Safety
/// Handles must be live; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn imgchat_session_transcript(
    engine: *const ImgchatEngine,
    session: *const ImgchatSession,
    out_json: *mut *mut c_char,
) -> ImgchatStatus {
    guard(|| {
        let engine = ref_arg(engine, "engine")?;
        let session = ref_arg(session, "session")?;
        put_json(out_json, &session.0.transcript(&engine.0))
    })
}

/// Re-run a transcript against `engine`. `*out_mismatches` receives the
/// number of user turns whose response differs from the recording.
///
/// # Safety
/// `engine` must be live; `transcript_json` NUL-terminated;
/// `out_mismatches` writable.
#[no_mangle]
pub unsafe extern "C" fn imgchat_replay(
    engine: *const ImgchatEngine,
    transcript_json: *const c_char,
    out_mismatches: *mut usize,
) -> ImgchatStatus {
    guard(|| {
        let engine = ref_arg(engine, "engine")?;
        let t: Transcript = json_arg(transcript_json, "transcript_json")?;
        if out_mismatches.is_null() {
            return Err(null("out_mismatches"));
        }
        *out_mismatches = replay(&engine.0, &t)?.mismatches.len();
        Ok(())
    })
}

/// Softmax over `queue_sims` followed by `pos_sim` at temperature `tau`.
/// Writes `n_queue + 1` probabilities to `out`, positive last.
///
/// # Safety
/// `queue_sims` must hold `n_queue` doubles (may be NULL when zero) and
/// `out` must have room for `n_queue + 1`.
#[no_mangle]
pub unsafe extern "C" fn imgchat_image_match_prob(
    queue_sims: *const f64,
    n_queue: usize,
    pos_sim: f64,
    tau: f64,
    out: *mut f64,
) -> ImgchatStatus {
    guard(|| {
        if queue_sims.is_null() && n_queue > 0 {
            return Err(null("queue_sims"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let q = if n_queue == 0 { &[][..] } else { std::slice::from_raw_parts(queue_sims, n_queue) };
        let p = image_match_prob(q, Some(pos_sim), tau).map_err(|e| Failure(ImgchatStatus::InvalidInput, e.to_string()))?;
        std::ptr::copy_nonoverlapping(p.as_ptr(), out, p.len());
        Ok(())
    })
}
