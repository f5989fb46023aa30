use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use super::{replay, ServiceError, SessionService, Transcript, UserInput};
use crate::sequence::ImageId;
use crate::synthworld::{Attr, World};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}

type Shared = Arc<SessionService>;
type Reply = Result<Response, ServiceError>;

fn body<T>(b: Result<Json<T>, JsonRejection>) -> Result<T, ServiceError> {
    b.map(|Json(v)| v).map_err(|e| ServiceError::bad_request(e.body_text()))
}

/// Runs CPU-bound session work off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::internal(e.to_string()))?
}

async fn create(State(svc): State<Shared>) -> Reply {
    let v = svc.create()?;
    Ok((StatusCode::CREATED, Json(v)).into_response())
}

async fn show(State(svc): State<Shared>, Path(id): Path<String>) -> Reply {
    Ok(Json(svc.get(&id)?).into_response())
}

async fn turn(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    b: Result<Json<UserInput>, JsonRejection>,
) -> Reply {
    let input = body(b)?;
    let r = blocking(move || svc.post_turn(&id, input)).await?;
    Ok(Json(r).into_response())
}

#[derive(Deserialize)]
struct SelectBody {
    image_id: ImageId,
}

async fn select(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    b: Result<Json<SelectBody>, JsonRejection>,
) -> Reply {
    let SelectBody { image_id } = body(b)?;
    Ok(Json(svc.select(&id, image_id)?).into_response())
}

async fn dismiss(State(svc): State<Shared>, Path(id): Path<String>) -> Reply {
    Ok(Json(svc.dismiss(&id)?).into_response())
}

async fn transcript(State(svc): State<Shared>, Path(id): Path<String>) -> Reply {
    Ok(Json(svc.transcript(&id)?).into_response())
}

async fn run_replay(State(svc): State<Shared>, b: Result<Json<Transcript>, JsonRejection>) -> Reply {
    let t = body(b)?;
    let r = blocking(move || replay(&svc.engine, &t)).await?;
    Ok(Json(r).into_response())
}

pub(crate) fn image_card(world: &World, id: ImageId, in_gallery: bool) -> Option<serde_json::Value> {
    let img = world.get_image(id)?;
    let attrs: serde_json::Map<String, serde_json::Value> = Attr::ALL
        .iter()
        .map(|&a| (a.name().to_string(), json!(world.value_word(a, img.get(a)))))
        .collect();
    Some(json!({
        "image_id": id,
        "attributes": attrs,
        "caption": world.caption(img),
        "in_gallery": in_gallery,
    }))
}

async fn gallery_item(State(svc): State<Shared>, Path(image_id): Path<u32>) -> Reply {
    let id = ImageId(image_id);
    let e = &svc.engine;
    let card = image_card(&e.world, id, e.gallery.contains(id)).ok_or_else(|| ServiceError::image_not_found(id))?;
    Ok(Json(card).into_response())
}

async fn gallery_list(State(svc): State<Shared>) -> Reply {
    Ok(Json(json!({ "image_ids": svc.engine.gallery.ids(), "k": svc.engine.k })).into_response())
}

async fn sessions(State(svc): State<Shared>) -> Reply {
    Ok(Json(json!({ "session_ids": svc.session_ids() })).into_response())
}

pub fn router(svc: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create).get(sessions))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/turns", post(turn))
        .route("/sessions/{id}/select", post(select))
        .route("/sessions/{id}/dismiss", post(dismiss))
        .route("/sessions/{id}/transcript", get(transcript))
        .route("/transcripts/replay", post(run_replay))
        .route("/gallery", get(gallery_list))
        .route("/gallery/{image_id}", get(gallery_item))
        .with_state(svc)
}
