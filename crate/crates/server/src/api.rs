//! HTTP routes. Request and response bodies are JSON except the raw PNG
//! returned by `GET /images/{id}`; masks travel in run-length form.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::error::ApiError;
use crate::session::{LabelRequest, NewConcept, QueryRequest, RegionRequest, Session};

type Shared = Arc<Session>;
type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(session: Shared) -> Router {
    Router::new()
        .route("/images", get(list_images))
        .route("/images/{id}", get(image_png))
        .route("/images/{id}/patches", get(image_patches))
        .route("/patches/{id}/select", post(select_patch))
        .route("/patches/{id}/query", post(query_patch))
        .route("/patches/{id}/report/activation", get(activation_report))
        .route("/patches/{id}/report/region", post(region_report))
        .route("/neurons/{layer}/{channel}", get(neuron))
        .route("/embedding", get(embedding))
        .route("/concepts", get(list_concepts).post(create_concept))
        .route("/labels", post(label_neurons))
        .fallback(unknown_route)
        .method_not_allowed_fallback(wrong_method)
        .with_state(session)
}

/// Runs `f` on the blocking pool; inference can take a while on real models.
async fn blocking<T, F>(session: Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Session) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&session))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::validation(e.body_text()))
}

async fn unknown_route() -> ApiError {
    ApiError::not_found("no such endpoint")
}

async fn wrong_method() -> Response {
    let err = ApiError::validation("method not allowed for this endpoint");
    (StatusCode::METHOD_NOT_ALLOWED, Json(err)).into_response()
}

async fn list_images(State(s): State<Shared>) -> ApiResult<crate::session::ImagesResponse> {
    Ok(Json(s.images()))
}

async fn image_png(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let bytes = blocking(s, move |s| s.image_png(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn image_patches(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<crate::session::PatchesResponse> {
    blocking(s, move |s| s.patches(&id)).await.map(Json)
}

async fn select_patch(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<crate::session::SelectResponse> {
    blocking(s, move |s| s.select(&id)).await.map(Json)
}

async fn query_patch(
    State(s): State<Shared>,
    Path(id): Path<String>,
    payload: Result<Json<QueryRequest>, JsonRejection>,
) -> ApiResult<crate::session::QueryResponse> {
    let request = body(payload)?;
    blocking(s, move |s| s.query(&id, &request)).await.map(Json)
}

async fn activation_report(
    State(s): State<Shared>,
    Path(id): Path<String>,
) -> ApiResult<dissect_core::concepts::ConceptReport> {
    blocking(s, move |s| s.activation_report(&id)).await.map(Json)
}

async fn region_report(
    State(s): State<Shared>,
    Path(id): Path<String>,
    payload: Result<Json<RegionRequest>, JsonRejection>,
) -> ApiResult<dissect_core::concepts::ConceptReport> {
    let request = body(payload)?;
    blocking(s, move |s| s.region_report(&id, &request)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct NeuronParams {
    patch_id: Option<String>,
    k: Option<usize>,
}

async fn neuron(
    State(s): State<Shared>,
    Path((layer, channel)): Path<(String, String)>,
    params: Result<Query<NeuronParams>, QueryRejection>,
) -> ApiResult<crate::session::NeuronResponse> {
    let Query(params) = params.map_err(|e| ApiError::validation(e.body_text()))?;
    let (Ok(layer), Ok(channel)) = (layer.parse::<usize>(), channel.parse::<usize>()) else {
        return Err(ApiError::not_found(format!("unknown neuron {layer}/{channel}")));
    };
    blocking(s, move |s| {
        s.neuron(layer, channel, params.patch_id.as_deref(), params.k)
    })
    .await
    .map(Json)
}

async fn embedding(State(s): State<Shared>) -> ApiResult<crate::session::EmbeddingResponse> {
    Ok(Json(s.embedding()))
}

async fn list_concepts(State(s): State<Shared>) -> ApiResult<crate::session::ConceptsResponse> {
    Ok(Json(s.concepts()))
}

async fn create_concept(
    State(s): State<Shared>,
    payload: Result<Json<NewConcept>, JsonRejection>,
) -> Result<Response, ApiError> {
    let request = body(payload)?;
    let view = blocking(s, move |s| s.create_concept(&request)).await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn label_neurons(
    State(s): State<Shared>,
    payload: Result<Json<LabelRequest>, JsonRejection>,
) -> ApiResult<crate::session::ConceptView> {
    let request = body(payload)?;
    blocking(s, move |s| s.label(&request)).await.map(Json)
}
