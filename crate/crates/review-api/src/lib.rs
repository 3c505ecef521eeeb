//! Blind expert review of extraction outputs over REST.
//!
//! Evaluators authenticate with a bearer token, list and read anonymized
//! items, and submit a five-category rubric per item. Admins ingest run
//! manifests and export all evaluations, unblinded, as CSV.

pub mod auth;
pub mod ingest;
pub mod model;
pub mod store;

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use villa_core::pipeline::RunManifest;

use crate::auth::{Principal, Role, Tokens};
use crate::ingest::items_from_manifest;
use crate::model::{Category, Evaluation, ItemView, Status, Submission};
use crate::store::{ReviewStore, StoreError};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<ReviewStore>,
    pub tokens: Arc<Tokens>,
}

impl AppState {
    pub fn new(store: ReviewStore, tokens: Tokens) -> Self {
        Self {
            store: Arc::new(store),
            tokens: Arc::new(tokens),
        }
    }
}

#[derive(Debug)]
pub enum ApiError {
    Unauthorized,
    Forbidden,
    NotFound(String),
    BadRequest(String),
    Unprocessable { category: Option<String>, message: String },
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, json!({"error": "missing or unknown bearer token"})),
            ApiError::Forbidden => (StatusCode::FORBIDDEN, json!({"error": "admin role required"})),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, json!({"error": m})),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, json!({"error": m})),
            ApiError::Unprocessable { category, message } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": message, "category": category}),
            ),
            ApiError::Internal(m) => {
                tracing::error!("{m}");
                (StatusCode::INTERNAL_SERVER_ERROR, json!({"error": m}))
            }
        };
        (status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl FromRequestParts<AppState> for Principal {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let header = parts.headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
        state.tokens.authenticate(header).ok_or(ApiError::Unauthorized)
    }
}

fn require_admin(p: &Principal) -> Result<(), ApiError> {
    match p.role {
        Role::Admin => Ok(()),
        Role::Evaluator => Err(ApiError::Forbidden),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/items", get(list_items))
        .route("/items/{id}", get(get_item))
        .route("/items/{id}/evaluation", put(submit_evaluation))
        .route("/admin/items", post(ingest_manifest))
        .route("/admin/export.csv", get(export_csv))
        .with_state(state)
}

/// Serve until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let (items, evaluations) = state.store.counts();
    Json(json!({"status": "ok", "items": items, "evaluations": evaluations}))
}

#[derive(Debug, Deserialize)]
pub struct ListParams {
    virus: Option<String>,
    protein: Option<String>,
    status: Option<String>,
    sort: Option<String>,
    order: Option<String>,
    page: Option<usize>,
    per_page: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ItemList {
    pub items: Vec<ItemView>,
    /// Items matching the filters, across all pages.
    pub total: usize,
    /// Of those, how many the caller has completed.
    pub completed: usize,
    pub page: usize,
    pub per_page: usize,
}

const MAX_PER_PAGE: usize = 500;

async fn list_items(
    principal: Principal,
    State(state): State<AppState>,
    Query(params): Query<ListParams>,
) -> Result<Json<ItemList>, ApiError> {
    let status: Option<Status> = params
        .status
        .as_deref()
        .map(str::parse)
        .transpose()
        .map_err(ApiError::BadRequest)?;
    let sort = params.sort.as_deref().unwrap_or("item_id");
    let key: fn(&ItemView) -> (&str, &str) = match sort {
        "item_id" => |v| (&v.item_id, ""),
        "protein" => |v| (&v.protein, &v.item_id),
        "virus" => |v| (&v.virus, &v.item_id),
        other => {
            return Err(ApiError::BadRequest(format!(
                "unknown sort key {other:?}; expected item_id, protein or virus"
            )))
        }
    };
    let descending = match params.order.as_deref().unwrap_or("asc") {
        "asc" => false,
        "desc" => true,
        other => return Err(ApiError::BadRequest(format!("unknown order {other:?}; expected asc or desc"))),
    };
    let page = params.page.unwrap_or(1);
    let per_page = params.per_page.unwrap_or(50);
    if page == 0 || per_page == 0 || per_page > MAX_PER_PAGE {
        return Err(ApiError::BadRequest(format!(
            "page must be >= 1 and per_page in 1..={MAX_PER_PAGE}"
        )));
    }

    let done = state.store.completed_by(&principal.evaluator_id);
    let mut views: Vec<ItemView> = state
        .store
        .items()
        .iter()
        .filter(|i| params.virus.as_ref().is_none_or(|v| &i.virus == v))
        .filter(|i| params.protein.as_ref().is_none_or(|p| &i.protein == p))
        .map(|i| {
            let s = if done.contains(&i.item_id) { Status::Completed } else { Status::Pending };
            ItemView::new(i, s)
        })
        .filter(|v| status.is_none_or(|s| v.status == s))
        .collect();
    views.sort_by(|a, b| key(a).cmp(&key(b)));
    if descending {
        views.reverse();
    }
    let total = views.len();
    let completed = views.iter().filter(|v| v.status == Status::Completed).count();
    let items = views.into_iter().skip((page - 1) * per_page).take(per_page).collect();
    Ok(Json(ItemList {
        items,
        total,
        completed,
        page,
        per_page,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ItemDetail {
    pub item: ItemView,
    /// The caller's own evaluation; other evaluators' scores are never shown.
    pub evaluation: Option<Evaluation>,
}

async fn get_item(
    principal: Principal,
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<ItemDetail>, ApiError> {
    let item = state
        .store
        .item(&id)
        .ok_or_else(|| ApiError::NotFound(format!("no item {id:?}")))?;
    let evaluation = state.store.evaluation(&id, &principal.evaluator_id);
    let status = if evaluation.is_some() { Status::Completed } else { Status::Pending };
    Ok(Json(ItemDetail {
        item: ItemView::new(&item, status),
        evaluation,
    }))
}

async fn submit_evaluation(
    principal: Principal,
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Evaluation>, ApiError> {
    if state.store.item(&id).is_none() {
        return Err(ApiError::NotFound(format!("no item {id:?}")));
    }
    let submission: Submission = serde_json::from_slice(&body).map_err(|e| ApiError::Unprocessable {
        category: None,
        message: format!("invalid evaluation body: {e}"),
    })?;
    let scores = submission.validate().map_err(|e| ApiError::Unprocessable {
        category: e.category,
        message: e.message,
    })?;
    let evaluation = Evaluation {
        item_id: id,
        evaluator_id: principal.evaluator_id,
        scores,
        comment: submission.comment.filter(|c| !c.is_empty()),
        submitted_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
    };
    let store = Arc::clone(&state.store);
    let stored = evaluation.clone();
    tokio::task::spawn_blocking(move || store.submit(stored))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(evaluation))
}

async fn ingest_manifest(
    principal: Principal,
    State(state): State<AppState>,
    body: Bytes,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    require_admin(&principal)?;
    let manifest: RunManifest = serde_json::from_slice(&body).map_err(|e| ApiError::Unprocessable {
        category: None,
        message: format!("invalid run manifest: {e}"),
    })?;
    let items = items_from_manifest(&manifest, &state.store.salt());
    let ids: Vec<String> = items.iter().map(|i| i.item_id.clone()).collect();
    let store = Arc::clone(&state.store);
    tokio::task::spawn_blocking(move || store.upsert_items(items))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(json!({"created": ids.len(), "item_ids": ids}))))
}

pub const EXPORT_COLUMNS: [&str; 13] = [
    "item_id",
    "evaluator_id",
    "clarity",
    "conciseness",
    "correctness",
    "citations_context",
    "contribution",
    "comment",
    "submitted_at",
    "method",
    "model",
    "virus",
    "protein",
];

async fn export_csv(principal: Principal, State(state): State<AppState>) -> Result<Response, ApiError> {
    require_admin(&principal)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| ApiError::Internal(e.to_string());
    w.write_record(EXPORT_COLUMNS).map_err(csv_err)?;
    for ev in state.store.evaluations() {
        let item = state.store.item(&ev.item_id);
        let mut row = vec![ev.item_id.clone(), ev.evaluator_id.clone()];
        row.extend(Category::ALL.iter().map(|c| ev.scores.get(c).map(u8::to_string).unwrap_or_default()));
        row.push(ev.comment.clone().unwrap_or_default());
        row.push(ev.submitted_at.clone());
        for field in [
            |i: &model::ReviewItem| i.method.clone(),
            |i: &model::ReviewItem| i.model.clone(),
            |i: &model::ReviewItem| i.virus.clone(),
            |i: &model::ReviewItem| i.protein.clone(),
        ] {
            row.push(item.as_ref().map(field).unwrap_or_default());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8"),
            (header::CONTENT_DISPOSITION, "attachment; filename=\"evaluations.csv\""),
        ],
        bytes,
    )
        .into_response())
}
