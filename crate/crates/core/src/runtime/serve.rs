//! JSON-over-HTTP scoring from the store and a checkpoint. The serving
//! state holds no graph, so a store miss is answered from the cold path.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::store::ExpansionStore;
use crate::error::{Error, Result};
use crate::ingest::FeatureTable;
use crate::metapath::Metapath;
use crate::model::{Checkpoint, Example, GtrParams, Neighborhoods};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub user_id: String,
    pub author_id: String,
    pub segment_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub gtr: f64,
    pub latency_us: u64,
    /// The user id has no base embedding and shares the cold row.
    pub cold_user: bool,
    pub cold_author: bool,
    /// Whether the store held a record for each metapath.
    pub store_hits: BTreeMap<String, bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub kind: String,
}

/// Immutable state shared by request handlers.
#[derive(Debug)]
pub struct ScoringState {
    params: GtrParams<f32>,
    neighborhoods: Neighborhoods,
    features: FeatureTable,
    build_id: String,
}

impl ScoringState {
    pub fn new(store: &ExpansionStore, checkpoint: Checkpoint, features: FeatureTable) -> Result<Self> {
        let params = checkpoint.params;
        store.check_universe(params.theta_users(), params.theta_authors())?;
        match checkpoint.store_build_id.as_deref() {
            Some(id) if id == store.build_id() => {}
            Some(id) => log::warn!(
                "checkpoint was trained against store {id}, serving store {}; aggregates may be stale",
                store.build_id()
            ),
            None => log::warn!("checkpoint carries no store build id"),
        }
        Ok(Self {
            params,
            neighborhoods: store.neighborhoods(),
            features,
            build_id: store.build_id().to_string(),
        })
    }

    pub fn params(&self) -> &GtrParams<f32> {
        &self.params
    }

    pub fn build_id(&self) -> &str {
        &self.build_id
    }

    pub fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        let start = Instant::now();
        let features = self
            .features
            .get(&req.segment_id)
            .ok_or_else(|| Error::UnknownSegment(req.segment_id.clone()))?;
        let ex = Example {
            user_id: &req.user_id,
            author_id: &req.author_id,
            features,
            user_side: self.neighborhoods.user(&req.user_id),
            author_side: self.neighborhoods.author(&req.author_id),
            label: 0,
        };
        let gtr = self.params.predict(&ex)? as f64;
        let user_hit = self.neighborhoods.has_user(&req.user_id);
        let author_hit = self.neighborhoods.has_author(&req.author_id);
        let store_hits = Metapath::ALL
            .iter()
            .map(|m| (m.name().to_string(), if m.starts_at_user() { user_hit } else { author_hit }))
            .collect();
        Ok(ScoreResponse {
            gtr,
            latency_us: start.elapsed().as_micros() as u64,
            cold_user: self.params.is_cold_user(&req.user_id),
            cold_author: self.params.is_cold_author(&req.author_id),
            store_hits,
        })
    }
}

struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            Error::UnknownSegment(_) => (StatusCode::NOT_FOUND, "unknown_segment"),
            Error::Dimension { .. } | Error::InvalidValue(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_input"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = ErrorBody {
            error: self.0.to_string(),
            kind: kind.into(),
        };
        (status, Json(body)).into_response()
    }
}

async fn score(State(state): State<Arc<ScoringState>>, Json(req): Json<ScoreRequest>) -> std::result::Result<Json<ScoreResponse>, ApiError> {
    state.score(&req).map(Json).map_err(ApiError)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

/// `POST /score` and `GET /healthz`.
pub fn router(state: Arc<ScoringState>) -> Router {
    Router::new()
        .route("/score", post(score))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Binds and serves until the process receives ctrl-c.
pub async fn serve(state: Arc<ScoringState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
