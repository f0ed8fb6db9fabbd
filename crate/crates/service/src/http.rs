//! JSON HTTP API over a [`Manager`].
//!
//! ```text
//! POST /api/jobs                 multipart: file, options → 202 {job_id, state}
//! GET  /api/jobs                 job summaries
//! GET  /api/jobs/{id}            state, error, verdict once done
//! GET  /api/jobs/{id}/result     full AnalysisResult (409 NotReady)
//! GET  /api/jobs/{id}/track      temporal series (409 NotReady)
//! GET  /api/jobs/{id}/modalities per-modality breakdown (409 NotReady)
//! GET  /api/healthz
//! ```

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::manager::Manager;
use crate::multipart;
use crate::result::TrackPoint;
use crate::store::{AnalysisJob, JobOptions};
use crate::ServiceError;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownJob(_) => StatusCode::NOT_FOUND,
            ServiceError::NotReady { .. } => StatusCode::CONFLICT,
            ServiceError::TooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            ServiceError::TooLong { .. } | ServiceError::UnreadableMedia(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.kind(), "message": self.to_string() });
        if let ServiceError::NotReady { state, .. } = &self {
            body["state"] = json!(state);
        }
        (status, Json(body)).into_response()
    }
}

/// State payload; result fields appear only once the job is done.
#[derive(Serialize)]
struct JobView {
    #[serde(flatten)]
    job: AnalysisJob,
    #[serde(skip_serializing_if = "Option::is_none")]
    video_verdict: Option<mseva_model::FusedPrediction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    segment_count: Option<usize>,
}

type Api = Arc<Manager>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e.to_string())))?
}

async fn healthz(State(m): State<Api>) -> Json<serde_json::Value> {
    let e = m.engine();
    Json(json!({
        "status": "ok",
        "asr_backend": e.asr.name(),
        "face_detector": e.detector.name(),
        "text_backend": mseva_model::TextBackend::name(&e.text),
        "class_names": e.model.config().class_names,
        "fusion_weights": e.model.fusion_weights(),
    }))
}

fn parse_options(data: &[u8]) -> Result<JobOptions, ServiceError> {
    if data.iter().all(u8::is_ascii_whitespace) {
        return Ok(JobOptions::default());
    }
    serde_json::from_slice(data).map_err(|e| ServiceError::BadRequest(format!("options: {e}")))
}

async fn submit(State(m): State<Api>, headers: HeaderMap, body: Bytes) -> Result<Response, ServiceError> {
    let ct = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .ok_or_else(|| ServiceError::BadRequest("missing Content-Type".into()))?
        .to_string();
    let job = blocking(move || {
        let parts = multipart::parse(&ct, &body).map_err(ServiceError::BadRequest)?;
        let mut options = JobOptions::default();
        let mut file = None;
        for p in parts {
            match p.name.as_str() {
                "file" => file = Some((p.filename.unwrap_or_else(|| "upload".into()), p.data)),
                "options" => options = parse_options(&p.data)?,
                "language_hint" => {
                    options.language_hint = Some(String::from_utf8_lossy(&p.data).trim().to_string())
                }
                "allow_long" => options.allow_long = matches!(String::from_utf8_lossy(&p.data).trim(), "true" | "1"),
                _ => {}
            }
        }
        let (name, data) = file.ok_or_else(|| ServiceError::BadRequest("missing \"file\" part".into()))?;
        m.submit_bytes(&name, &data, options)
    })
    .await?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "job_id": job.job_id, "state": job.state })),
    )
        .into_response())
}

async fn list_jobs(State(m): State<Api>) -> Result<Json<Vec<AnalysisJob>>, ServiceError> {
    Ok(Json(blocking(move || m.jobs()).await?))
}

async fn job(State(m): State<Api>, Path(id): Path<String>) -> Result<Json<JobView>, ServiceError> {
    blocking(move || {
        let job = m.job(&id)?;
        let result = match job.result_ref {
            Some(_) => Some(m.result(&id)?),
            None => None,
        };
        Ok(Json(JobView {
            job,
            segment_count: result.as_ref().map(|r| r.track.len()),
            video_verdict: result.map(|r| r.video_verdict),
        }))
    })
    .await
}

async fn result(State(m): State<Api>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let r = blocking(move || m.result(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], r.to_json_bytes()).into_response())
}

#[derive(Serialize)]
struct TrackView {
    job_id: String,
    class_names: Vec<String>,
    points: Vec<TrackPoint>,
}

async fn track(State(m): State<Api>, Path(id): Path<String>) -> Result<Json<TrackView>, ServiceError> {
    let r = blocking(move || m.result(&id)).await?;
    Ok(Json(TrackView {
        points: r.track_points(),
        job_id: r.job_id,
        class_names: r.class_names,
    }))
}

async fn modalities(State(m): State<Api>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let r = blocking(move || m.result(&id)).await?;
    Ok(Json(r.modalities()).into_response())
}

pub fn router(manager: Arc<Manager>) -> Router {
    let limit = manager.engine().config.service.max_upload_bytes as usize;
    Router::new()
        .route("/api/healthz", get(healthz))
        .route("/api/jobs", post(submit).get(list_jobs))
        .route("/api/jobs/{id}", get(job))
        .route("/api/jobs/{id}/result", get(result))
        .route("/api/jobs/{id}/track", get(track))
        .route("/api/jobs/{id}/modalities", get(modalities))
        // Room for multipart framing around a maximum-size file.
        .layer(DefaultBodyLimit::max(limit.saturating_add(64 * 1024)))
        .layer(CorsLayer::permissive())
        .with_state(manager)
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, manager: Arc<Manager>) -> std::io::Result<()> {
    axum::serve(listener, router(manager))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
