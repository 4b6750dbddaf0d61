//! JSON over HTTP front end for [`Teacher`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use pnp_core::geometry::{CameraModel, PoseSE2};
use pnp_core::numerics::Grid;
use pnp_core::scene::{encode_observation, Task};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeachError};
use crate::session::{Correction, ExecReport, Source, Status, Target, Teacher, TestRow};

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for TeachError {
    fn into_response(self) -> Response {
        let status = match self.code() {
            "not_found" => StatusCode::NOT_FOUND,
            "phase_mismatch" => StatusCode::CONFLICT,
            "out_of_bounds" => StatusCode::UNPROCESSABLE_ENTITY,
            "bad_request" => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NewSession {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    pub camera: CameraModel,
    /// Base64 PNG of the RGB channels.
    pub rgb_png: String,
    /// Base64 of the full RGB-D raster in the dataset's OBS1 encoding.
    pub obs1: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProposeRequest {
    /// `pick` or `place`; the phase names `await_pick` and `await_place`
    /// are accepted too.
    pub phase: Target,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Proposal {
    pub target: Target,
    pub pose: PoseSE2,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorrectRequest {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub source: Source,
}

/// Poses to execute instead of the models' proposals.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ExecuteRequest {
    pub pick: Option<PoseSE2>,
    pub place: Option<PoseSE2>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TestQuery {
    #[serde(default = "default_scenes")]
    pub scenes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_scenes() -> usize {
    20
}

/// RGB8 PNG of an observation's colour channels.
pub fn encode_png(obs: &Grid) -> Result<Vec<u8>> {
    let (h, w, c) = obs.hwc()?;
    let rgb: Vec<u8> = obs
        .values()
        .chunks_exact(c)
        .flat_map(|px| px[..3].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| TeachError::Core(pnp_core::Error::Format(e.to_string()));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(out)
}

type Shared = State<Arc<Teacher>>;

fn body<T>(r: std::result::Result<Json<T>, JsonRejection>) -> Result<T> {
    r.map(|Json(v)| v).map_err(|e| TeachError::BadRequest(e.body_text()))
}

/// Runs blocking teacher work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| TeachError::Io(std::io::Error::other(e.to_string())))?
}

async fn create(
    State(t): Shared,
    req: std::result::Result<Json<NewSession>, JsonRejection>,
) -> Result<(StatusCode, Json<Status>)> {
    let req = body(req)?;
    let status = blocking(move || t.new_session(req.task, req.seed)).await?;
    Ok((StatusCode::CREATED, Json(status)))
}

async fn list(State(t): Shared) -> Json<Vec<String>> {
    Json(t.session_ids())
}

async fn status(State(t): Shared, Path(id): Path<String>) -> Result<Json<Status>> {
    Ok(Json(t.status(&id)?))
}

async fn observation(State(t): Shared, Path(id): Path<String>) -> Result<Json<Observation>> {
    let obs = t.observation(&id)?;
    let camera = t.config().camera();
    let out = blocking(move || {
        Ok(Observation {
            width: camera.width,
            height: camera.height,
            camera,
            rgb_png: B64.encode(encode_png(&obs)?),
            obs1: B64.encode(encode_observation(&obs)?),
        })
    })
    .await?;
    Ok(Json(out))
}

async fn propose(
    State(t): Shared,
    Path(id): Path<String>,
    req: std::result::Result<Json<ProposeRequest>, JsonRejection>,
) -> Result<Json<Proposal>> {
    let target = body(req)?.phase;
    let pose = blocking(move || t.propose(&id, target)).await?;
    Ok(Json(Proposal { target, pose }))
}

async fn correct(
    State(t): Shared,
    Path(id): Path<String>,
    req: std::result::Result<Json<CorrectRequest>, JsonRejection>,
) -> Result<Json<Status>> {
    let r = body(req)?;
    let c = Correction {
        pose: PoseSE2::new(r.x, r.y, r.theta),
        source: r.source,
    };
    Ok(Json(blocking(move || t.correct(&id, c)).await?))
}

async fn record(State(t): Shared, Path(id): Path<String>) -> Result<(StatusCode, Json<Status>)> {
    let status = blocking(move || t.record(&id)).await?;
    Ok((StatusCode::ACCEPTED, Json(status)))
}

async fn exec(State(t): Shared, Path(id): Path<String>, raw: Bytes) -> Result<Json<ExecReport>> {
    let req: ExecuteRequest = if raw.iter().all(u8::is_ascii_whitespace) {
        ExecuteRequest::default()
    } else {
        serde_json::from_slice(&raw).map_err(|e| TeachError::BadRequest(e.to_string()))?
    };
    let poses = match (req.pick, req.place) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => None,
        _ => return Err(TeachError::BadRequest("give both pick and place or neither".into())),
    };
    Ok(Json(blocking(move || t.execute(&id, poses)).await?))
}

async fn test(
    State(t): Shared,
    Path(id): Path<String>,
    q: std::result::Result<Query<TestQuery>, QueryRejection>,
) -> Result<Json<Vec<TestRow>>> {
    let Query(q) = q.map_err(|e| TeachError::BadRequest(e.body_text()))?;
    Ok(Json(blocking(move || t.test(&id, q.scenes, q.seed)).await?))
}

pub fn router(teacher: Arc<Teacher>) -> Router {
    Router::new()
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", get(status))
        .route("/sessions/{id}/status", get(status))
        .route("/sessions/{id}/observation", get(observation))
        .route("/sessions/{id}/propose", post(propose))
        .route("/sessions/{id}/correct", post(correct))
        .route("/sessions/{id}/record", post(record))
        .route("/sessions/{id}/execute", post(exec))
        .route("/sessions/{id}/test", get(test))
        .with_state(teacher)
}

/// Serves until Ctrl-C.
pub async fn serve(teacher: Arc<Teacher>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(teacher))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
