use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use vcnet_core::io::encode_png_gray8;
use vcnet_core::mip::MipKind;

use crate::error::{LabelError, Result};
use crate::session::{BrushMode, Connectivity, LabelSession, Overlay, View};

pub type Shared = Arc<RwLock<LabelSession>>;

fn read(s: &Shared) -> RwLockReadGuard<'_, LabelSession> {
    s.read().unwrap_or_else(|e| e.into_inner())
}

fn write(s: &Shared) -> RwLockWriteGuard<'_, LabelSession> {
    s.write().unwrap_or_else(|e| e.into_inner())
}

fn bad<E: std::fmt::Display>(e: E) -> LabelError {
    LabelError::BadRequest(e.to_string())
}

pub fn router(session: LabelSession) -> Router {
    router_shared(Arc::new(RwLock::new(session)))
}

pub fn router_shared(state: Shared) -> Router {
    Router::new()
        .route("/api/info", get(info))
        .route("/api/slice/{z}", get(slice))
        .route("/api/mip", get(mip))
        .route("/api/label/slice/{z}", get(label_slice))
        .route("/api/brush", post(brush))
        .route("/api/flood", post(flood))
        .route("/api/undo", post(undo))
        .route("/api/redo", post(redo))
        .route("/api/points3d", get(points3d))
        .route("/api/save", post(save))
        .fallback(|| async { LabelError::NotFound("no such endpoint".into()) })
        .with_state(state)
}

/// Loads one session and serves it until interrupted.
pub async fn serve(volume: &Path, mask: &Path, addr: SocketAddr) -> Result<()> {
    let session = LabelSession::open(volume, mask)?;
    let dims = session.volume().dims();
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| vcnet_core::CoreError::io(format!("bind {addr}"), e))?;
    tracing::info!(?dims, %addr, "label service listening");
    axum::serve(listener, router(session))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| vcnet_core::CoreError::io(format!("serve {addr}"), e))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Info {
    pub session: String,
    /// `[rows, cols, slices]`.
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub intensity: [f32; 2],
    pub labeled: usize,
    pub dirty: bool,
    pub undo_depth: usize,
    pub redo_depth: usize,
}

async fn info(State(s): State<Shared>) -> Json<Info> {
    let s = read(&s);
    let (lo, hi) = s.volume().min_max();
    Json(Info {
        session: s.id().into(),
        dims: s.volume().dims(),
        spacing: s.volume().spacing(),
        intensity: [lo, hi],
        labeled: s.mask().count(),
        dirty: s.is_dirty(),
        undo_depth: s.undo_depth(),
        redo_depth: s.redo_depth(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Png,
    Json,
}

/// JSON form of an image response.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ViewBody {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub overlay: Overlay,
}

fn view_response(view: View, format: Format) -> Result<Response> {
    Ok(match format {
        Format::Png => {
            let png = encode_png_gray8(view.width, view.height, &view.pixels)?;
            ([(header::CONTENT_TYPE, "image/png")], png).into_response()
        }
        Format::Json => Json(ViewBody {
            width: view.width,
            height: view.height,
            pixels: view.pixels,
            overlay: view.overlay,
        })
        .into_response(),
    })
}

#[derive(Debug, Deserialize)]
struct SliceQuery {
    wmin: Option<f32>,
    wmax: Option<f32>,
    #[serde(default)]
    format: Format,
}

async fn slice(
    State(s): State<Shared>,
    z: std::result::Result<UrlPath<usize>, PathRejection>,
    q: std::result::Result<Query<SliceQuery>, QueryRejection>,
) -> Result<Response> {
    let UrlPath(z) = z.map_err(bad)?;
    let Query(q) = q.map_err(bad)?;
    let view = read(&s).slice_view(z, q.wmin, q.wmax)?;
    view_response(view, q.format)
}

#[derive(Debug, Deserialize)]
struct MipQuery {
    z0: usize,
    s: usize,
    #[serde(default)]
    kind: MipKind,
    #[serde(default)]
    format: Format,
}

async fn mip(State(s): State<Shared>, q: std::result::Result<Query<MipQuery>, QueryRejection>) -> Result<Response> {
    let Query(q) = q.map_err(bad)?;
    let view = read(&s).mip_view(q.z0, q.s, q.kind)?;
    view_response(view, q.format)
}

async fn label_slice(
    State(s): State<Shared>,
    z: std::result::Result<UrlPath<usize>, PathRejection>,
) -> Result<Json<Overlay>> {
    let UrlPath(z) = z.map_err(bad)?;
    Ok(Json(read(&s).label_slice(z)?))
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Changed {
    pub changed: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BrushRequest {
    pub z: usize,
    /// Polyline vertices as `[row, col]`.
    pub points: Vec<[f64; 2]>,
    pub radius: f64,
    pub mode: BrushMode,
}

async fn brush(
    State(s): State<Shared>,
    body: std::result::Result<Json<BrushRequest>, JsonRejection>,
) -> Result<Json<Changed>> {
    let Json(b) = body.map_err(bad)?;
    let changed = write(&s).brush(b.z, &b.points, b.radius, b.mode)?;
    Ok(Json(Changed { changed }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FloodRequest {
    pub z: usize,
    /// `[row, col]`.
    pub seed: [usize; 2],
    pub tolerance: f32,
    #[serde(default)]
    pub connectivity: Connectivity,
}

async fn flood(
    State(s): State<Shared>,
    body: std::result::Result<Json<FloodRequest>, JsonRejection>,
) -> Result<Json<Changed>> {
    let Json(f) = body.map_err(bad)?;
    let changed = write(&s).flood(f.z, f.seed, f.tolerance, f.connectivity)?;
    Ok(Json(Changed { changed }))
}

async fn undo(State(s): State<Shared>) -> Json<Changed> {
    Json(Changed { changed: write(&s).undo() })
}

async fn redo(State(s): State<Shared>) -> Json<Changed> {
    Json(Changed { changed: write(&s).redo() })
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct PointsQuery {
    up_to_z: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Points {
    pub count: usize,
    /// `[row, col, slice]`.
    pub points: Vec<[usize; 3]>,
}

async fn points3d(
    State(s): State<Shared>,
    q: std::result::Result<Query<PointsQuery>, QueryRejection>,
) -> Result<Json<Points>> {
    let Query(q) = q.map_err(bad)?;
    let s = read(&s);
    let points = s.points3d(q.up_to_z.unwrap_or(usize::MAX));
    Ok(Json(Points { count: points.len(), points }))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Saved {
    pub path: String,
    pub labeled: usize,
}

async fn save(State(s): State<Shared>) -> Result<(StatusCode, Json<Saved>)> {
    let mut s = write(&s);
    let path = s.save(None)?;
    Ok((StatusCode::OK, Json(Saved { path: path.display().to_string(), labeled: s.mask().count() })))
}
