//! Review service: read-only cluster/image/scatter endpoints plus session
//! mutations under `/api`, static UI assets everywhere else.
//!
//! Mutations go through one writer task that owns the session file. Each
//! change is written (temp file + rename) before the request is answered;
//! readers only ever see a snapshot that is already on disk.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use fcluster_core::eval::{compute_precision, Assignments, EvaluationSession, PrecisionReport};
use fcluster_core::ingest::{load_manifest, Manifest};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

use crate::error::{AppError, Result};
use crate::pipeline::RunArtifacts;

pub const DEFAULT_PAGE: usize = 60;
const MAX_PAGE: usize = 1000;
const BUILTIN_INDEX: &str = include_str!("../static/index.html");

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub assignments: PathBuf,
    pub session: PathBuf,
    pub manifest: Option<PathBuf>,
    /// Defaults to the manifest's directory.
    pub image_root: Option<PathBuf>,
    pub scatter: Option<PathBuf>,
    /// Served at `/`; a built-in page is used when absent.
    pub static_dir: Option<PathBuf>,
    pub addr: SocketAddr,
}

impl ServeOptions {
    pub fn from_artifacts(a: &RunArtifacts, addr: SocketAddr) -> Self {
        ServeOptions {
            assignments: a.assignments.clone(),
            session: a.session.clone(),
            manifest: Some(a.manifest.clone()),
            image_root: a.image_root.clone(),
            scatter: Some(a.scatter.clone()),
            static_dir: None,
            addr,
        }
    }
}

/// Everything the service reads but never changes.
#[derive(Debug)]
pub struct ReviewData {
    pub assignments: Assignments,
    pub manifest: Option<Manifest>,
    pub image_root: PathBuf,
    pub scatter: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
}

/// Loads the review inputs and the session. A missing session file is
/// created; an unreadable or inconsistent one is an error naming the file.
pub fn open_review(opts: &ServeOptions) -> Result<(ReviewData, EvaluationSession)> {
    let assignments = Assignments::load(&opts.assignments)?;
    let manifest = opts.manifest.as_ref().map(load_manifest).transpose()?;
    if let Some(m) = &manifest {
        if let Some(id) = assignments.image_ids.iter().find(|id| m.get(id).is_none()) {
            return Err(AppError::Server(format!(
                "image {id:?} from {} is not in manifest {}",
                opts.assignments.display(),
                m.source_path().display()
            )));
        }
    }
    let image_root = opts
        .image_root
        .clone()
        .or_else(|| opts.manifest.as_ref().and_then(|p| p.parent()).map(Path::to_path_buf))
        .unwrap_or_default();

    let session = if opts.session.exists() {
        let s = EvaluationSession::load(&opts.session)
            .map_err(|e| AppError::Server(format!("refusing to start: {e}")))?;
        s.validate(&assignments).map_err(|e| {
            AppError::Server(format!(
                "refusing to start: session {} does not match {}: {e}",
                opts.session.display(),
                opts.assignments.display()
            ))
        })?;
        s
    } else {
        let id = opts.session.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let s = EvaluationSession::new(id, opts.assignments.to_string_lossy());
        s.save_atomic(&opts.session)?;
        s
    };
    let data = ReviewData {
        assignments,
        manifest,
        image_root,
        scatter: opts.scatter.clone(),
        static_dir: opts.static_dir.clone(),
    };
    Ok((data, session))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mutation {
    Mark(String),
    Unmark(String),
    Label { cluster_id: u32, keyword: String },
    Merge(BTreeMap<u32, u32>),
}

type Snapshot = Arc<RwLock<Arc<EvaluationSession>>>;
type Reply = std::result::Result<(Arc<EvaluationSession>, bool), ApiError>;

struct WriteRequest {
    mutation: Mutation,
    reply: oneshot::Sender<Reply>,
}

#[derive(Clone)]
pub struct AppState {
    data: Arc<ReviewData>,
    session: Snapshot,
    writer: mpsc::Sender<WriteRequest>,
}

impl AppState {
    /// Starts the writer task; must be called inside a tokio runtime.
    pub fn new(data: ReviewData, session: EvaluationSession, session_path: PathBuf) -> Self {
        let data = Arc::new(data);
        let snapshot: Snapshot = Arc::new(RwLock::new(Arc::new(session)));
        let (tx, rx) = mpsc::channel(64);
        tokio::spawn(writer(rx, Arc::clone(&data), Arc::clone(&snapshot), session_path));
        AppState { data, session: snapshot, writer: tx }
    }

    pub fn session(&self) -> Arc<EvaluationSession> {
        Arc::clone(&self.session.read().expect("session lock"))
    }

    /// Applies `mutation` and returns the persisted session, plus whether
    /// anything changed.
    pub async fn mutate(&self, mutation: Mutation) -> Reply {
        let (reply, rx) = oneshot::channel();
        self.writer
            .send(WriteRequest { mutation, reply })
            .await
            .map_err(|_| ApiError::internal("session writer stopped"))?;
        rx.await.map_err(|_| ApiError::internal("session writer dropped the request"))?
    }
}

async fn writer(mut rx: mpsc::Receiver<WriteRequest>, data: Arc<ReviewData>, snapshot: Snapshot, path: PathBuf) {
    while let Some(req) = rx.recv().await {
        let current = Arc::clone(&snapshot.read().expect("session lock"));
        let mut next = (*current).clone();
        let result = match apply(&mut next, &data.assignments, &req.mutation) {
            Ok(false) => Ok((current, false)),
            Ok(true) => {
                let path = path.clone();
                let next = Arc::new(next);
                let to_save = Arc::clone(&next);
                match tokio::task::spawn_blocking(move || to_save.save_atomic(&path)).await {
                    Ok(Ok(())) => {
                        *snapshot.write().expect("session lock") = Arc::clone(&next);
                        Ok((next, true))
                    }
                    Ok(Err(e)) => Err(ApiError::internal(e.to_string())),
                    Err(e) => Err(ApiError::internal(e.to_string())),
                }
            }
            Err(e) => Err(e.into()),
        };
        let _ = req.reply.send(result);
    }
}

fn apply(session: &mut EvaluationSession, assignments: &Assignments, m: &Mutation) -> fcluster_core::Result<bool> {
    match m {
        Mutation::Mark(id) => session.add_mark(assignments, id),
        Mutation::Unmark(id) => {
            if !assignments.contains(id) {
                return Err(fcluster_core::Error::UnknownImage(id.clone()));
            }
            Ok(session.remove_mark(id))
        }
        Mutation::Label { cluster_id, keyword } => {
            if session.labels.get(cluster_id).map(String::as_str) == Some(keyword.trim()) {
                return Ok(false);
            }
            session.set_label(assignments, *cluster_id, keyword).map(|()| true)
        }
        Mutation::Merge(map) => session.set_merge_map(assignments, map.clone()).map(|()| true),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<fcluster_core::Error> for ApiError {
    fn from(e: fcluster_core::Error) -> Self {
        use fcluster_core::Error as E;
        let status = match e {
            E::UnknownImage(_) | E::UnknownCluster(_) => StatusCode::NOT_FOUND,
            E::MergeMissing(_) | E::Session(_) | E::InvalidConfig(_) | E::Dimension(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/clusters", get(clusters))
        .route("/api/clusters/{id}/images", get(cluster_images))
        .route("/api/images/{image_id}", get(image))
        .route("/api/scatter", get(scatter))
        .route("/api/metrics", get(metrics))
        .route("/api/export", get(export))
        .route("/api/marks", post(add_mark))
        .route("/api/marks/{image_id}", delete(remove_mark))
        .route("/api/labels", post(set_label))
        .route("/api/merge", post(set_merge))
        .route("/api/session", get(session))
        .fallback(static_asset)
        .with_state(state)
}

/// Loads everything, binds `opts.addr` and serves until the process ends.
/// The bound address is printed as `listening on http://ADDR`.
pub async fn serve(opts: ServeOptions) -> Result<()> {
    let (data, session) = open_review(&opts)?;
    let listener = tokio::net::TcpListener::bind(opts.addr)
        .await
        .map_err(|e| AppError::Server(format!("cannot listen on {}: {e}", opts.addr)))?;
    let local = listener.local_addr().map_err(|e| AppError::Server(e.to_string()))?;
    let state = AppState::new(data, session, opts.session.clone());
    println!("listening on http://{local}");
    let _ = std::io::stdout().flush();
    axum::serve(listener, router(state))
        .await
        .map_err(|e| AppError::Server(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ClusterSummary {
    pub cluster_id: u32,
    pub size: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<String>,
    pub marked: usize,
    /// Merged group, when a merge map is set.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub group: Option<u32>,
}

async fn clusters(State(state): State<AppState>) -> Json<Vec<ClusterSummary>> {
    let session = state.session();
    let a = &state.data.assignments;
    let mut marked: BTreeMap<u32, usize> = BTreeMap::new();
    for m in &session.marks {
        if let Some(c) = a.cluster_of(m) {
            *marked.entry(c).or_default() += 1;
        }
    }
    let out = a
        .sizes()
        .into_iter()
        .map(|(c, size)| ClusterSummary {
            cluster_id: c,
            size,
            label: session.labels.get(&c).cloned(),
            marked: marked.get(&c).copied().unwrap_or(0),
            group: session.merge_map.get(&c).copied(),
        })
        .collect();
    Json(out)
}

#[derive(Debug, Deserialize)]
struct Page {
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageEntry {
    pub image_id: String,
    pub url: String,
    pub marked: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ImagePage {
    pub cluster_id: u32,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub images: Vec<ImageEntry>,
}

async fn cluster_images(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<u32>,
    Query(page): Query<Page>,
) -> ApiResult<Json<ImagePage>> {
    let members = state.data.assignments.members(id);
    if members.is_empty() {
        return Err(fcluster_core::Error::UnknownCluster(id).into());
    }
    let session = state.session();
    let offset = page.offset.unwrap_or(0);
    let limit = page.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
    let images = members
        .iter()
        .skip(offset)
        .take(limit)
        .map(|&image_id| ImageEntry {
            image_id: image_id.to_string(),
            url: format!("/api/images/{}", encode_segment(image_id)),
            marked: session.marks.iter().any(|m| m == image_id),
        })
        .collect();
    Ok(Json(ImagePage { cluster_id: id, total: members.len(), offset, limit, images }))
}

fn encode_segment(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-._~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn content_type(path: &Path) -> &'static str {
    let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
    match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        Some("webp") => "image/webp",
        Some("tif" | "tiff") => "image/tiff",
        Some("svg") => "image/svg+xml",
        Some("html" | "htm") => "text/html; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("js" | "mjs") => "text/javascript; charset=utf-8",
        Some("json") => "application/json",
        Some("csv") => "text/csv; charset=utf-8",
        Some("txt") => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

/// `root/relative` when `relative` cannot climb out of `root`.
fn contained(root: &Path, relative: &str) -> Option<PathBuf> {
    let rel = Path::new(relative);
    rel.components()
        .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
        .then(|| root.join(rel))
}

async fn read_file(path: &Path) -> ApiResult<Response> {
    match tokio::fs::read(path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, content_type(path))], bytes).into_response()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(ApiError::not_found(format!("{} not found", path.display())))
        }
        Err(e) => Err(ApiError::internal(format!("{}: {e}", path.display()))),
    }
}

async fn image(State(state): State<AppState>, UrlPath(image_id): UrlPath<String>) -> ApiResult<Response> {
    let manifest = state
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| ApiError::not_found("no manifest loaded"))?;
    let record = manifest
        .get(&image_id)
        .ok_or_else(|| ApiError::from(fcluster_core::Error::UnknownImage(image_id.clone())))?;
    let path = contained(&state.data.image_root, &record.file_path)
        .ok_or_else(|| ApiError::new(StatusCode::FORBIDDEN, format!("path of {image_id} leaves the image root")))?;
    read_file(&path).await
}

async fn scatter(State(state): State<AppState>) -> ApiResult<Response> {
    let path = state
        .data
        .scatter
        .as_ref()
        .ok_or_else(|| ApiError::not_found("no scatter file loaded"))?;
    let body = tokio::fs::read(path)
        .await
        .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    /// `"merged"` when a merge map is set, else `"clusters"`.
    pub grouping: String,
    pub macro_precision: f64,
    pub micro_precision: f64,
    pub per_group: BTreeMap<u32, fcluster_core::eval::ClusterPrecision>,
    /// Always over the unmerged clusters.
    pub clusters: PrecisionReport,
}

async fn metrics(State(state): State<AppState>) -> ApiResult<Json<Metrics>> {
    let session = state.session();
    let a = &state.data.assignments;
    let clusters = compute_precision(&a.image_ids, &a.clusters, &session.marks)?;
    let grouped = session.precision(a)?;
    Ok(Json(Metrics {
        grouping: if session.merge_map.is_empty() { "clusters" } else { "merged" }.into(),
        macro_precision: grouped.macro_precision,
        micro_precision: grouped.micro_precision,
        per_group: grouped.per_cluster,
        clusters,
    }))
}

async fn export(State(state): State<AppState>) -> Response {
    (
        [
            (header::CONTENT_TYPE, "text/plain; charset=utf-8"),
            (header::CONTENT_DISPOSITION, "attachment; filename=\"marks.txt\""),
        ],
        state.session().export_marks(),
    )
        .into_response()
}

async fn session(State(state): State<AppState>) -> Json<EvaluationSession> {
    Json((*state.session()).clone())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MarkRequest {
    pub image_id: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MarkResponse {
    pub image_id: String,
    pub marked: bool,
    pub changed: bool,
    pub total_marks: usize,
}

async fn add_mark(State(state): State<AppState>, Json(req): Json<MarkRequest>) -> ApiResult<Json<MarkResponse>> {
    let (s, changed) = state.mutate(Mutation::Mark(req.image_id.clone())).await?;
    Ok(Json(MarkResponse { image_id: req.image_id, marked: true, changed, total_marks: s.marks.len() }))
}

async fn remove_mark(State(state): State<AppState>, UrlPath(image_id): UrlPath<String>) -> ApiResult<Json<MarkResponse>> {
    let (s, changed) = state.mutate(Mutation::Unmark(image_id.clone())).await?;
    Ok(Json(MarkResponse { image_id, marked: false, changed, total_marks: s.marks.len() }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    pub cluster_id: u32,
    pub keyword: String,
}

async fn set_label(State(state): State<AppState>, Json(req): Json<LabelRequest>) -> ApiResult<Json<LabelRequest>> {
    let (s, _) = state
        .mutate(Mutation::Label { cluster_id: req.cluster_id, keyword: req.keyword })
        .await?;
    let keyword = s.labels.get(&req.cluster_id).cloned().unwrap_or_default();
    Ok(Json(LabelRequest { cluster_id: req.cluster_id, keyword }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MergeRequest {
    pub merge_map: BTreeMap<u32, u32>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MergeResponse {
    /// Targets renumbered to `0..groups`.
    pub merge_map: BTreeMap<u32, u32>,
    pub groups: usize,
}

async fn set_merge(State(state): State<AppState>, Json(req): Json<MergeRequest>) -> ApiResult<Json<MergeResponse>> {
    let (s, _) = state.mutate(Mutation::Merge(req.merge_map)).await?;
    let groups = s.merge_map.values().collect::<std::collections::BTreeSet<_>>().len();
    Ok(Json(MergeResponse { merge_map: s.merge_map.clone(), groups }))
}

async fn static_asset(State(state): State<AppState>, uri: Uri) -> ApiResult<Response> {
    let path = uri.path();
    if path.starts_with("/api/") || path == "/api" {
        return Err(ApiError::not_found(format!("no endpoint {path}")));
    }
    let rel = path.trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    match &state.data.static_dir {
        Some(dir) => {
            let file = contained(dir, rel).ok_or_else(|| ApiError::not_found(path.to_string()))?;
            read_file(&file).await
        }
        None if rel == "index.html" => {
            Ok(([(header::CONTENT_TYPE, "text/html; charset=utf-8")], BUILTIN_INDEX).into_response())
        }
        None => Err(ApiError::not_found(path.to_string())),
    }
}
