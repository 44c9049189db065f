//! JSON API over a curation workspace for the supervisor's review loop.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/rounds` | rounds with a triage queue and their progress |
//! | GET | `/api/queue?round=R&kind=K` | unreviewed flagged samples |
//! | GET | `/api/sample/{id}/image` | PNG bytes of a manifest sample |
//! | POST | `/api/verdict` | apply one verdict with optimistic versioning |
//! | GET | `/api/stats?round=R` | live round metrics |
//!
//! Errors are `{"code", "message", "sample_id"?}` with a matching status.
//! Writes go through one writer at a time; each publishes a fresh snapshot,
//! so readers never observe a half-applied verdict.

use std::collections::BTreeMap;
use std::path::{Component, Path};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use workbench_core::triage::{
    apply_verdicts, latest_verdicts, round_stats, ConfirmationRule, FlagKind, ReviewVerdict, RoundStats, TrainingSummary,
    TriageRound, VerdictAction,
};
use workbench_core::{ClassId, DatasetManifest, Error, Split, Status, Workspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            code: code.into(),
            message: message.into(),
            sample_id: None,
            status: status.as_u16(),
        }
    }

    fn for_sample(mut self, id: impl Into<String>) -> Self {
        self.sample_id = Some(id.into());
        self
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Conflict { id, .. } => ApiError::new(StatusCode::CONFLICT, "version_conflict", message).for_sample(id),
            Error::InvalidVerdict { id, .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_verdict", message).for_sample(id)
            }
            Error::NotFlagged { id, .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "not_flagged", message).for_sample(id),
            Error::UnknownSample(id) => ApiError::new(StatusCode::NOT_FOUND, "unknown_sample", message).for_sample(id),
            Error::Budget { .. } => ApiError::new(StatusCode::CONFLICT, "budget_exceeded", message),
            Error::InvalidRecord { id, .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_record", message).for_sample(id)
            }
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub sample_id: String,
    pub image_url: String,
    pub label: ClassId,
    #[serde(default)]
    pub suggested_label: Option<ClassId>,
    #[serde(default)]
    pub loss: Option<f64>,
    pub flag_kind: FlagKind,
    pub round: u32,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub total: usize,
    pub reviewed: usize,
    #[serde(default)]
    pub training: Option<TrainingSummary>,
}

/// Body of `POST /api/verdict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRequest {
    pub sample_id: String,
    pub action: VerdictAction,
    #[serde(default)]
    pub new_label: Option<ClassId>,
    pub expected_version: u64,
    /// Defaults to the latest round that flagged the sample.
    #[serde(default)]
    pub round: Option<u32>,
    #[serde(default)]
    pub reviewer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictResponse {
    pub sample_id: String,
    pub round: u32,
    pub label: ClassId,
    pub status: Status,
    pub split: Split,
    pub version: u64,
}

#[derive(Clone)]
struct Snapshot {
    manifest: Arc<DatasetManifest>,
    verdicts: Arc<Vec<ReviewVerdict>>,
    queues: Arc<BTreeMap<u32, TriageRound>>,
}

struct Inner {
    workspace: Workspace,
    rule: ConfirmationRule,
    snapshot: RwLock<Snapshot>,
    writer: tokio::sync::Mutex<()>,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct ReviewService {
    inner: Arc<Inner>,
}

fn queue_items(snapshot: &Snapshot, queue: &TriageRound, kind: Option<FlagKind>) -> Vec<QueueItem> {
    let latest = latest_verdicts(&snapshot.verdicts, queue.round);
    let mut items: Vec<QueueItem> = queue
        .flagged
        .iter()
        .filter(|f| kind.is_none_or(|k| f.kind == k))
        .filter(|f| !latest.contains_key(f.id.as_str()))
        .filter_map(|f| {
            let r = snapshot.manifest.get(&f.id)?;
            Some(QueueItem {
                sample_id: f.id.clone(),
                image_url: format!("/api/sample/{}/image", f.id),
                label: r.label,
                suggested_label: r.suggested_label.or(f.predicted.filter(|p| *p != r.label)),
                loss: f.loss,
                flag_kind: f.kind,
                round: queue.round,
                version: r.version,
            })
        })
        .collect();
    let rank = |k: FlagKind| match k {
        FlagKind::SeedSample => 0,
        FlagKind::ConfidentHead => 1,
        FlagKind::SuspectTail => 2,
    };
    items.sort_by(|a, b| {
        let loss = |i: &QueueItem| i.loss.unwrap_or(0.0);
        rank(a.flag_kind).cmp(&rank(b.flag_kind)).then_with(|| match a.flag_kind {
            FlagKind::SuspectTail => loss(b).total_cmp(&loss(a)),
            _ => loss(a).total_cmp(&loss(b)),
        })
    });
    items
}

impl ReviewService {
    /// Loads the manifest, every round queue and the verdict log.
    pub fn open(manifest_path: impl Into<std::path::PathBuf>, rule: ConfirmationRule) -> workbench_core::Result<Self> {
        let workspace = Workspace::new(manifest_path);
        let manifest = workspace.load_manifest()?;
        let verdicts = workspace.load_verdicts()?;
        let mut queues = BTreeMap::new();
        for round in workspace.rounds()? {
            if let Some(q) = workspace.load_queue(round)? {
                queues.insert(round, q);
            }
        }
        Ok(ReviewService {
            inner: Arc::new(Inner {
                workspace,
                rule,
                snapshot: RwLock::new(Snapshot {
                    manifest: Arc::new(manifest),
                    verdicts: Arc::new(verdicts),
                    queues: Arc::new(queues),
                }),
                writer: tokio::sync::Mutex::new(()),
            }),
        })
    }

    fn snapshot(&self) -> Snapshot {
        self.inner.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn rounds(&self) -> Vec<RoundSummary> {
        let s = self.snapshot();
        s.queues
            .values()
            .map(|q| RoundSummary {
                round: q.round,
                total: q.flagged.len(),
                reviewed: q.flagged.len() - queue_items(&s, q, None).len(),
                training: q.training,
            })
            .collect()
    }

    fn queue_of(s: &Snapshot, round: u32) -> ApiResult<&TriageRound> {
        s.queues
            .get(&round)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_round", format!("no triage queue for round {round}")))
    }

    pub fn queue(&self, round: u32, kind: Option<FlagKind>) -> ApiResult<Vec<QueueItem>> {
        let s = self.snapshot();
        let q = Self::queue_of(&s, round)?;
        Ok(queue_items(&s, q, kind))
    }

    pub fn stats(&self, round: u32) -> ApiResult<RoundStats> {
        let s = self.snapshot();
        let q = Self::queue_of(&s, round)?;
        Ok(round_stats(&s.manifest, q, &s.verdicts, self.inner.rule))
    }

    pub fn image(&self, id: &str) -> ApiResult<Vec<u8>> {
        let s = self.snapshot();
        let record = s
            .manifest
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_sample", format!("no sample {id}")).for_sample(id))?;
        let rel = Path::new(&record.image_path);
        if rel.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
            return Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden_path", "image path leaves the workspace").for_sample(id));
        }
        std::fs::read(self.inner.workspace.root().join(rel))
            .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "image_unavailable", e.to_string()).for_sample(id))
    }

    /// Applies one verdict: validates it against the current snapshot,
    /// saves the manifest atomically, appends the verdict log and publishes
    /// the new state.
    pub async fn post_verdict(&self, req: VerdictRequest) -> ApiResult<VerdictResponse> {
        let _writer = self.inner.writer.lock().await;
        let s = self.snapshot();
        if s.manifest.get(&req.sample_id).is_none() {
            return Err(Error::UnknownSample(req.sample_id.clone()).into());
        }
        let round = match req.round {
            Some(r) => r,
            None => s
                .queues
                .values()
                .rev()
                .find(|q| q.find(&req.sample_id).is_some())
                .map(|q| q.round)
                .ok_or_else(|| {
                    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "not_flagged", "sample is not in any round's queue")
                        .for_sample(&req.sample_id)
                })?,
        };
        let queue = Self::queue_of(&s, round)?;
        let mut verdict = ReviewVerdict::new(
            req.sample_id.clone(),
            req.action,
            round,
            req.reviewer.clone().unwrap_or_else(|| "reviewer".into()),
        )
        .with_expected_version(req.expected_version);
        verdict.new_label = req.new_label;
        let updated = apply_verdicts(&s.manifest, queue, std::slice::from_ref(&verdict))?;
        let ws = self.inner.workspace.clone();
        let to_save = updated.clone();
        let logged = verdict.clone();
        let previous = s.manifest.clone();
        tokio::task::spawn_blocking(move || -> workbench_core::Result<()> {
            ws.save_manifest(&to_save)?;
            if let Err(e) = ws.append_verdicts(std::slice::from_ref(&logged)) {
                ws.save_manifest(&previous)?;
                return Err(e);
            }
            Ok(())
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;

        let r = updated.get(&req.sample_id).expect("record survives a verdict");
        let response = VerdictResponse {
            sample_id: r.id.clone(),
            round,
            label: r.label,
            status: r.status,
            split: r.split,
            version: r.version,
        };
        let mut verdicts = (*s.verdicts).clone();
        verdicts.push(verdict);
        *self.inner.snapshot.write().expect("snapshot lock") = Snapshot {
            manifest: Arc::new(updated),
            verdicts: Arc::new(verdicts),
            queues: s.queues.clone(),
        };
        Ok(response)
    }

    pub fn router(self) -> Router {
        Router::new()
            .route("/api/rounds", get(rounds_handler))
            .route("/api/queue", get(queue_handler))
            .route("/api/sample/{id}/image", get(image_handler))
            .route("/api/verdict", post(verdict_handler))
            .route("/api/stats", get(stats_handler))
            .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
            .with_state(self)
    }

    /// Serves until the process is stopped.
    pub async fn serve(self, addr: std::net::SocketAddr) -> std::io::Result<()> {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("review service listening on {}", listener.local_addr()?);
        axum::serve(listener, self.router()).await
    }
}

#[derive(Deserialize)]
struct RoundQuery {
    round: Option<String>,
    kind: Option<String>,
}

fn parse_round(q: &RoundQuery) -> ApiResult<u32> {
    let raw = q
        .round
        .as_deref()
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "missing round parameter"))?;
    raw.parse()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("round must be an integer, got {raw:?}")))
}

fn parse_kind(q: &RoundQuery) -> ApiResult<Option<FlagKind>> {
    q.kind
        .as_deref()
        .map(|k| {
            serde_json::from_value(serde_json::Value::String(k.into()))
                .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("unknown kind {k:?}")))
        })
        .transpose()
}

async fn rounds_handler(State(svc): State<ReviewService>) -> Json<Vec<RoundSummary>> {
    Json(svc.rounds())
}

async fn queue_handler(State(svc): State<ReviewService>, Query(q): Query<RoundQuery>) -> ApiResult<Json<Vec<QueueItem>>> {
    Ok(Json(svc.queue(parse_round(&q)?, parse_kind(&q)?)?))
}

async fn stats_handler(State(svc): State<ReviewService>, Query(q): Query<RoundQuery>) -> ApiResult<Json<RoundStats>> {
    Ok(Json(svc.stats(parse_round(&q)?)?))
}

async fn image_handler(State(svc): State<ReviewService>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let bytes = svc.image(&id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn verdict_handler(State(svc): State<ReviewService>, body: Bytes) -> ApiResult<Json<VerdictResponse>> {
    let req: VerdictRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", e.to_string()))?;
    Ok(Json(svc.post_verdict(req).await?))
}
