//! HTTP API over an immutable model snapshot and reasoner, versioned under
//! `/v1/`. FiLM parameters are computed per request and never written
//! back into the model.

mod error;
pub mod png16;
mod rle;

use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{FromRequest, Query, Request, State};
use axum::http::HeaderValue;
use axum::middleware::Next;
use axum::response::Response;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use lru::LruCache;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use causalseg::metrics::EvalRecord;
use causalseg::model::{argmax_masks, FiLMParams, ModelConfig, ModelSnapshot};
use causalseg::reasoner::{grammar_help, parse_command, predict_film, rule_reasoner, CorrectionCommand, ReasonerModel, Verb};
use causalseg::seed;
use causalseg::styletext::hex;
use causalseg::synthgen::{corrupt_for_intervention, Corruption, CorruptionKind, Dataset, Sample, StyleDescriptor};
use causalseg::tensor::Tensor;

pub use error::ApiError;
pub use rle::MaskRle;

pub const SNAPSHOT_HEADER: &str = "x-snapshot-hash";

/// How correction commands become FiLM parameters.
pub enum ReasonerBackend {
    Learned(Box<ReasonerModel>),
    Rule,
}

impl ReasonerBackend {
    pub fn name(&self) -> &'static str {
        match self {
            ReasonerBackend::Learned(_) => "learned",
            ReasonerBackend::Rule => "rule",
        }
    }
}

pub struct LoadedModel {
    pub snapshot: ModelSnapshot,
    pub snapshot_hash: String,
    pub reasoner: ReasonerBackend,
    /// SHA-256 of the serialized reasoner, when learned.
    pub reasoner_hash: Option<String>,
}

impl LoadedModel {
    pub fn new(snapshot: ModelSnapshot, reasoner: ReasonerBackend) -> Self {
        let reasoner_hash = match &reasoner {
            ReasonerBackend::Learned(r) => Some(hex(&Sha256::digest(r.to_bytes(None)))),
            ReasonerBackend::Rule => None,
        };
        LoadedModel {
            snapshot_hash: snapshot.content_hash(),
            snapshot,
            reasoner,
            reasoner_hash,
        }
    }

    fn config(&self) -> &ModelConfig {
        &self.snapshot.model.config
    }

    fn film(&self, cmd: &CorrectionCommand) -> Result<FiLMParams, ApiError> {
        match &self.reasoner {
            ReasonerBackend::Learned(r) => predict_film(r, cmd).map_err(|e| ApiError::internal(e.to_string())),
            ReasonerBackend::Rule => Ok(rule_reasoner(cmd, &self.snapshot.model.decoder)),
        }
    }

    fn infer(&self, image: &[f32], film: Option<&FiLMParams>) -> Result<Tensor, ApiError> {
        let m = &self.snapshot.model;
        let x: Vec<f64> = image.iter().map(|&v| f64::from(v)).collect();
        let batch = m.image_batch(&[&x]).map_err(|e| ApiError::internal(e.to_string()))?;
        m.predict_logits(&batch, film).map_err(|e| ApiError::internal(e.to_string()))
    }
}

/// Test-split samples addressable by domain name and index.
pub struct SampleStore {
    pub domains: BTreeMap<String, Vec<Sample>>,
}

impl SampleStore {
    pub fn from_dataset(data: &Dataset) -> Self {
        let mut domains: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
        for s in &data.id_test {
            domains.entry(s.domain.clone()).or_default().push(s.clone());
        }
        for (name, samples) in &data.ood_tests {
            domains.insert(name.clone(), samples.clone());
        }
        SampleStore { domains }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_body_bytes: usize,
    pub session_cap: usize,
    /// Seeds session tokens and unindexed sample draws.
    pub seed: u64,
    /// Used by `/sample` when a corruption is requested without severity.
    pub default_severity: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_body_bytes: 1 << 20,
            session_cap: 256,
            seed: 0,
            default_severity: 0.7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HistoryEntry {
    pub sample_id: String,
    pub command: String,
    pub film_summary: FilmSummary,
    pub dice_before: Option<f64>,
    pub dice_after: Option<f64>,
}

struct Current {
    sample_id: String,
    image: Vec<f32>,
    truth: Option<Vec<u8>>,
    base: Vec<u8>,
}

pub struct Session {
    pub session_id: String,
    pub created_at: u64,
    current: Option<Current>,
    history: Vec<HistoryEntry>,
}

impl Session {
    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }
}

pub struct AppState {
    pub model: Option<LoadedModel>,
    pub samples: Option<SampleStore>,
    pub config: ServiceConfig,
    sessions: Mutex<LruCache<String, Arc<Mutex<Session>>>>,
    counter: AtomicU64,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>, samples: Option<SampleStore>, config: ServiceConfig) -> Self {
        let cap = NonZeroUsize::new(config.session_cap.max(1)).expect("non-zero");
        AppState {
            model,
            samples,
            config,
            sessions: Mutex::new(LruCache::new(cap)),
            counter: AtomicU64::new(0),
        }
    }

    fn model(&self) -> Result<&LoadedModel, ApiError> {
        self.model.as_ref().ok_or_else(ApiError::not_loaded)
    }

    fn next(&self) -> u64 {
        self.counter.fetch_add(1, Ordering::Relaxed)
    }

    pub fn open_session(&self) -> Arc<Mutex<Session>> {
        let n = self.next();
        let id = hex(&Sha256::digest(seed::derive(self.config.seed, &[seed::tag("session"), n]).to_le_bytes()))[..24]
            .to_string();
        let created_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let s = Arc::new(Mutex::new(Session {
            session_id: id.clone(),
            created_at,
            current: None,
            history: Vec::new(),
        }));
        self.sessions.lock().expect("session table").put(id, s.clone());
        s
    }

    pub fn session(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.lock().expect("session table").get(id).cloned()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table").len()
    }

    /// Resolves `domain:index` or `domain:index:kind:severity`.
    fn resolve(&self, sample_id: &str) -> Result<(Sample, Option<Corruption>), ApiError> {
        let store = self.samples.as_ref().ok_or_else(|| ApiError::unavailable("no dataset loaded"))?;
        let parts: Vec<&str> = sample_id.split(':').collect();
        let bad = || ApiError::bad_request("malformed_sample_id", "expected domain:index[:corruption:severity]");
        if parts.len() != 2 && parts.len() != 4 {
            return Err(bad());
        }
        let samples = store
            .domains
            .get(parts[0])
            .ok_or_else(|| ApiError::not_found("unknown_domain", format!("no domain {:?}", parts[0])))?;
        let index: usize = parts[1].parse().map_err(|_| bad())?;
        let s = samples
            .get(index)
            .ok_or_else(|| ApiError::not_found("unknown_sample", format!("{sample_id} is out of range")))?;
        if parts.len() == 2 {
            return Ok((s.clone(), None));
        }
        let kind: CorruptionKind = parts[2]
            .parse()
            .map_err(|_| ApiError::bad_request("unknown_corruption", format!("no corruption {:?}", parts[2])))?;
        let severity: f64 = parts[3].parse().map_err(|_| bad())?;
        let (c, info) = corrupt_for_intervention(s, kind, severity)
            .map_err(|e| ApiError::bad_request("bad_corruption", e.to_string()))?;
        Ok((c, Some(info)))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/v1/segment", post(segment))
        .route("/v1/intervene", post(intervene))
        .route("/v1/sample", get(sample))
        .route("/v1/session", post(new_session))
        .route("/v1/session/{id}", get(session_info))
        .route("/v1/model/info", get(model_info))
        .layer(axum::middleware::from_fn_with_state(state.clone(), stamp_hash))
        .layer(axum::extract::DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn stamp_hash(State(st): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let mut resp = next.run(req).await;
    if let Some(m) = &st.model {
        if let Ok(v) = HeaderValue::from_str(&m.snapshot_hash) {
            resp.headers_mut().insert(SNAPSHOT_HEADER, v);
        }
    }
    resp
}

/// JSON body whose rejections use the service's error format.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    Json<T>: FromRequest<S, Rejection = axum::extract::rejection::JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(r) if r.status() == axum::http::StatusCode::PAYLOAD_TOO_LARGE => Err(ApiError::too_large()),
            Err(r) => Err(ApiError::bad_request("malformed_request", r.body_text())),
        }
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub sample_id: Option<String>,
    /// Base64 grayscale PNG.
    pub image_png: Option<String>,
    /// Make the segmented image the current sample of this session.
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsSummary {
    /// Predicted pixel count per class.
    pub class_pixels: Vec<usize>,
    /// Mean logit per class over all pixels.
    pub mean_logit: Vec<f64>,
}

fn logits_summary(logits: &Tensor, mask: &[u8], k: usize) -> LogitsSummary {
    let plane = mask.len();
    LogitsSummary {
        class_pixels: (0..k).map(|c| mask.iter().filter(|&&m| m as usize == c).count()).collect(),
        mean_logit: logits.data().chunks(plane).take(k).map(|ch| ch.iter().sum::<f64>() / plane as f64).collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentResponse {
    pub snapshot_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub mask_rle: MaskRle,
    pub logits_summary: LogitsSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hd95: Option<f64>,
}

fn metrics(pred: &[u8], truth: Option<&[u8]>, size: usize, k: usize) -> (Option<f64>, Option<f64>) {
    match truth {
        Some(t) => {
            let r = EvalRecord::new(0, "", 0, pred, t, size, k);
            (Some(r.mean_dice), r.mean_hd95)
        }
        None => (None, None),
    }
}

async fn segment(State(st): State<Arc<AppState>>, ApiJson(req): ApiJson<SegmentRequest>) -> Result<Json<SegmentResponse>, ApiError> {
    blocking(move || {
        let m = st.model()?;
        let size = m.config().image_size;
        let k = m.config().num_classes;
        let (sample_id, image, truth) = match (&req.sample_id, &req.image_png) {
            (Some(id), None) => {
                let (s, _) = st.resolve(id)?;
                if s.size != size {
                    return Err(ApiError::wrong_size(s.size, size));
                }
                (Some(id.clone()), s.image, Some(s.mask))
            }
            (None, Some(b64)) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b64)
                    .map_err(|e| ApiError::bad_request("malformed_image", e.to_string()))?;
                let (w, h, levels) =
                    png16::decode(&bytes).map_err(|e| ApiError::bad_request("malformed_image", e.to_string()))?;
                if w != size || h != size {
                    return Err(ApiError::wrong_size(w.max(h), size));
                }
                (None, levels.into_iter().map(png16::dequantize).collect(), None)
            }
            _ => {
                return Err(ApiError::bad_request(
                    "malformed_request",
                    "give exactly one of sample_id and image_png",
                ))
            }
        };
        let session = match &req.session_id {
            Some(id) => Some(st.session(id).ok_or_else(|| ApiError::unknown_session(id))?),
            None => None,
        };

        let logits = m.infer(&image, None)?;
        let mask = argmax_masks(&logits).remove(0);
        let (dice, hd95) = metrics(&mask, truth.as_deref(), size, k);
        let session_id = session.map(|s| {
            let mut s = s.lock().expect("session");
            s.current = Some(Current {
                sample_id: sample_id.clone().unwrap_or_else(|| "upload".into()),
                image,
                truth,
                base: mask.clone(),
            });
            s.session_id.clone()
        });
        Ok(Json(SegmentResponse {
            snapshot_hash: m.snapshot_hash.clone(),
            sample_id,
            session_id,
            logits_summary: logits_summary(&logits, &mask, k),
            mask_rle: MaskRle::encode(&mask, size, size),
            dice,
            hd95,
        }))
    })
    .await
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub created_at: u64,
    pub current_sample: Option<String>,
    pub history: Vec<HistoryEntry>,
}

impl SessionInfo {
    fn of(s: &Session) -> Self {
        SessionInfo {
            session_id: s.session_id.clone(),
            created_at: s.created_at,
            current_sample: s.current.as_ref().map(|c| c.sample_id.clone()),
            history: s.history.clone(),
        }
    }
}

async fn new_session(State(st): State<Arc<AppState>>) -> Result<Json<SessionInfo>, ApiError> {
    st.model()?;
    let s = st.open_session();
    let info = SessionInfo::of(&s.lock().expect("session"));
    Ok(Json(info))
}

async fn session_info(
    State(st): State<Arc<AppState>>,
    axum::extract::Path(id): axum::extract::Path<String>,
) -> Result<Json<SessionInfo>, ApiError> {
    let s = st.session(&id).ok_or_else(|| ApiError::unknown_session(&id))?;
    let info = SessionInfo::of(&s.lock().expect("session"));
    Ok(Json(info))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterveneRequest {
    pub session_id: String,
    pub command_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedCommand {
    pub verb: Verb,
    pub target_class: Option<u8>,
    pub magnitude: f64,
    pub canonical: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub gamma_mean: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub beta_mean: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilmSummary {
    pub backend: String,
    pub identity: bool,
    pub stages: Vec<StageSummary>,
}

fn film_summary(backend: &str, f: &FiLMParams) -> FilmSummary {
    let stat = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (mean, min, max)
    };
    FilmSummary {
        backend: backend.to_string(),
        identity: f.gamma.iter().flatten().all(|&g| g == 1.0) && f.beta.iter().flatten().all(|&b| b == 0.0),
        stages: f
            .gamma
            .iter()
            .zip(&f.beta)
            .map(|(g, b)| {
                let (gamma_mean, gamma_min, gamma_max) = stat(g);
                let (beta_mean, beta_min, beta_max) = stat(b);
                StageSummary {
                    gamma_mean,
                    gamma_min,
                    gamma_max,
                    beta_mean,
                    beta_min,
                    beta_max,
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InterveneResponse {
    pub snapshot_hash: String,
    pub session_id: String,
    pub sample_id: String,
    pub mask_rle: MaskRle,
    pub parsed_command: ParsedCommand,
    pub film_summary: FilmSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice_after: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hd95_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hd95_after: Option<f64>,
    pub history_len: usize,
}

async fn intervene(
    State(st): State<Arc<AppState>>,
    ApiJson(req): ApiJson<InterveneRequest>,
) -> Result<Json<InterveneResponse>, ApiError> {
    blocking(move || {
        let m = st.model()?;
        let size = m.config().image_size;
        let k = m.config().num_classes;
        let session = st.session(&req.session_id).ok_or_else(|| ApiError::unknown_session(&req.session_id))?;
        // Held for the whole request: one mutation at a time per session.
        let mut s = session.lock().expect("session");
        let cur = s.current.as_ref().ok_or_else(ApiError::no_sample)?;
        let cmd = parse_command(&req.command_text, k).map_err(ApiError::parse)?;
        let film = m.film(&cmd)?;
        let logits = m.infer(&cur.image, Some(&film))?;
        let mask = argmax_masks(&logits).remove(0);
        let (dice_before, hd95_before) = metrics(&cur.base, cur.truth.as_deref(), size, k);
        let (dice_after, hd95_after) = metrics(&mask, cur.truth.as_deref(), size, k);
        let summary = film_summary(m.reasoner.name(), &film);
        let sample_id = cur.sample_id.clone();
        s.history.push(HistoryEntry {
            sample_id: sample_id.clone(),
            command: cmd.canonical(),
            film_summary: summary.clone(),
            dice_before,
            dice_after,
        });
        Ok(Json(InterveneResponse {
            snapshot_hash: m.snapshot_hash.clone(),
            session_id: s.session_id.clone(),
            sample_id,
            mask_rle: MaskRle::encode(&mask, size, size),
            parsed_command: ParsedCommand {
                verb: cmd.verb,
                target_class: cmd.target_class,
                magnitude: cmd.magnitude,
                canonical: cmd.canonical(),
            },
            film_summary: summary,
            dice_before,
            dice_after,
            hd95_before,
            hd95_after,
            history_len: s.history.len(),
        }))
    })
    .await
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct SampleQuery {
    pub domain: String,
    pub corruption: Option<String>,
    pub severity: Option<f64>,
    pub index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDescriptor {
    pub domain: String,
    pub style: StyleDescriptor,
    pub corruption: Option<Corruption>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleResponse {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_hash: Option<String>,
    pub sample_id: String,
    pub index: usize,
    pub image_png: String,
    pub ground_truth_rle: MaskRle,
    pub descriptor: SampleDescriptor,
}

async fn sample(
    State(st): State<Arc<AppState>>,
    q: Result<Query<SampleQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<SampleResponse>, ApiError> {
    let Query(q) = q.map_err(|e| ApiError::bad_request("malformed_request", e.body_text()))?;
    blocking(move || {
        let store = st.samples.as_ref().ok_or_else(|| ApiError::unavailable("no dataset loaded"))?;
        let n = store
            .domains
            .get(&q.domain)
            .ok_or_else(|| ApiError::not_found("unknown_domain", format!("no domain {:?}", q.domain)))?
            .len();
        let index = match q.index {
            Some(i) => i,
            None => seed::rng(st.config.seed, &[seed::tag("sample"), st.next()]).random_range(0..n),
        };
        let mut sample_id = format!("{}:{index}", q.domain);
        if let Some(c) = &q.corruption {
            let sev = q.severity.unwrap_or(st.config.default_severity);
            sample_id.push_str(&format!(":{c}:{sev}"));
        } else if q.severity.is_some() {
            return Err(ApiError::bad_request("malformed_request", "severity needs a corruption"));
        }
        let (s, corruption) = st.resolve(&sample_id)?;
        let png = png16::encode(&s.image, s.size, s.size);
        Ok(Json(SampleResponse {
            snapshot_hash: st.model.as_ref().map(|m| m.snapshot_hash.clone()),
            sample_id,
            index,
            image_png: base64::engine::general_purpose::STANDARD.encode(png),
            ground_truth_rle: MaskRle::encode(&s.mask, s.size, s.size),
            descriptor: SampleDescriptor {
                domain: s.domain,
                style: s.descriptor,
                corruption,
            },
        }))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbInfo {
    pub verb: Verb,
    pub aliases: Vec<String>,
    pub needs_class: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelInfo {
    pub snapshot_hash: String,
    pub config: ModelConfig,
    pub method: String,
    pub seeds: BTreeMap<String, u64>,
    pub codebook_hash: String,
    pub trainable_params: usize,
    pub total_params: usize,
    pub reasoner_backend: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reasoner_hash: Option<String>,
    pub grammar_help: String,
    pub verbs: Vec<VerbInfo>,
    pub domains: Vec<String>,
}

async fn model_info(State(st): State<Arc<AppState>>) -> Result<Json<ModelInfo>, ApiError> {
    let m = st.model()?;
    let snap = &m.snapshot;
    Ok(Json(ModelInfo {
        snapshot_hash: m.snapshot_hash.clone(),
        config: snap.model.config.clone(),
        method: snap.method.clone(),
        seeds: snap.seeds.clone(),
        codebook_hash: snap.codebook.content_hash(),
        trainable_params: snap.model.trainable_params(),
        total_params: snap.model.total_params(),
        reasoner_backend: m.reasoner.name().into(),
        reasoner_hash: m.reasoner_hash.clone(),
        grammar_help: grammar_help(),
        verbs: Verb::ALL
            .into_iter()
            .map(|v| VerbInfo {
                verb: v,
                aliases: v.aliases().iter().map(|a| a.to_string()).collect(),
                needs_class: v.needs_class(),
            })
            .collect(),
        domains: st.samples.as_ref().map(|s| s.domains.keys().cloned().collect()).unwrap_or_default(),
    }))
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
