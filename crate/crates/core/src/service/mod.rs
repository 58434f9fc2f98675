//! JSON-over-HTTP access to synthesis, editing and metrics.
//!
//! Models and sequences are loaded once and shared read-only. Each request
//! runs its sampler on a blocking worker with its own noise stream.

pub mod api;
pub mod store;


use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::io::write_sequence;
use crate::data::motion::{MotionKind, MotionSequence, DEFAULT_FPS};
use crate::denoiser::audio::resample_features;
use crate::denoiser::{ConditionSet, DenoiserError, DenoiserModel, Style, Variant};
use crate::diffusion::GuidanceConfig;
use crate::metrics::{self, MetricReport, ReportMeta, DEFAULT_SIGMA};
use crate::sampling::{
    edit_facial, sample_facial, sample_head_batch, sample_head_sgdiff, EditOptions, HeadJob,
    HeadOptions, ImputationSpec, SampleRequest, SamplingError,
};
use crate::tensor::Tensor;
use api::*;
pub use store::{JobDescriptor, JobKind, JobRegistry, JobStatus, Store, StoreError};

#[derive(Debug, Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub jobs: Arc<JobRegistry>,
}

impl AppState {
    pub fn new(store: Store, jobs: JobRegistry) -> Self {
        Self {
            store: Arc::new(store),
            jobs: Arc::new(jobs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Conflict(String),
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn message(&self) -> &str {
        match self {
            ApiError::BadRequest(m)
            | ApiError::NotFound(m)
            | ApiError::Conflict(m)
            | ApiError::Internal(m) => m,
        }
    }

    fn respond(&self, job_id: Option<String>) -> Response {
        let body = ErrorBody {
            error: self.message().to_string(),
            job_id: if matches!(self, ApiError::Internal(_)) {
                job_id
            } else {
                None
            },
        };
        (self.status(), Json(body)).into_response()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        self.respond(None)
    }
}

impl From<SamplingError> for ApiError {
    fn from(e: SamplingError) -> Self {
        match &e {
            SamplingError::Variant { .. } => ApiError::Conflict(e.to_string()),
            SamplingError::Model(
                DenoiserError::Channels { .. }
                | DenoiserError::AudioChannels { .. }
                | DenoiserError::Variant { .. },
            ) => ApiError::Conflict(e.to_string()),
            SamplingError::Mask(_) | SamplingError::Frames { .. } | SamplingError::Count => {
                ApiError::BadRequest(e.to_string())
            }
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/sequences", get(list_sequences))
        .route("/sequences/{id}", get(get_sequence))
        .route("/jobs/{id}", get(get_job))
        .route("/synthesize", post(synthesize))
        .route("/edit", post(edit))
        .route("/metrics", post(metrics_handler))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

fn envelope<T: Serialize>(
    request: Value,
    start: Instant,
    job_id: Option<String>,
    result: T,
) -> Value {
    serde_json::to_value(Envelope {
        request,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        job_id,
        result,
    })
    .expect("response serializes")
}

fn get_echo(path: &str) -> Value {
    json!({ "method": "GET", "path": path })
}

async fn list_models(State(st): State<AppState>) -> Json<Value> {
    let start = Instant::now();
    let models: Vec<ModelInfo> = st
        .store
        .models
        .iter()
        .map(|(name, m)| ModelInfo {
            name: name.clone(),
            variant: m.variant().name().into(),
            motion_channels: m.arch().motion_channels,
            audio_in: m.arch().audio_in,
            subjects: m.arch().subjects.clone(),
            parameters: m.param_count(),
            steps: m.arch().diffusion.steps,
        })
        .collect();
    Json(envelope(
        get_echo("/models"),
        start,
        None,
        json!({ "models": models }),
    ))
}

fn sequence_info(id: &str, s: &MotionSequence) -> SequenceInfo {
    SequenceInfo {
        id: id.into(),
        kind: kind_name(s.kind).into(),
        frames: s.frames(),
        channels: s.channels(),
        fps: s.fps,
        subject: s.subject.clone(),
    }
}

fn kind_name(k: MotionKind) -> &'static str {
    match k {
        MotionKind::Face => "face",
        MotionKind::Head => "head",
    }
}

async fn list_sequences(State(st): State<AppState>) -> Json<Value> {
    let start = Instant::now();
    let list: Vec<SequenceInfo> = st
        .store
        .sequences
        .iter()
        .map(|(id, s)| sequence_info(id, s))
        .collect();
    Json(envelope(
        get_echo("/sequences"),
        start,
        None,
        json!({ "sequences": list }),
    ))
}

async fn get_sequence(State(st): State<AppState>, Path(id): Path<String>) -> Response {
    let start = Instant::now();
    let Some(s) = st.store.sequences.get(&id) else {
        return ApiError::NotFound(format!("unknown sequence `{id}`")).into_response();
    };
    let mut info = serde_json::to_value(sequence_info(&id, s)).unwrap();
    info["data"] = json!(s.to_frames());
    Json(envelope(
        get_echo(&format!("/sequences/{id}")),
        start,
        None,
        info,
    ))
    .into_response()
}

async fn get_job(State(st): State<AppState>, Path(id): Path<String>) -> Response {
    let start = Instant::now();
    match st.jobs.get(&id) {
        Some(job) => {
            Json(envelope(get_echo(&format!("/jobs/{id}")), start, None, job)).into_response()
        }
        None => ApiError::NotFound(format!("unknown job `{id}`")).into_response(),
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

/// Runs `work` on a blocking worker under a fresh job record. Background
/// requests return 202 with the job id at once.
async fn run_job<R, T>(
    st: AppState,
    kind: JobKind,
    req: R,
    background: bool,
    work: fn(&AppState, &R, &str) -> Result<(T, Vec<String>), ApiError>,
) -> Response
where
    R: Serialize + Send + 'static,
    T: Serialize + Send + 'static,
{
    let start = Instant::now();
    let echo = serde_json::to_value(&req).expect("request serializes");
    let job = st.jobs.create(kind);
    let id = job.id.clone();
    let task = {
        let st = st.clone();
        let id = id.clone();
        let echo = echo.clone();
        move || {
            st.jobs.update(&id, |j| j.status = JobStatus::Running);
            let out = work(&st, &req, &id);
            match &out {
                Ok((result, artifacts)) => {
                    let value = envelope(echo, start, Some(id.clone()), result);
                    st.jobs.update(&id, |j| {
                        j.status = JobStatus::Done;
                        j.artifacts = artifacts.clone();
                        j.result = Some(value);
                    });
                }
                Err(e) => st.jobs.update(&id, |j| {
                    j.status = JobStatus::Failed;
                    j.error = Some(e.message().to_string());
                }),
            }
            out.map(|(r, _)| r)
        }
    };
    if background {
        tokio::task::spawn_blocking(task);
        let body = envelope(
            echo,
            start,
            Some(id),
            json!({ "status": JobStatus::Pending }),
        );
        return (StatusCode::ACCEPTED, Json(body)).into_response();
    }
    match tokio::task::spawn_blocking(task).await {
        Ok(Ok(result)) => Json(envelope(echo, start, Some(id), result)).into_response(),
        Ok(Err(e)) => e.respond(Some(id)),
        Err(join) => {
            st.jobs.update(&id, |j| {
                j.status = JobStatus::Failed;
                j.error = Some(join.to_string());
            });
            ApiError::Internal(format!("worker failed: {join}")).respond(Some(id))
        }
    }
}

async fn synthesize(State(st): State<AppState>, body: Bytes) -> Response {
    let req: SynthesizeRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    let bg = req.background;
    run_job(st, JobKind::Sample, req, bg, run_synthesize).await
}

async fn edit(State(st): State<AppState>, body: Bytes) -> Response {
    let req: EditRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    let bg = req.background;
    run_job(st, JobKind::Edit, req, bg, run_edit).await
}

async fn metrics_handler(State(_): State<AppState>, body: Bytes) -> Response {
    let start = Instant::now();
    let req: MetricsRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match run_metrics(&req) {
        Ok(report) => Json(envelope(
            serde_json::to_value(&req).unwrap(),
            start,
            None,
            report,
        ))
        .into_response(),
        Err(e) => e.into_response(),
    }
}

pub fn frames_to_tensor(frames: &Frames, what: &str) -> Result<Tensor, ApiError> {
    let n = frames.len();
    let c = frames.first().map_or(0, Vec::len);
    if n == 0 || c == 0 {
        return Err(ApiError::BadRequest(format!("{what} is empty")));
    }
    if frames.iter().any(|f| f.len() != c) {
        return Err(ApiError::BadRequest(format!("{what} has ragged frames")));
    }
    if frames.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ApiError::BadRequest(format!(
            "{what} has non-finite values"
        )));
    }
    Tensor::new(vec![n, c], frames.concat()).map_err(|e| ApiError::BadRequest(e.to_string()))
}

fn model<'a>(st: &'a AppState, name: &str) -> Result<&'a Arc<DenoiserModel>, ApiError> {
    st.store
        .models
        .get(name)
        .ok_or_else(|| ApiError::NotFound(format!("unknown model `{name}`")))
}

fn guidance(scale: Option<f64>) -> Result<GuidanceConfig, ApiError> {
    GuidanceConfig::new(scale.unwrap_or(GuidanceConfig::DIVERSE))
        .map_err(|e| ApiError::BadRequest(e.to_string()))
}

fn style(m: &DenoiserModel, subject: &Option<String>) -> Result<Style, ApiError> {
    match (subject, m.variant()) {
        (None, _) => Ok(Style::Mean),
        (Some(_), Variant::Head) => Err(ApiError::Conflict(
            "head models have no subject styles".into(),
        )),
        (Some(s), Variant::Facial) => m
            .subject_index(s)
            .map(Style::Subject)
            .ok_or_else(|| ApiError::NotFound(format!("unknown subject `{s}`"))),
    }
}

/// Audio for `n` frames from inline values, a stored track, or the track
/// paired with the base sequence. `None` means no audio condition.
fn resolve_audio(
    st: &AppState,
    m: &DenoiserModel,
    inline: &Option<Frames>,
    features: &Option<String>,
    paired: Option<&str>,
    n: usize,
) -> Result<Option<Tensor>, ApiError> {
    let a = m.arch().audio_in;
    let full = if let Some(frames) = inline {
        frames_to_tensor(frames, "audio")?
    } else {
        let track = match (features, paired) {
            (Some(id), _) => Some(
                st.store
                    .features
                    .get(id)
                    .ok_or_else(|| ApiError::NotFound(format!("unknown features `{id}`")))?,
            ),
            (None, Some(seq)) => st.store.paired_features(seq),
            (None, None) => None,
        };
        let Some(track) = track else { return Ok(None) };
        resample_features(&track.data, track.fps, DEFAULT_FPS)
            .map_err(|e| ApiError::BadRequest(e.to_string()))?
    };
    if full.dim(1) != a {
        return Err(ApiError::Conflict(format!(
            "model reads {a} audio channels, got {}",
            full.dim(1)
        )));
    }
    if full.dim(0) < n {
        return Err(ApiError::BadRequest(format!(
            "audio covers {} frames, {n} requested",
            full.dim(0)
        )));
    }
    Ok(Some(Tensor::from_fn(&[n, a], |i| full.data()[i])))
}

fn payload(index: usize, s: &MotionSequence) -> SequencePayload {
    SequencePayload {
        index,
        kind: kind_name(s.kind).into(),
        fps: s.fps,
        frames: s.to_frames(),
    }
}

/// Writes outputs under `<run_dir>/outputs/` when a run directory is set.
fn save_outputs(
    st: &AppState,
    job: &str,
    seqs: &[&MotionSequence],
) -> Result<Vec<String>, ApiError> {
    let Some(dir) = st.jobs.run_dir() else {
        return Ok(Vec::new());
    };
    let out = dir.join("outputs");
    std::fs::create_dir_all(&out).map_err(|e| ApiError::Internal(e.to_string()))?;
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let p = out.join(format!("{job}-{i}.mseq"));
            write_sequence(&p, s).map_err(|e| ApiError::Internal(e.to_string()))?;
            Ok(p.display().to_string())
        })
        .collect()
}

fn run_synthesize(
    st: &AppState,
    req: &SynthesizeRequest,
    job: &str,
) -> Result<(SynthesizeResult, Vec<String>), ApiError> {
    let m = model(st, &req.model)?;
    if req.count == 0 {
        return Err(ApiError::BadRequest("count must be at least 1".into()));
    }
    if req.length == 0 {
        return Err(ApiError::BadRequest("length must be positive".into()));
    }
    let g = guidance(req.scale)?;
    let st_style = style(m, &req.subject)?;
    let schedule = m
        .schedule()
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let n = req.length;
    let audio = resolve_audio(st, m, &req.audio, &req.features, None, n)?;
    let seqs = match m.variant() {
        Variant::Facial => {
            let cond = match audio {
                Some(a) => ConditionSet::new(a, st_style),
                None => ConditionSet::new(Tensor::zeros(&[n, m.arch().audio_in]), st_style).null(),
            };
            let mut sr = SampleRequest::new(cond, req.seed, req.count);
            sr.guidance = g;
            sample_facial(m, &schedule, &sr, Default::default())?
        }
        Variant::Head => {
            let audio = audio.unwrap_or_else(|| Tensor::zeros(&[n, m.arch().audio_in]));
            let jobs: Vec<HeadJob> = (0..req.count)
                .map(|i| HeadJob {
                    audio: audio.clone(),
                    spec: ImputationSpec::empty(n, m.arch().motion_channels),
                    seed: req.seed.wrapping_add(i as u64),
                })
                .collect();
            sample_head_batch(m, &schedule, &jobs, g, &HeadOptions::default())?
                .into_iter()
                .map(|o| o.sequence)
                .collect()
        }
    };
    let artifacts = save_outputs(st, job, &seqs.iter().collect::<Vec<_>>())?;
    Ok((
        SynthesizeResult {
            model: req.model.clone(),
            sequences: seqs
                .iter()
                .enumerate()
                .map(|(i, s)| payload(i, s))
                .collect(),
        },
        artifacts,
    ))
}

/// Base values and mask of an edit request.
fn edit_spec(
    st: &AppState,
    m: &DenoiserModel,
    req: &EditRequest,
) -> Result<ImputationSpec, ApiError> {
    let c = m.arch().motion_channels;
    let expected_kind = match m.variant() {
        Variant::Facial => MotionKind::Face,
        Variant::Head => MotionKind::Head,
    };
    let base = match (&req.sequence, &req.frames, req.length) {
        (Some(id), None, _) => {
            let s = st
                .store
                .sequences
                .get(id)
                .ok_or_else(|| ApiError::NotFound(format!("unknown sequence `{id}`")))?;
            if s.kind != expected_kind {
                return Err(ApiError::Conflict(format!(
                    "sequence `{id}` is {} motion, model `{}` is {}",
                    kind_name(s.kind),
                    req.model,
                    m.variant().name()
                )));
            }
            s.data().clone()
        }
        (None, Some(frames), _) => frames_to_tensor(frames, "frames")?,
        (None, None, Some(n)) if n > 0 => Tensor::zeros(&[n, c]),
        (Some(_), Some(_), _) => {
            return Err(ApiError::BadRequest(
                "give either `sequence` or `frames`".into(),
            ))
        }
        _ => {
            return Err(ApiError::BadRequest(
                "edit needs `sequence`, `frames` or `length`".into(),
            ))
        }
    };
    if base.dim(1) != c {
        return Err(ApiError::Conflict(format!(
            "model `{}` edits {c} channels, base has {}",
            req.model,
            base.dim(1)
        )));
    }
    let n = base.dim(0);
    let mut mask = match &req.mask {
        Some(mk) if mk.len() != n => {
            return Err(ApiError::BadRequest(format!(
                "mask has {} entries for {n} frames",
                mk.len()
            )))
        }
        Some(mk) => mk.clone(),
        None => vec![0.0; n],
    };
    let mut values = base;
    for k in &req.keyframes {
        if k.frame >= n || k.values.len() != c {
            return Err(ApiError::BadRequest(format!(
                "keyframe at frame {} with {} values does not fit {n}x{c}",
                k.frame,
                k.values.len()
            )));
        }
        values.data_mut()[k.frame * c..(k.frame + 1) * c].copy_from_slice(&k.values);
        mask[k.frame] = 1.0;
    }
    Ok(ImputationSpec::new(mask, values)?)
}

fn run_edit(
    st: &AppState,
    req: &EditRequest,
    job: &str,
) -> Result<(EditResult, Vec<String>), ApiError> {
    let m = model(st, &req.model)?;
    let spec = edit_spec(st, m, req)?;
    let n = spec.frames();
    let g = guidance(req.scale)?;
    let st_style = style(m, &req.subject)?;
    let schedule = m
        .schedule()
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let audio = resolve_audio(st, m, &req.audio, &req.features, req.sequence.as_deref(), n)?;
    let (seq, boundary) = match m.variant() {
        Variant::Facial => {
            let cond = match audio {
                Some(a) => ConditionSet::new(a, st_style),
                None => ConditionSet::new(Tensor::zeros(&[n, m.arch().audio_in]), st_style).null(),
            };
            let opts = EditOptions {
                final_replacement: req.final_replacement,
                ..EditOptions::default()
            };
            let out = edit_facial(m, &schedule, &spec, &cond, g, req.seed, &opts)?;
            (out.sequence, out.boundary)
        }
        Variant::Head => {
            let audio = audio.unwrap_or_else(|| Tensor::zeros(&[n, m.arch().audio_in]));
            let opts = HeadOptions {
                mode: req.mode,
                ..HeadOptions::default()
            };
            let out = sample_head_sgdiff(m, &schedule, &audio, &spec, g, req.seed, &opts)?;
            (out.sequence, out.boundary)
        }
    };
    let artifacts = save_outputs(st, job, &[&seq])?;
    let known = spec
        .mask()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect();
    Ok((
        EditResult {
            model: req.model.clone(),
            fps: seq.fps,
            frames: seq.to_frames(),
            known_frames: known,
            boundary,
        },
        artifacts,
    ))
}

fn metric_err(e: metrics::MetricsError) -> ApiError {
    ApiError::BadRequest(e.to_string())
}

pub fn run_metrics(req: &MetricsRequest) -> Result<MetricReport, ApiError> {
    let pred = frames_to_tensor(&req.pred, "pred")?;
    let gt = frames_to_tensor(&req.gt, "gt")?;
    let c = gt.dim(1);
    let region = req.region.clone().unwrap_or_else(|| (0..c).collect());
    let lip = metrics::dtw_distance(&pred, &gt, &region).map_err(metric_err)?;
    let fps = req.fps.unwrap_or(DEFAULT_FPS);
    let sigma = req.sigma.unwrap_or(DEFAULT_SIGMA);
    let kind = match req.kind.as_deref() {
        Some("head") => MotionKind::Head,
        Some("face") => MotionKind::Face,
        None if c == 3 => MotionKind::Head,
        None => MotionKind::Face,
        Some(other) => return Err(ApiError::BadRequest(format!("unknown kind `{other}`"))),
    };
    let beat_align = if kind == MotionKind::Head {
        let to_seq = |t: &Tensor| {
            MotionSequence::new(MotionKind::Head, fps, "", t.clone())
                .map_err(|e| ApiError::BadRequest(e.to_string()))
        };
        let bp = metrics::detect_beats(&to_seq(&pred)?).map_err(metric_err)?;
        let bg = metrics::detect_beats(&to_seq(&gt)?).map_err(metric_err)?;
        if bg.is_empty() {
            None
        } else {
            Some(metrics::beat_align(&bp, &bg, sigma).map_err(metric_err)?)
        }
    } else {
        None
    };
    let div = match &req.samples {
        Some(set) => {
            let ts = set
                .iter()
                .map(|s| frames_to_tensor(s, "sample"))
                .collect::<Result<Vec<_>, _>>()?;
            Some(metrics::diversity_of(&ts.iter().collect::<Vec<_>>()).map_err(metric_err)?)
        }
        None => None,
    };
    Ok(MetricReport {
        lip_sync: Some(lip),
        div,
        beat_align,
        metadata: ReportMeta {
            sigma,
            region,
            samples: req.samples.as_ref().map_or(0, Vec::len),
            frames: gt.dim(0),
        },
    })
}
