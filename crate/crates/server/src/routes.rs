use std::collections::BTreeMap;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::Json;

use navtoken_core::bats::{self, SamplePlan};
use navtoken_core::cache::{CacheEntry, CacheKey, CacheStats};
use navtoken_core::episode;
use navtoken_core::metrics::{self, EpisodeMetrics};
use navtoken_core::organizer::{assemble_navigation, FeatureBank};
use navtoken_core::sim::{self, bats_step, step_seed, SimConfig, SimRun};
use navtoken_core::trajectory::{fit_scaling_factors, ScalingFactors, Trajectory};
use navtoken_core::tvi::TviParams;
use navtoken_core::types::FeatureMatrix;
use navtoken_core::wire::*;
use navtoken_core::{EmbodimentKind, SamplingCurve, COARSE_TOKENS_PER_FRAME};

use crate::error::{ApiError, ApiJson};
use crate::features::Loader;
use crate::session::Session;
use crate::AppState;

/// Largest `max_latest` a table request may ask for.
const MAX_TABLE_LATEST: u32 = 100_000;

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json),
        Err(e) => Err(ApiError::internal(format!("worker failed: {e}"))),
    }
}

pub async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        cache: crate::cache_path(&state).map(|p| p.display().to_string()),
    })
}

pub async fn solve(ApiJson(req): ApiJson<SolveRequest>) -> ApiResult<SolveResponse> {
    blocking(move || {
        let b = req.budget;
        let curve = SamplingCurve::solve(req.latest, b.cameras, b.budget, b.epsilon)?;
        let (mean, var) = curve.history_moments();
        Ok(SolveResponse {
            max_history: bats::max_history_frames(b.budget, b.cameras)?,
            expected_frames: curve.expected_frames(),
            history_mean: mean,
            history_sd: var.sqrt(),
            points: req.points.then(|| curve.points()),
            curve,
        })
    })
    .await
}

pub async fn table(ApiJson(req): ApiJson<TableRequest>) -> ApiResult<TableResponse> {
    if req.max_latest > MAX_TABLE_LATEST {
        return Err(ApiError::invalid(format!("max_latest {} above {MAX_TABLE_LATEST}", req.max_latest)));
    }
    blocking(move || {
        let b = req.budget;
        let table = bats::precompute_table(b.budget, b.cameras, b.epsilon, req.max_latest)?;
        Ok(TableResponse { feasibility_boundary: table.feasibility_boundary(), table })
    })
    .await
}

pub async fn draw(ApiJson(req): ApiJson<DrawRequest>) -> ApiResult<DrawResponse> {
    blocking(move || {
        let b = req.budget;
        let curve = SamplingCurve::solve(req.latest, b.cameras, b.budget, b.epsilon)?;
        let step = bats_step(&curve, req.seed, req.fallback)?;
        Ok(DrawResponse {
            visual_tokens: step.plan.visual_tokens(b.cameras as usize),
            plan: step.plan,
            regime: step.regime,
            trimmed: step.trimmed,
        })
    })
    .await
}

pub async fn organize(State(state): State<AppState>, ApiJson(req): ApiJson<OrganizeRequest>) -> ApiResult<OrganizeResponse> {
    blocking(move || {
        let ep = episode::ingest_str(&req.episode)?;
        let n = ep.rig.len();
        let last = ep.latest_t().expect("episodes have steps");
        let plan = match (req.plan, req.budget) {
            (Some(plan), _) => plan,
            (None, Some(b)) => {
                if b.cameras as usize != n {
                    return Err(ApiError::invalid(format!("budget is for {} cameras, the rig has {n}", b.cameras)));
                }
                let curve = SamplingCurve::solve(last, b.cameras, b.budget, b.epsilon)?;
                bats_step(&curve, step_seed(req.seed, last), true)?.plan
            }
            (None, None) => SamplePlan::keep_all(last, req.seed),
        };

        let tvi = TviParams::init(req.tvi.embed_dim, req.tvi.pe_dim, req.tvi.seed)?;
        let loader = Loader { kind: req.features, seed: req.seed, channels: tvi.embed_dim, cache: state.cache().map(|c| &**c) };
        let mut bank = FeatureBank::new();
        for t in plan.frames() {
            let step = ep.step(t).ok_or_else(|| ApiError::invalid(format!("plan keeps t={t}, which the episode lacks")))?;
            for f in &step.frames {
                loader.load(&mut bank, t, f.cam, &f.data_ref, t == plan.latest)?;
            }
        }
        let text_len = ep.step(plan.latest).map_or(0, |s| s.text_len);
        let text = vec![vec![0.0f32; tvi.embed_dim]; text_len];
        let seq = assemble_navigation(&plan, &ep.rig, &bank, &text, &tvi)?;
        Ok(OrganizeResponse { plan, layout: seq.layout() })
    })
    .await
}

pub async fn simulate(ApiJson(cfg): ApiJson<SimConfig>) -> ApiResult<SimRun> {
    blocking(move || Ok(sim::simulate(&cfg)?)).await
}

pub async fn eval(ApiJson(req): ApiJson<EvalRequest>) -> ApiResult<EvalResponse> {
    blocking(move || {
        let episodes: Vec<EpisodeMetrics> =
            req.episodes.iter().map(|e| metrics::evaluate_episode(e, &req.config)).collect::<Result<_, _>>()?;
        let report = metrics::aggregate_metrics(&episodes, &req.config)?;
        Ok(EvalResponse { report, episodes })
    })
    .await
}

pub async fn fit_alpha(ApiJson(req): ApiJson<FitAlphaRequest>) -> ApiResult<FitAlphaResponse> {
    blocking(move || {
        let mut groups: BTreeMap<EmbodimentKind, Vec<Trajectory>> = BTreeMap::new();
        for t in req.trajectories {
            groups.entry(t.embodiment).or_default().push(t);
        }
        if groups.is_empty() {
            return Err(ApiError::invalid("no trajectories"));
        }
        let rows = groups
            .into_iter()
            .map(|(kind, trajs)| {
                Ok(FitAlphaRow {
                    embodiment: kind,
                    trajectories: trajs.len(),
                    fitted: fit_scaling_factors(&trajs)?,
                    reference: ScalingFactors::reference(kind),
                })
            })
            .collect::<Result<_, ApiError>>()?;
        Ok(FitAlphaResponse { rows })
    })
    .await
}

fn require_cache(state: &AppState) -> Result<std::sync::Arc<navtoken_core::cache::CacheStore>, ApiError> {
    state.cache().cloned().ok_or_else(|| ApiError::not_found("the service has no feature cache"))
}

pub async fn cache_stats(State(state): State<AppState>) -> ApiResult<CacheStats> {
    Ok(Json(require_cache(&state)?.stats()))
}

pub async fn cache_keys(State(state): State<AppState>) -> ApiResult<Vec<String>> {
    Ok(Json(require_cache(&state)?.keys().iter().map(ToString::to_string).collect()))
}

pub async fn cache_put(
    State(state): State<AppState>,
    Path((episode, t, cam)): Path<(String, u32, u16)>,
    ApiJson(body): ApiJson<CacheTokens>,
) -> Result<StatusCode, ApiError> {
    let store = require_cache(&state)?;
    if body.tokens.len() != COARSE_TOKENS_PER_FRAME {
        return Err(ApiError::invalid(format!("expected {COARSE_TOKENS_PER_FRAME} token rows, got {}", body.tokens.len())));
    }
    let cols = body.tokens[0].len();
    if body.tokens.iter().any(|r| r.len() != cols) {
        return Err(ApiError::invalid("token rows differ in length"));
    }
    let data = body.tokens.into_iter().flatten().collect();
    let entry = CacheEntry::new(FeatureMatrix::new(COARSE_TOKENS_PER_FRAME, cols, data)?)?;
    let Json(()) = blocking(move || Ok(store.put(&CacheKey::new(episode, t, cam), &entry)?)).await?;
    Ok(StatusCode::CREATED)
}

pub async fn cache_get(State(state): State<AppState>, Path((episode, t, cam)): Path<(String, u32, u16)>) -> ApiResult<CacheTokens> {
    let store = require_cache(&state)?;
    blocking(move || {
        let entry = store.get(&CacheKey::new(episode, t, cam))?;
        Ok(CacheTokens { tokens: entry.tokens().iter_rows().map(<[f32]>::to_vec).collect() })
    })
    .await
}

pub async fn create_session(
    State(state): State<AppState>,
    ApiJson(req): ApiJson<SessionRequest>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let session = Session::new(req, state.cache().cloned())?;
    let id = state.insert_session(session);
    Ok((StatusCode::CREATED, Json(SessionCreated { id })))
}

pub async fn session_step(
    State(state): State<AppState>,
    Path(id): Path<u64>,
    ApiJson(step): ApiJson<StepRequest>,
) -> ApiResult<StepResponse> {
    let session = state.session(id).ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
    blocking(move || session.lock().step(step)).await
}

pub async fn delete_session(State(state): State<AppState>, Path(id): Path<u64>) -> Result<StatusCode, ApiError> {
    if state.remove_session(id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(format!("no session {id}")))
    }
}
