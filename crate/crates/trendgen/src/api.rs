//! HTTP interface. All state changes go through the writer mutex, so
//! concurrent requests behave like some serial order of admission.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex;

use trendgen_core::catalog::{
    LoadOptions, OutfitRecord, OutfitSource, Product, ProductRecord, RejectReason, Verdict,
};
use trendgen_core::compat::{
    PairingKey, DEFAULT_MARGIN, DEFAULT_NEGATIVES_PER_PAIR,
};
use trendgen_core::nn::{OptimizerKind, TrainConfig};
use trendgen_core::outfit::{all_pairings, Generator};
use trendgen_core::retrieval::{QuerySpace, MAX_K};
use trendgen_core::stylerank::DEFAULT_LAMBDA;
use trendgen_core::Error;

use crate::registry::{Registry, RegistryCell};
use crate::store::Store;

/// Upper bound on outfits per recommend call.
pub const MAX_COUNT: usize = 10;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Static bearer token; `None` disables the check.
    pub token: Option<String>,
    pub train: TrainConfig,
    pub margin: f64,
    pub negatives_per_pair: usize,
    pub space: QuerySpace,
    pub k: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            token: None,
            train: TrainConfig {
                learning_rate: 1e-4,
                epochs: 10,
                batch_size: 64,
                seed: 42,
                optimizer: OptimizerKind::SgdMomentum(0.9),
            },
            margin: DEFAULT_MARGIN,
            negatives_per_pair: DEFAULT_NEGATIVES_PER_PAIR,
            space: QuerySpace::Compat,
            k: MAX_K,
        }
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub registry: RegistryCell,
    writer: Mutex<Store>,
    training: Mutex<()>,
}

impl AppState {
    /// Loads any saved models from the store and builds the first registry.
    pub fn new(store: Store, config: ServiceConfig) -> trendgen_core::Result<Arc<Self>> {
        let models = store.load_models()?;
        let attribution = store.load_attribution()?.map(Arc::new);
        let registry = if models.is_empty() {
            None
        } else {
            let catalog = Arc::new(store.catalog().clone());
            Some(Registry::build(1, catalog, models, attribution, config.space)?)
        };
        Ok(Arc::new(Self {
            config,
            registry: RegistryCell::new(registry),
            writer: Mutex::new(store),
            training: Mutex::new(()),
        }))
    }

    /// Exclusive access to the store, for embedding callers.
    pub async fn store(&self) -> tokio::sync::MutexGuard<'_, Store> {
        self.writer.lock().await
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/v1/catalog", post(ingest))
        .route("/v1/train", post(train))
        .route("/v1/recommend/{product_id}", get(recommend))
        .route("/v1/review", post(review))
        .route("/v1/outfits", get(list_outfits))
        .route("/v1/appearance", get(appearance))
        .route("/v1/appearance/reset", post(reset_appearance))
        .route("/v1/metrics", get(metrics))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/v1/healthz", get(healthz))
        .merge(api)
        .with_state(state)
}

// ---------------------------------------------------------------------------
// Errors

/// Error body `{code, message, detail}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "detail": self.detail });
        (self.status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::UnknownProduct(_) => (StatusCode::NOT_FOUND, "unknown_product"),
            Error::UnknownOutfit(_) => (StatusCode::NOT_FOUND, "unknown_outfit"),
            Error::DuplicateProduct(_) => (StatusCode::CONFLICT, "duplicate_product"),
            Error::MissingModel(_) => (StatusCode::CONFLICT, "model_missing"),
            Error::EmptyPool(_) => (StatusCode::SERVICE_UNAVAILABLE, "generation_aborted"),
            Error::Empty(_) => (StatusCode::UNPROCESSABLE_ENTITY, "no_training_data"),
            Error::Io { .. } | Error::Corrupt { .. } | Error::Config(_) => {
                tracing::error!("internal error: {e}");
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
            _ => (StatusCode::BAD_REQUEST, "invalid_request"),
        };
        Self::new(status, code, e.to_string())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", e.to_string()))
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

// ---------------------------------------------------------------------------
// Handlers

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Value> {
    let reg = state.registry.snapshot();
    Json(json!({
        "status": "ok",
        "registry_version": reg.as_ref().map(|r| r.version),
        "products": reg.as_ref().map(|r| r.catalog.len()),
    }))
}

#[derive(Debug, Serialize)]
struct RejectedRecord {
    line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    product_id: Option<String>,
    reason: String,
}

/// Parses a JSONL catalog payload, collecting a reason for every bad line.
fn parse_products(body: &[u8]) -> std::result::Result<Vec<Product>, Vec<RejectedRecord>> {
    let text = match std::str::from_utf8(body) {
        Ok(t) => t,
        Err(e) => {
            return Err(vec![RejectedRecord {
                line: 0,
                product_id: None,
                reason: format!("payload is not UTF-8: {e}"),
            }])
        }
    };
    let mut products = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ProductRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                rejected.push(RejectedRecord {
                    line: i + 1,
                    product_id: None,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let id = record.product_id.clone();
        match record.into_product(i + 1, LoadOptions::default()) {
            Ok(p) => products.push(p),
            Err(e) => rejected.push(RejectedRecord {
                line: i + 1,
                product_id: Some(id),
                reason: e.to_string(),
            }),
        }
    }
    if rejected.is_empty() {
        Ok(products)
    } else {
        Err(rejected)
    }
}

async fn ingest(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let products = parse_products(&body).map_err(|rejected| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_records",
            format!("{} record(s) rejected; nothing ingested", rejected.len()),
        )
        .with_detail(json!({ "accepted": 0, "rejected": rejected }))
    })?;
    if products.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty_payload", "no catalog records in body"));
    }

    let mut store = state.writer.lock().await;
    let duplicates = store.duplicates(&products);
    if !duplicates.is_empty() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "duplicate_product",
            format!("{} product id(s) already exist", duplicates.len()),
        )
        .with_detail(json!({ "duplicates": duplicates })));
    }
    let accepted = store.ingest(products)?;
    store.audit(&format!("ingest accepted={accepted}"))?;

    // pools must cover the new products before the next recommendation
    let version = match state.registry.snapshot() {
        Some(current) => {
            let catalog = Arc::new(store.catalog().clone());
            let models = current.models.clone();
            let attribution = current.attribution.clone();
            let (version, space) = (current.version + 1, state.config.space);
            let next = blocking(move || Registry::build(version, catalog, models, attribution, space)).await??;
            Some(state.registry.swap(next).version)
        }
        None => None,
    };
    Ok(Json(json!({
        "accepted": accepted,
        "rejected": [],
        "catalog_size": store.catalog().len(),
        "registry_version": version,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    /// `anchor:target` slug or `all`.
    pairing: String,
    margin: Option<f64>,
    seed: Option<u64>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
}

async fn train(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: TrainRequest = parse_json(&body)?;
    let requested: Vec<PairingKey> = if req.pairing == "all" {
        all_pairings()
    } else {
        vec![req.pairing.parse().map_err(|e: Error| {
            ApiError::new(StatusCode::BAD_REQUEST, "invalid_pairing", e.to_string())
        })?]
    };
    let mut config = state.config.train.clone();
    config.seed = req.seed.unwrap_or(config.seed);
    config.epochs = req.epochs.unwrap_or(config.epochs);
    config.learning_rate = req.learning_rate.unwrap_or(config.learning_rate);
    config.validate()?;
    let margin = req.margin.unwrap_or(state.config.margin);
    if !(margin.is_finite() && margin > 0.0) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", "margin must be positive"));
    }

    let _training = state.training.lock().await;
    let (catalog, outfits) = {
        let store = state.writer.lock().await;
        (Arc::new(store.catalog().clone()), store.approved_outfits())
    };
    let negatives = state.config.negatives_per_pair;
    let (trained, skipped) =
        blocking(move || crate::train_selected(&catalog, &outfits, &requested, &config, margin, negatives))
    .await??;

    let store = state.writer.lock().await;
    store.save_models(trained.values().map(|(m, _)| m))?;
    let mut models = state
        .registry
        .snapshot()
        .map(|r| r.models.clone())
        .unwrap_or_default();
    let mut summary = Vec::new();
    for (pairing, (model, report)) in trained {
        summary.push(json!({
            "pairing": pairing.slug(),
            "triplets": report.triplets,
            "epoch_losses": report.epoch_losses,
        }));
        models.insert(pairing, model);
    }
    let catalog = Arc::new(store.catalog().clone());
    let attribution = state.registry.snapshot().and_then(|r| r.attribution.clone());
    let (version, space) = (state.registry.next_version(), state.config.space);
    let next = blocking(move || Registry::build(version, catalog, models, attribution, space)).await??;
    let version = state.registry.swap(next).version;
    store.audit(&format!("train version={version} pairings={}", summary.len()))?;
    Ok(Json(json!({
        "registry_version": version,
        "trained": summary,
        "skipped": skipped.iter().map(PairingKey::slug).collect::<Vec<_>>(),
    })))
}

fn item_json(p: &Product, count: Option<u64>) -> Value {
    let mut v = json!({
        "product_id": p.product_id,
        "division": p.division(),
        "category": p.attributes.category,
        "color": p.attributes.color,
        "multicolor": p.is_multicolor(),
        "title": p.title,
        "image_uri": p.image_uri,
    });
    if let Some(n) = count {
        v["appearance_count"] = json!(n);
    }
    v
}

fn parse_param<T: std::str::FromStr>(params: &HashMap<String, String>, key: &str, code: &'static str) -> ApiResult<Option<T>> {
    params
        .get(key)
        .map(|raw| {
            raw.parse()
                .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, code, format!("cannot parse {key}=`{raw}`")))
        })
        .transpose()
}

async fn recommend(
    State(state): State<Arc<AppState>>,
    Path(product_id): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let count = parse_param::<usize>(&params, "count", "invalid_count")?.unwrap_or(3);
    if count == 0 || count > MAX_COUNT {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_count",
            format!("count must be in 1..={MAX_COUNT}"),
        ));
    }
    let lambda = parse_param::<f64>(&params, "lambda", "invalid_lambda")?.unwrap_or(DEFAULT_LAMBDA);
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_lambda", "lambda must be a non-negative number"));
    }

    // one snapshot for the whole request
    let reg = state
        .registry
        .snapshot()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "registry_empty", "no trained models loaded"))?;
    let anchor = reg
        .catalog
        .get(&product_id)
        .ok_or_else(|| Error::UnknownProduct(product_id.clone()))?;
    let missing = reg.missing_pairings(anchor.division());
    if !missing.is_empty() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "model_missing",
            format!("{} pairing(s) needed for {} have no model", missing.len(), anchor.division()),
        )
        .with_detail(json!({ "pairings": missing.iter().map(PairingKey::slug).collect::<Vec<_>>() })));
    }

    let mut store = state.writer.lock().await;
    let mut table = store.table().clone();
    let mut stamper = store.stamper();
    let mut generator = Generator::new(&reg.catalog, &reg.index, &reg.templates);
    generator.k = state.config.k;
    let outfits = generator.generate_many(&product_id, count, &mut table, lambda, &mut stamper)?;
    store.commit_generated(&outfits, table)?;

    let table = store.table();
    let body: Vec<Value> = outfits
        .iter()
        .map(|o| {
            let items: Vec<Value> = o
                .selected_ids()
                .map(|id| item_json(reg.catalog.get(id).expect("selected from catalog"), Some(table.get(id))))
                .collect();
            json!({
                "outfit_id": o.outfit_id,
                "anchor": item_json(anchor, None),
                "items": items,
                "lambda": o.lambda_used,
                "created_at": o.created_at,
                "duplicate": o.duplicate,
                "verdict": Verdict::Pending,
            })
        })
        .collect();
    Ok(Json(json!({
        "product_id": product_id,
        "lambda": lambda,
        "registry_version": reg.version,
        "outfits": body,
    })))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewVerdict {
    Approved,
    Rejected,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ReviewSubmission {
    pub outfit_id: String,
    pub verdict: ReviewVerdict,
    #[serde(default)]
    pub reason: Option<RejectReason>,
    #[serde(default)]
    pub reviewer: String,
}

async fn review(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<OutfitRecord>> {
    let sub: ReviewSubmission = parse_json(&body)?;
    let mut store = state.writer.lock().await;
    let current = store
        .outfit(&sub.outfit_id)
        .ok_or_else(|| Error::UnknownOutfit(sub.outfit_id.clone()))?;
    if current.verdict != Verdict::Pending {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "already_reviewed",
            format!("outfit `{}` is {:?}", sub.outfit_id, current.verdict).to_lowercase(),
        ));
    }
    let mut updated = current.clone();
    match sub.verdict {
        ReviewVerdict::Approved => {
            updated.verdict = Verdict::Approved;
            updated.reason = None;
        }
        ReviewVerdict::Rejected => {
            let reason = sub.reason.ok_or_else(|| {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "reason_required", "a rejection needs a reason")
            })?;
            updated.verdict = Verdict::Rejected;
            updated.reason = Some(reason);
        }
    }
    updated.reviewer = (!sub.reviewer.is_empty()).then_some(sub.reviewer);
    store.record_review(updated.clone())?;
    Ok(Json(updated))
}

async fn list_outfits(
    State(state): State<Arc<AppState>>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let verdict = parse_param::<Verdict>(&params, "verdict", "invalid_verdict")?;
    let store = state.writer.lock().await;
    let catalog = store.catalog();
    let outfits: Vec<Value> = store
        .outfits()
        .iter()
        .filter(|r| verdict.is_none_or(|v| r.verdict == v))
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("record serializes");
            let items: Vec<Value> = r
                .item_ids
                .iter()
                .filter_map(|id| catalog.get(id))
                .map(|p| item_json(p, Some(store.table().get(&p.product_id))))
                .collect();
            v["items"] = Value::Array(items);
            v
        })
        .collect();
    Ok(Json(json!({ "count": outfits.len(), "outfits": outfits })))
}

async fn appearance(State(state): State<Arc<AppState>>) -> Json<Value> {
    let store = state.writer.lock().await;
    let table = store.table();
    Json(json!({ "entries": table.len(), "counts": table.as_map() }))
}

async fn reset_appearance(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let mut store = state.writer.lock().await;
    let dropped = store.reset_table("api")?;
    Ok(Json(json!({ "reset": true, "entries_dropped": dropped })))
}

async fn metrics(State(state): State<Arc<AppState>>) -> Json<Value> {
    let store = state.writer.lock().await;
    Json(store_metrics(&store, state.registry.snapshot().as_deref()))
}

/// Counts, approval rate over reviewed generated outfits, and the
/// distinct-item ratio of generated selections.
pub fn store_metrics(store: &Store, registry: Option<&Registry>) -> Value {
    let mut by_verdict: BTreeMap<&str, usize> = BTreeMap::new();
    let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
    let (mut approved, mut rejected, mut generated, mut duplicates) = (0usize, 0usize, 0usize, 0usize);
    let mut distinct = BTreeSet::new();
    let mut slots = 0usize;
    for r in store.outfits() {
        *by_verdict.entry(verdict_name(r.verdict)).or_default() += 1;
        if r.source != OutfitSource::Generated {
            continue;
        }
        generated += 1;
        duplicates += usize::from(r.duplicate);
        for id in &r.item_ids[1..] {
            distinct.insert(id.as_str());
            slots += 1;
        }
        match r.verdict {
            Verdict::Approved => approved += 1,
            Verdict::Rejected => {
                rejected += 1;
                let reason = match r.reason {
                    Some(RejectReason::Coherence) => "coherence",
                    Some(RejectReason::Variety) => "variety",
                    None => "unspecified",
                };
                *reasons.entry(reason).or_default() += 1;
            }
            Verdict::Pending => {}
        }
    }
    let reviewed = approved + rejected;
    json!({
        "products": store.catalog().len(),
        "division_counts": store.catalog().division_counts(),
        "registry_version": registry.map(|r| r.version),
        "pairings": registry.map(|r| r.models.keys().map(PairingKey::slug).collect::<Vec<_>>()).unwrap_or_default(),
        "outfits": {
            "total": store.outfits().len(),
            "generated": generated,
            "by_verdict": by_verdict,
            "duplicates": duplicates,
        },
        "approval_rate": (reviewed > 0).then(|| approved as f64 / reviewed as f64),
        "rejections": reasons,
        "distinct_item_ratio": (slots > 0).then(|| distinct.len() as f64 / slots as f64),
        "appearance_entries": store.table().len(),
    })
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Approved => "approved",
        Verdict::Rejected => "rejected",
        Verdict::Pending => "pending",
    }
}

