use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, Method, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use seastar_core::bus::CACHE_INVALIDATION;
use seastar_core::entity::{Kind, Timestamp};
use seastar_core::metric::{DerivedMetric, MetricEngine};
use seastar_core::model::Relation;
use seastar_core::pipeline::Shared;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::error::ApiError;
use crate::query;
use crate::tier::{Mode, TierProxy};
use crate::view::{parse_kind, CallerIdentity, Context, View, DEFAULT_WINDOW};
use crate::webhook::Dispatcher;

/// Extra `/statz` fields supplied by whoever drives ingestion.
pub type StatsHook = Arc<dyn Fn() -> Value + Send + Sync>;

/// The authoritative instance: answers from the model and stores.
#[derive(Clone)]
pub struct Master {
    pub shared: Shared,
    pub dispatcher: Option<Dispatcher>,
    pub stats_hook: Option<StatsHook>,
}

impl Master {
    pub fn new(shared: Shared) -> Self {
        Master {
            shared,
            dispatcher: None,
            stats_hook: None,
        }
    }

    pub fn with_dispatcher(mut self, dispatcher: Dispatcher) -> Self {
        self.dispatcher = Some(dispatcher);
        self
    }

    pub fn with_stats(mut self, hook: StatsHook) -> Self {
        self.stats_hook = Some(hook);
        self
    }

    fn view<R>(&self, params: &ViewParams, f: impl FnOnce(&View<'_>) -> Result<R, ApiError>) -> Result<R, ApiError> {
        let model = self.shared.model.read();
        let view = View {
            model: &model,
            samples: &self.shared.samples,
            engine: &self.shared.engine,
            t: params.t.unwrap_or_else(|| self.shared.now()),
            window: params.window.unwrap_or(DEFAULT_WINDOW),
        };
        f(&view)
    }

    fn invalidate_tiers(&self) {
        let now = self.shared.now();
        if let Err(e) = self.shared.bus.publish_json(CACHE_INVALIDATION, &json!({ "ts": now, "registration": true })) {
            tracing::warn!(error = %e, "cache invalidation not published");
        }
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct ViewParams {
    pub t: Option<Timestamp>,
    pub window: Option<usize>,
}

fn params(q: Result<Query<ViewParams>, QueryRejection>) -> Result<ViewParams, ApiError> {
    q.map(|Query(p)| p).map_err(|e| ApiError::BadRequest(e.body_text()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DmetricBody {
    metric_name: String,
    scope: String,
    function: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CallbackBody {
    callback_uri: String,
    scope: String,
    metric: String,
}

fn body_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

fn identity(headers: &HeaderMap) -> Result<Option<CallerIdentity>, ApiError> {
    if headers.contains_key(crate::view::HEADER_NODE) {
        CallerIdentity::from_headers(headers).map(Some)
    } else {
        Ok(None)
    }
}

fn subject(view: &View<'_>, kind: &str, id: &str, headers: &HeaderMap) -> Result<seastar_core::entity::EntityId, ApiError> {
    let kind: Kind = parse_kind(kind)?;
    if id == "self" {
        let who = CallerIdentity::from_headers(headers)?;
        view.resolve_self(kind, &who)
    } else {
        view.resolve(kind, id)
    }
}

async fn get_entity(
    State(m): State<Master>,
    Path((kind, id)): Path<(String, String)>,
    q: Result<Query<ViewParams>, QueryRejection>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let p = params(q)?;
    m.view(&p, |v| {
        let e = subject(v, &kind, &id, &headers)?;
        Ok(Json(v.render(&e)?).into_response())
    })
}

async fn get_aspect(
    State(m): State<Master>,
    Path((kind, id, aspect)): Path<(String, String, String)>,
    q: Result<Query<ViewParams>, QueryRejection>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let p = params(q)?;
    m.view(&p, |v| {
        let e = subject(v, &kind, &id, &headers)?;
        let list = |ids: Vec<_>| -> Result<Response, ApiError> {
            let objects = ids.iter().map(|i| v.render(i)).collect::<Result<Vec<_>, _>>()?;
            Ok(Json(objects).into_response())
        };
        match aspect.as_str() {
            "context" => match v.context(&e)? {
                Context::One(one) => Ok(Json(v.render(&one)?).into_response()),
                Context::Many(many) => list(many),
            },
            "parent" => {
                let parent = v.navigate(&e, Relation::Parent)?;
                Ok(Json(v.render(&parent[0])?).into_response())
            }
            "children" => list(v.navigate(&e, Relation::Children)?),
            "siblings" => list(v.navigate(&e, Relation::Siblings)?),
            other => Err(ApiError::BadRequest(format!("unknown aspect `{other}`"))),
        }
    })
}

async fn post_query(
    State(m): State<Master>,
    q: Result<Query<ViewParams>, QueryRejection>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let p = params(q)?;
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::BadRequest("query must be UTF-8".into()))?;
    let parsed = query::parse(text)?;
    let who = identity(&headers)?;
    m.view(&p, |v| Ok(Json(query::execute(v, &parsed, who.as_ref())?).into_response()))
}

async fn put_dmetric(State(m): State<Master>, body: Bytes) -> Result<Response, ApiError> {
    let b: DmetricBody = body_json(&body)?;
    let scope = parse_kind(&b.scope)?;
    let known = MetricEngine::known_raw_metrics(&m.shared.samples);
    m.shared
        .engine
        .register_metric(DerivedMetric::new(&b.metric_name, scope, &b.function), &known)?;
    m.invalidate_tiers();
    Ok(Json(json!({ "id": b.metric_name })).into_response())
}

async fn put_callback(State(m): State<Master>, body: Bytes) -> Result<Response, ApiError> {
    let b: CallbackBody = body_json(&body)?;
    let scope = parse_kind(&b.scope)?;
    let known = MetricEngine::known_raw_metrics(&m.shared.samples);
    let id = m.shared.engine.subscribe(&b.callback_uri, scope, &b.metric, &known)?;
    m.invalidate_tiers();
    Ok(Json(json!({ "id": id })).into_response())
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn master_statz(State(m): State<Master>) -> Json<Value> {
    let mut out = json!({
        "mode": Mode::Master,
        "clock": m.shared.now(),
        "webhooks": m.dispatcher.as_ref().map(|d| d.stats()).unwrap_or_default(),
        "derived_metrics": m.shared.engine.derived_metrics().len(),
        "subscriptions": m.shared.engine.subscriptions().len(),
        "series": m.shared.samples.series_count(),
        "samples": m.shared.samples.sample_count(),
    });
    if let Some(hook) = &m.stats_hook {
        out["pipeline"] = hook();
    }
    Json(out)
}

pub fn master_router(master: Master) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/statz", get(master_statz))
        .route("/query", post(post_query))
        .route("/dmetrics", put(put_dmetric))
        .route("/callbacks", put(put_callback))
        .route("/{kind}/{id}", get(get_entity))
        .route("/{kind}/{id}/{aspect}", get(get_aspect))
        .with_state(master)
}

async fn tier_statz(State(p): State<Arc<TierProxy>>) -> Json<Value> {
    Json(p.statz())
}

async fn tier_proxy(State(p): State<Arc<TierProxy>>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Response {
    p.handle(method, uri, headers, body).await
}

/// Router for forwarder and frontend modes: everything but the local
/// health and stats endpoints goes through the cache to the upstream.
pub fn tier_router(proxy: Arc<TierProxy>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/statz", get(tier_statz))
        .fallback(tier_proxy)
        .with_state(proxy)
}

/// Serves `router` until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    router: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}
