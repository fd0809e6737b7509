//! Forwarder and frontend modes: a read-through cache in front of an
//! upstream instance.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use axum::body::Bytes;
use axum::http::{HeaderMap, HeaderValue, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use moka::sync::Cache;
use seastar_core::bus::{Bus, BusError, CACHE_INVALIDATION};
use seastar_core::entity::EntityId;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::ApiError;
use crate::view::{HEADER_NODE, HEADER_PID, HEADER_TID};

pub const CACHE_HEADER: &str = "x-seastar-cache";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Master,
    Forwarder,
    Frontend,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Master => "master",
            Mode::Forwarder => "forwarder",
            Mode::Frontend => "frontend",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "master" => Ok(Mode::Master),
            "forwarder" => Ok(Mode::Forwarder),
            "frontend" => Ok(Mode::Frontend),
            other => Err(format!("unknown mode `{other}` (master, forwarder, frontend)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TierConfig {
    pub mode: Mode,
    /// Base URL of the upstream instance, e.g. `http://127.0.0.1:7400`.
    pub upstream: Option<String>,
    pub cache_capacity: u64,
    pub cache_ttl: Duration,
    /// Entity-id prefixes this instance caches; empty caches everything.
    pub partition: Vec<String>,
}

impl Default for TierConfig {
    fn default() -> Self {
        TierConfig {
            mode: Mode::Master,
            upstream: None,
            cache_capacity: 10_000,
            cache_ttl: Duration::from_secs(2),
            partition: Vec::new(),
        }
    }
}

impl TierConfig {
    pub fn tiered(mode: Mode, upstream: impl Into<String>) -> Self {
        TierConfig {
            mode,
            upstream: Some(upstream.into()),
            ..TierConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match (self.mode, &self.upstream) {
            (Mode::Master, Some(_)) => Err("master mode takes no upstream".into()),
            (Mode::Forwarder | Mode::Frontend, None) => Err(format!("{} mode needs an upstream", self.mode)),
            (_, Some(u)) => match url::Url::parse(u) {
                Ok(url) if url.scheme() == "http" && url.has_host() => Ok(()),
                _ => Err(format!("upstream `{u}` is not an http URL")),
            },
            (Mode::Master, None) => Ok(()),
        }
    }

    /// Whether an entity id (full or stable key) falls in this partition.
    pub fn owns(&self, id: &str) -> bool {
        if self.partition.is_empty() {
            return true;
        }
        let key = EntityId::from_raw(id);
        let key = if id.contains('/') { key.stable_key() } else { id };
        self.partition.iter().any(|p| id.starts_with(p.as_str()) || key.starts_with(p.as_str()))
    }
}

#[derive(Clone)]
struct Cached {
    status: StatusCode,
    content_type: Option<HeaderValue>,
    body: Bytes,
}

#[derive(Debug, Default)]
struct Counters {
    hits: AtomicU64,
    misses: AtomicU64,
    bypassed: AtomicU64,
    upstream_errors: AtomicU64,
    invalidations: AtomicU64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub bypassed: u64,
    pub hit_rate: f64,
    pub entries: u64,
    pub upstream_errors: u64,
    pub invalidations: u64,
}

/// Shared state of a forwarder or frontend.
pub struct TierProxy {
    config: TierConfig,
    upstream: String,
    client: reqwest::Client,
    cache: Cache<String, Cached>,
    counters: Counters,
}

enum Cacheability {
    Cache(String),
    Bypass,
}

impl TierProxy {
    pub fn new(config: TierConfig) -> Result<Arc<Self>, String> {
        config.validate()?;
        let upstream = config
            .upstream
            .clone()
            .ok_or("tier proxy needs an upstream")?
            .trim_end_matches('/')
            .to_string();
        let cache = Cache::builder()
            .max_capacity(config.cache_capacity)
            .time_to_live(config.cache_ttl)
            .build();
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Arc::new(TierProxy {
            config,
            upstream,
            client,
            cache,
            counters: Counters::default(),
        }))
    }

    pub fn config(&self) -> &TierConfig {
        &self.config
    }

    pub fn invalidate(&self) {
        self.cache.invalidate_all();
        self.counters.invalidations.fetch_add(1, Ordering::Relaxed);
    }

    pub fn stats(&self) -> CacheStats {
        self.cache.run_pending_tasks();
        let hits = self.counters.hits.load(Ordering::Relaxed);
        let misses = self.counters.misses.load(Ordering::Relaxed);
        CacheStats {
            hits,
            misses,
            bypassed: self.counters.bypassed.load(Ordering::Relaxed),
            hit_rate: if hits + misses == 0 { 0.0 } else { hits as f64 / (hits + misses) as f64 },
            entries: self.cache.entry_count(),
            upstream_errors: self.counters.upstream_errors.load(Ordering::Relaxed),
            invalidations: self.counters.invalidations.load(Ordering::Relaxed),
        }
    }

    /// Drops the whole cache on every message of the bus's invalidation
    /// topic. For tiers that share a process (and so a bus) with the master;
    /// otherwise the TTL bounds staleness.
    pub fn follow_invalidations(self: &Arc<Self>, bus: &Bus, consumer: &str) -> Result<(), BusError> {
        let start = bus.next_offset(CACHE_INVALIDATION)?;
        let mut sub = bus.subscribe(CACHE_INVALIDATION, consumer, Some(start))?;
        let weak: Weak<TierProxy> = Arc::downgrade(self);
        let bus = bus.clone();
        let name = consumer.to_string();
        std::thread::Builder::new()
            .name(format!("invalidate-{consumer}"))
            .spawn(move || loop {
                let batch = sub.poll_wait(1024, Duration::from_millis(100));
                let Some(proxy) = weak.upgrade() else {
                    let _ = bus.remove_consumer(CACHE_INVALIDATION, &name);
                    return;
                };
                if let Some(last) = batch.last() {
                    proxy.invalidate();
                    let _ = sub.ack(last.offset);
                }
            })
            .map_err(BusError::Io)?;
        Ok(())
    }

    fn classify(&self, method: &Method, uri: &Uri, headers: &HeaderMap, body: &Bytes) -> Cacheability {
        let path = uri.path();
        let has_t = uri
            .query()
            .is_some_and(|q| q.split('&').any(|kv| kv.starts_with("t=")));
        let root = if *method == Method::GET {
            let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
            if segs.len() < 2 || has_t {
                return Cacheability::Bypass;
            }
            if segs[1] == "self" {
                headers.get(HEADER_NODE).and_then(|v| v.to_str().ok()).map(str::to_string)
            } else {
                Some(segs[1].to_string())
            }
        } else if *method == Method::POST && path == "/query" && !has_t {
            match std::str::from_utf8(body).ok().and_then(|q| crate::query::parse(q).ok()) {
                Some(q) => match q.root_id() {
                    Some(id) => Some(id.to_string()),
                    None => headers.get(HEADER_NODE).and_then(|v| v.to_str().ok()).map(str::to_string),
                },
                None => None,
            }
        } else {
            return Cacheability::Bypass;
        };
        match root {
            Some(id) if self.config.owns(&id) => {}
            // Unparseable queries go upstream for their error.
            _ => return Cacheability::Bypass,
        }
        let ident: Vec<&str> = [HEADER_NODE, HEADER_PID, HEADER_TID]
            .iter()
            .map(|h| headers.get(*h).and_then(|v| v.to_str().ok()).unwrap_or(""))
            .collect();
        let body = String::from_utf8_lossy(body);
        Cacheability::Cache(format!("{method} {uri}\n{}\n{body}", ident.join("|")))
    }

    pub async fn handle(&self, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Response {
        let class = self.classify(&method, &uri, &headers, &body);
        if let Cacheability::Cache(key) = &class {
            if let Some(hit) = self.cache.get(key) {
                self.counters.hits.fetch_add(1, Ordering::Relaxed);
                return respond(hit, "hit");
            }
        }
        let fetched = match self.forward(&method, &uri, &headers, body).await {
            Ok(c) => c,
            Err(e) => {
                self.counters.upstream_errors.fetch_add(1, Ordering::Relaxed);
                return ApiError::UpstreamUnavailable(e).into_response();
            }
        };
        if method == Method::PUT && fetched.status.is_success() {
            // A registration changes what objects render.
            self.invalidate();
        }
        match class {
            Cacheability::Cache(key) => {
                self.counters.misses.fetch_add(1, Ordering::Relaxed);
                if fetched.status == StatusCode::OK {
                    self.cache.insert(key, fetched.clone());
                }
                respond(fetched, "miss")
            }
            Cacheability::Bypass => {
                self.counters.bypassed.fetch_add(1, Ordering::Relaxed);
                respond(fetched, "bypass")
            }
        }
    }

    async fn forward(&self, method: &Method, uri: &Uri, headers: &HeaderMap, body: Bytes) -> Result<Cached, String> {
        let path = uri.path_and_query().map_or("/", |p| p.as_str());
        let url = format!("{}{}", self.upstream, path);
        let method = reqwest::Method::from_bytes(method.as_str().as_bytes()).map_err(|e| e.to_string())?;
        let mut req = self.client.request(method, &url).body(body.to_vec());
        for name in [HEADER_NODE, HEADER_PID, HEADER_TID, "content-type"] {
            if let Some(v) = headers.get(name).and_then(|v| v.to_str().ok()) {
                req = req.header(name, v);
            }
        }
        let resp = req.send().await.map_err(|e| format!("{url}: {e}"))?;
        let status = StatusCode::from_u16(resp.status().as_u16()).unwrap_or(StatusCode::BAD_GATEWAY);
        let content_type = resp
            .headers()
            .get("content-type")
            .and_then(|v| HeaderValue::from_bytes(v.as_bytes()).ok());
        let body = resp.bytes().await.map_err(|e| format!("{url}: {e}"))?;
        Ok(Cached {
            status,
            content_type,
            body: Bytes::from(body.to_vec()),
        })
    }

    pub fn statz(&self) -> serde_json::Value {
        json!({
            "mode": self.config.mode,
            "upstream": self.upstream,
            "cache": self.stats(),
        })
    }
}

fn respond(c: Cached, source: &'static str) -> Response {
    let mut resp = (c.status, c.body).into_response();
    if let Some(ct) = c.content_type {
        resp.headers_mut().insert("content-type", ct);
    }
    resp.headers_mut().insert(CACHE_HEADER, HeaderValue::from_static(source));
    resp
}
