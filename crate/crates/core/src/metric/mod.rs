//! Derived metrics and edge-triggered subscriptions.

pub mod eval;
pub mod expr;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::marker::PhantomData;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::entity::{EntityId, Kind, Timestamp, NANOS_PER_SEC};
use crate::scalar::Scalar;
use crate::timeseries::{is_valid_metric_name, TimeSeriesStore};

pub use eval::{EvalError, Evaluator, Topology};
pub use expr::{parse, Expr, ParseError};

/// Metrics the sensors publish for every entity they observe.
pub const STANDARD_METRICS: [&str; 7] = [
    "cpu_utilization",
    "memory_rss",
    "memory_total",
    "io_read_bytes",
    "io_write_bytes",
    "net_tx_bytes",
    "net_rx_bytes",
];

pub const DEFAULT_EVAL_PERIOD: i64 = NANOS_PER_SEC;
pub const DEFAULT_LOOKBACK: i64 = 5 * NANOS_PER_SEC;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedMetric {
    pub metric_name: String,
    pub scope: Kind,
    pub function: String,
    /// Nanoseconds between evaluations.
    pub eval_period: i64,
}

impl DerivedMetric {
    pub fn new(name: &str, scope: Kind, function: &str) -> Self {
        DerivedMetric {
            metric_name: name.to_string(),
            scope,
            function: function.to_string(),
            eval_period: DEFAULT_EVAL_PERIOD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub id: u64,
    pub callback_uri: String,
    pub scope: Kind,
    pub metric: String,
}

/// One rising edge to be delivered to a subscriber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub subscription_id: u64,
    pub callback_uri: String,
    pub payload: WebhookPayload,
}

/// Exact body POSTed to a callback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebhookPayload {
    pub metric: String,
    pub scope: Kind,
    pub entity_id: String,
    pub value: f64,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegisterError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("type error: {0}")]
    Type(String),
    #[error("invalid metric name `{0}`")]
    InvalidName(String),
    #[error("metric `{0}` already exists")]
    DuplicateName(String),
    #[error("unknown base metric `{0}`")]
    UnknownBaseMetric(String),
    #[error("eval_period must be positive")]
    InvalidPeriod,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubscribeError {
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("malformed callback uri `{0}`")]
    MalformedUri(String),
    #[error("metric `{metric}` is scoped to {metric_scope}, not {requested}")]
    ScopeMismatch {
        metric: String,
        metric_scope: Kind,
        requested: Kind,
    },
}

/// Exponential backoff schedule for webhook delivery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 100,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `n` (0-based); the first attempt is immediate.
    pub fn delay_ms(&self, attempt: u32) -> u64 {
        match attempt {
            0 => 0,
            n => self.base_delay_ms << (n - 1).min(16),
        }
    }
}

pub fn validate_callback_uri(uri: &str) -> Result<url::Url, SubscribeError> {
    let parsed = url::Url::parse(uri).map_err(|_| SubscribeError::MalformedUri(uri.to_string()))?;
    if !matches!(parsed.scheme(), "http" | "https") || parsed.host().is_none() {
        return Err(SubscribeError::MalformedUri(uri.to_string()));
    }
    Ok(parsed)
}

struct Registered {
    def: DerivedMetric,
    expr: Expr,
}

#[derive(Default)]
struct Registry {
    metrics: BTreeMap<String, Registered>,
    subscriptions: BTreeMap<u64, Subscription>,
    next_subscription: u64,
}

#[derive(Default)]
struct EdgeState {
    fired: HashMap<(u64, EntityId), bool>,
    next_due: HashMap<u64, Timestamp>,
}

pub struct MetricEngine<V: Scalar> {
    lookback: i64,
    registry: RwLock<Registry>,
    edges: Mutex<EdgeState>,
    _value: PhantomData<fn() -> V>,
}

impl<V: Scalar> Default for MetricEngine<V> {
    fn default() -> Self {
        MetricEngine::new(DEFAULT_LOOKBACK)
    }
}

impl<V: Scalar> MetricEngine<V> {
    pub fn new(lookback: i64) -> Self {
        MetricEngine {
            lookback,
            registry: RwLock::new(Registry {
                next_subscription: 1,
                ..Registry::default()
            }),
            edges: Mutex::default(),
            _value: PhantomData,
        }
    }

    /// Raw metric names a new expression may reference.
    pub fn known_raw_metrics(store: &TimeSeriesStore<V>) -> BTreeSet<String> {
        let mut known = store.metric_names();
        known.extend(STANDARD_METRICS.iter().map(|m| m.to_string()));
        known
    }

    pub fn register_metric(
        &self,
        def: DerivedMetric,
        known_raw: &BTreeSet<String>,
    ) -> Result<(), RegisterError> {
        if !is_valid_metric_name(&def.metric_name) {
            return Err(RegisterError::InvalidName(def.metric_name));
        }
        if def.eval_period <= 0 {
            return Err(RegisterError::InvalidPeriod);
        }
        let expr = parse(&def.function)?;
        expr.type_check(def.scope).map_err(RegisterError::Type)?;
        let mut registry = self.registry.write();
        if registry.metrics.contains_key(&def.metric_name) || known_raw.contains(&def.metric_name) {
            return Err(RegisterError::DuplicateName(def.metric_name));
        }
        if let Some(unknown) = expr
            .base_metrics()
            .into_iter()
            .find(|m| !known_raw.contains(m))
        {
            return Err(RegisterError::UnknownBaseMetric(unknown));
        }
        registry
            .metrics
            .insert(def.metric_name.clone(), Registered { def, expr });
        Ok(())
    }

    pub fn derived(&self, name: &str) -> Option<DerivedMetric> {
        self.registry.read().metrics.get(name).map(|r| r.def.clone())
    }

    pub fn derived_metrics(&self) -> Vec<DerivedMetric> {
        self.registry
            .read()
            .metrics
            .values()
            .map(|r| r.def.clone())
            .collect()
    }

    /// Names of derived metrics that apply to entities of `scope`.
    pub fn derived_for_scope(&self, scope: Kind) -> Vec<String> {
        self.registry
            .read()
            .metrics
            .values()
            .filter(|r| r.def.scope == scope)
            .map(|r| r.def.metric_name.clone())
            .collect()
    }

    pub fn evaluate(
        &self,
        store: &TimeSeriesStore<V>,
        topology: &dyn Topology,
        name: &str,
        entity: &str,
        t: Timestamp,
    ) -> Result<V, EvalError> {
        let (scope, expr) = {
            let registry = self.registry.read();
            let r = registry
                .metrics
                .get(name)
                .ok_or_else(|| EvalError::UnknownMetric(name.to_string()))?;
            (r.def.scope, r.expr.clone())
        };
        let kind = topology
            .kind_of(entity)
            .ok_or_else(|| EvalError::UnknownEntity(entity.to_string()))?;
        if kind != scope {
            return Err(EvalError::ScopeMismatch {
                metric: name.to_string(),
                expected: scope,
                entity: entity.to_string(),
            });
        }
        if !topology.is_alive(entity, t) {
            return Err(EvalError::NotAliveAt {
                id: entity.to_string(),
                t,
            });
        }
        self.evaluator(store, topology).eval(&expr, entity, t)
    }

    pub fn evaluator<'a>(
        &self,
        store: &'a TimeSeriesStore<V>,
        topology: &'a dyn Topology,
    ) -> Evaluator<'a, V> {
        Evaluator {
            store,
            topology,
            lookback: self.lookback,
        }
    }

    pub fn subscribe(
        &self,
        callback_uri: &str,
        scope: Kind,
        metric: &str,
        known_raw: &BTreeSet<String>,
    ) -> Result<u64, SubscribeError> {
        validate_callback_uri(callback_uri)?;
        let mut registry = self.registry.write();
        match registry.metrics.get(metric) {
            Some(r) if r.def.scope != scope => {
                return Err(SubscribeError::ScopeMismatch {
                    metric: metric.to_string(),
                    metric_scope: r.def.scope,
                    requested: scope,
                })
            }
            Some(_) => {}
            None if known_raw.contains(metric) => {}
            None => return Err(SubscribeError::UnknownMetric(metric.to_string())),
        }
        let id = registry.next_subscription;
        registry.next_subscription += 1;
        registry.subscriptions.insert(
            id,
            Subscription {
                id,
                callback_uri: callback_uri.to_string(),
                scope,
                metric: metric.to_string(),
            },
        );
        Ok(id)
    }

    pub fn unsubscribe(&self, id: u64) -> bool {
        let removed = self.registry.write().subscriptions.remove(&id).is_some();
        if removed {
            let mut edges = self.edges.lock();
            edges.fired.retain(|(sub, _), _| *sub != id);
            edges.next_due.remove(&id);
        }
        removed
    }

    pub fn subscriptions(&self) -> Vec<Subscription> {
        self.registry.read().subscriptions.values().cloned().collect()
    }

    /// Evaluates every due subscription at `t` and returns the rising edges.
    ///
    /// A predicate is true when its value is nonzero. Missing data leaves the
    /// previous state untouched.
    pub fn detect(
        &self,
        store: &TimeSeriesStore<V>,
        topology: &dyn Topology,
        t: Timestamp,
    ) -> Vec<Notification> {
        let plan: Vec<(Subscription, Option<Expr>, i64)> = {
            let registry = self.registry.read();
            registry
                .subscriptions
                .values()
                .map(|s| {
                    let derived = registry.metrics.get(&s.metric);
                    (
                        s.clone(),
                        derived.map(|r| r.expr.clone()),
                        derived.map_or(DEFAULT_EVAL_PERIOD, |r| r.def.eval_period),
                    )
                })
                .collect()
        };
        let evaluator = self.evaluator(store, topology);
        let mut edges = self.edges.lock();
        let mut out = Vec::new();
        for (sub, expr, period) in plan {
            let due = edges.next_due.get(&sub.id).copied().unwrap_or(t);
            if t < due {
                continue;
            }
            edges.next_due.insert(sub.id, (t.div_euclid(period) + 1) * period);
            let alive = topology.alive_of_kind(sub.scope, t);
            for entity in &alive {
                let value = match &expr {
                    Some(expr) => evaluator.eval(expr, entity, t),
                    None => evaluator.eval(
                        &Expr::Metric(expr::MetricRef {
                            name: sub.metric.clone(),
                            child_kind: None,
                        }),
                        entity,
                        t,
                    ),
                };
                let Ok(value) = value else { continue };
                let now = value != V::zero();
                let before = edges
                    .fired
                    .insert((sub.id, entity.clone()), now)
                    .unwrap_or(false);
                if now && !before {
                    out.push(Notification {
                        subscription_id: sub.id,
                        callback_uri: sub.callback_uri.clone(),
                        payload: WebhookPayload {
                            metric: sub.metric.clone(),
                            scope: sub.scope,
                            entity_id: entity.to_string(),
                            value: value.to_f64_lossy(),
                            timestamp: t,
                        },
                    });
                }
            }
            let alive: BTreeSet<&EntityId> = alive.iter().collect();
            edges
                .fired
                .retain(|(s, e), _| *s != sub.id || alive.contains(e));
        }
        out
    }
}

#[cfg(test)]
mod tests;
