//! Read-only rendering of the model at one instant.

use std::collections::BTreeMap;

use axum::http::HeaderMap;
use seastar_core::entity::{EntityId, Kind, Side, Timestamp};
use seastar_core::metric::Topology;
use seastar_core::model::{ModelStore, Relation};
use seastar_core::timeseries::SeriesKey;
use seastar_core::{MetricEngineF64, SampleStore};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Samples per metric in `attributes` unless `?window=` says otherwise.
pub const DEFAULT_WINDOW: usize = 10;

pub const HEADER_NODE: &str = "x-seastar-node";
pub const HEADER_PID: &str = "x-seastar-pid";
pub const HEADER_TID: &str = "x-seastar-tid";

/// One graph entity as served by the API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceObject {
    pub timestamp: Timestamp,
    /// Parent kind to parent id; empty for roots.
    pub parent_node: BTreeMap<String, String>,
    /// Plural child kind to the ids alive at `timestamp`.
    pub child_nodes: BTreeMap<String, Vec<String>>,
    pub sibling_nodes: BTreeMap<String, Vec<String>>,
    /// Metric to `[ts, value]` pairs, newest last.
    pub attributes: BTreeMap<String, Vec<(Timestamp, f64)>>,
    pub kind: Kind,
    pub id: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

/// Result of a context lookup: a single placement, or a set.
#[derive(Debug, Clone, PartialEq)]
pub enum Context {
    One(EntityId),
    Many(Vec<EntityId>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallerIdentity {
    pub node: String,
    pub pid: Option<u64>,
    pub tid: Option<u64>,
}

impl CallerIdentity {
    pub fn from_headers(headers: &HeaderMap) -> Result<Self, ApiError> {
        let text = |name: &str| -> Result<Option<String>, ApiError> {
            match headers.get(name) {
                None => Ok(None),
                Some(v) => v
                    .to_str()
                    .map(|s| Some(s.trim().to_string()))
                    .map_err(|_| ApiError::NoIdentity(format!("{name} is not text"))),
            }
        };
        let number = |name: &str| -> Result<Option<u64>, ApiError> {
            text(name)?
                .map(|s| s.parse().map_err(|_| ApiError::NoIdentity(format!("{name} must be an integer"))))
                .transpose()
        };
        let node = text(HEADER_NODE)?
            .filter(|s| !s.is_empty())
            .ok_or_else(|| ApiError::NoIdentity(format!("{HEADER_NODE} is required")))?;
        Ok(CallerIdentity {
            node,
            pid: number(HEADER_PID)?,
            tid: number(HEADER_TID)?,
        })
    }

    /// Node stable key; accepts `n3`, `node3`, `3` or a full entity id.
    fn node_key(&self) -> String {
        let raw = self.node.rsplit('/').next().unwrap_or(&self.node);
        if let Some(rest) = raw.strip_prefix("node") {
            return format!("n{rest}");
        }
        if raw.chars().all(|c| c.is_ascii_digit()) {
            return format!("n{raw}");
        }
        raw.to_string()
    }
}

pub fn parse_kind(text: &str) -> Result<Kind, ApiError> {
    text.parse().map_err(|_| ApiError::BadType(text.to_string()))
}

pub struct View<'a> {
    pub model: &'a ModelStore,
    pub samples: &'a SampleStore,
    pub engine: &'a MetricEngineF64,
    pub t: Timestamp,
    pub window: usize,
}

impl View<'_> {
    fn alive(&self, id: &EntityId) -> bool {
        self.model.node(id).is_some_and(|n| n.lifetime.contains(self.t))
    }

    /// Finds the entity of `kind` named by a stable key or a full id.
    pub fn resolve(&self, kind: Kind, id: &str) -> Result<EntityId, ApiError> {
        let mut candidates = Vec::new();
        if id.contains('/') {
            let full = EntityId::from_raw(id);
            if full.kind() != Some(kind) {
                return Err(ApiError::UnknownEntity(id.to_string()));
            }
            candidates.push(full);
        } else {
            candidates.push(EntityId::new(kind, id));
            // `/node/42` and `/job/3` shorthands
            if !id.is_empty() && id.chars().all(|c| c.is_ascii_digit()) {
                match kind {
                    Kind::Node => candidates.push(EntityId::new(kind, &format!("n{id}"))),
                    Kind::Job => candidates.push(EntityId::new(kind, &format!("j{id}"))),
                    _ => {}
                }
            }
        }
        candidates
            .into_iter()
            .find(|c| self.alive(c))
            .ok_or_else(|| ApiError::UnknownEntity(id.to_string()))
    }

    /// Maps the caller's identity headers to an alive entity of `kind`,
    /// walking up from the calling thread when needed.
    pub fn resolve_self(&self, kind: Kind, who: &CallerIdentity) -> Result<EntityId, ApiError> {
        let unknown = || ApiError::IdentityUnknown {
            kind: kind.to_string(),
        };
        let node = EntityId::new(Kind::Node, &who.node_key());
        if !self.alive(&node) {
            return Err(unknown());
        }
        if kind == Kind::Node {
            return Ok(node);
        }
        let pid = who
            .pid
            .ok_or_else(|| ApiError::NoIdentity(format!("{HEADER_PID} is required")))?
            .to_string();
        let process = self
            .model
            .alive_of_kind(Kind::Process, self.t)
            .into_iter()
            .find(|p| {
                self.model.node(p).is_some_and(|n| {
                    n.labels.get("pid") == Some(&pid) && n.labels.get("node") == Some(&node.stable_key().to_string())
                })
            })
            .ok_or_else(unknown)?;
        let thread = || {
            let tid = who.tid.map_or(pid.clone(), |t| t.to_string());
            self.model
                .children_at(&process, self.t)
                .into_iter()
                .find(|t| self.model.node(t).is_some_and(|n| n.labels.get("tid") == Some(&tid)))
                .ok_or_else(unknown)
        };
        match kind {
            Kind::Process => Ok(process),
            Kind::Job => self.model.ancestor_of_kind(&process, Kind::Job).cloned().ok_or_else(unknown),
            Kind::Thread => thread(),
            Kind::Core | Kind::Processor => {
                let core = self.model.mapped_platform(&thread()?, self.t).cloned().ok_or_else(unknown)?;
                if kind == Kind::Core {
                    Ok(core)
                } else {
                    self.model.parent_of(&core).cloned().ok_or_else(unknown)
                }
            }
            Kind::Node => unreachable!("handled above"),
        }
    }

    pub fn navigate(&self, id: &EntityId, relation: Relation) -> Result<Vec<EntityId>, ApiError> {
        let out = self.model.navigate(id, relation, self.t)?;
        if relation == Relation::Parent && out.is_empty() {
            return Err(ApiError::NoParent(id.to_string()));
        }
        Ok(out)
    }

    /// Application entities resolve to one placement when it is unique;
    /// platform entities always give a set.
    pub fn context(&self, id: &EntityId) -> Result<Context, ApiError> {
        let mut found = self.model.context_of(id, self.t)?;
        let app_side = id.kind().is_some_and(|k| k.side() == Side::Application);
        Ok(if app_side && found.len() == 1 {
            Context::One(found.remove(0))
        } else {
            Context::Many(found)
        })
    }

    /// Newest value of a raw or derived metric at the view instant.
    pub fn latest(&self, id: &EntityId, metric: &str) -> Option<f64> {
        if let Some(def) = self.engine.derived(metric) {
            if Some(def.scope) == id.kind() {
                return self.engine.evaluate(self.samples, self.model, metric, id, self.t).ok();
            }
        }
        let key = SeriesKey::new(id.as_str(), metric);
        self.samples.last_n(&key, self.t, 1).ok()?.pop().map(|s| s.value)
    }

    pub fn render(&self, id: &EntityId) -> Result<ResourceObject, ApiError> {
        let node = self
            .model
            .node(id)
            .filter(|n| n.lifetime.contains(self.t))
            .ok_or_else(|| ApiError::UnknownEntity(id.to_string()))?;
        let kind = node.kind;
        let mut parent_node = BTreeMap::new();
        if let Some(parent) = self.model.parent_of(id) {
            if let Some(pk) = kind.parent() {
                parent_node.insert(pk.to_string(), parent.to_string());
            }
        }
        let group = |ids: Vec<EntityId>, default: Option<Kind>| {
            let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
            if let Some(k) = default {
                out.insert(k.plural().to_string(), Vec::new());
            }
            for e in ids {
                if let Some(k) = e.kind() {
                    out.entry(k.plural().to_string()).or_default().push(e.to_string());
                }
            }
            out
        };
        let child_nodes = group(self.model.children_at(id, self.t), kind.child());
        let sibling_nodes = group(self.model.siblings_at(id, self.t), Some(kind));

        let mut attributes = BTreeMap::new();
        for metric in self.samples.list_metrics(self.model, id).unwrap_or_default() {
            let key = SeriesKey::new(id.as_str(), metric.as_str());
            let window: Vec<(Timestamp, f64)> = self
                .samples
                .last_n(&key, self.t, self.window)
                .unwrap_or_default()
                .into_iter()
                .map(|s| (s.ts, s.value))
                .collect();
            if !window.is_empty() {
                attributes.insert(metric, window);
            }
        }
        for metric in self.engine.derived_for_scope(kind) {
            if let Ok(v) = self.engine.evaluate(self.samples, self.model, &metric, id, self.t) {
                attributes.insert(metric, vec![(self.t, v)]);
            }
        }
        Ok(ResourceObject {
            timestamp: self.t,
            parent_node,
            child_nodes,
            sibling_nodes,
            attributes,
            kind,
            id: id.to_string(),
            labels: node.labels.clone(),
        })
    }
}
