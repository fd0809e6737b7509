//! Telemetry collection: a source abstraction plus the two exporters that
//! turn source observations into bus records.

#[cfg(feature = "os-source")]
pub mod os;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::bus::{Bus, BusError, METRIC_SAMPLES, STRUCTURAL_EVENTS};
use crate::entity::{EdgeId, EntityId, Kind, Timestamp, NANOS_PER_MILLI, NANOS_PER_SEC};
use crate::event::{Action, Labels, StructuralEvent};
use crate::model::ModelStore;

pub use crate::metric::STANDARD_METRICS;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SourceError {
    #[error("source unavailable: {0}")]
    Unavailable(String),
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
}

#[derive(Debug, thiserror::Error)]
pub enum SensorError {
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("backing off until {0}")]
    BackingOff(Timestamp),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedEntity {
    pub kind: Kind,
    pub parent: Option<EntityId>,
    #[serde(default, skip_serializing_if = "Labels::is_empty")]
    pub labels: Labels,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedEdge {
    pub source: EntityId,
    pub target: EntityId,
    #[serde(default, skip_serializing_if = "Labels::is_empty")]
    pub labels: Labels,
}

/// Everything structural a source reports at one instant.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedState {
    pub entities: BTreeMap<EntityId, ObservedEntity>,
    pub edges: BTreeMap<EdgeId, ObservedEdge>,
    /// Application entity to the platform entity it runs on.
    pub mappings: BTreeMap<EntityId, EntityId>,
}

impl ObservedState {
    /// The model's view at `t` in the same shape, for comparison with a
    /// source's ground truth.
    pub fn from_model(model: &ModelStore, t: Timestamp) -> Self {
        let context = model.global_context(t);
        let mut state = ObservedState::default();
        let graphs = std::iter::once(&context.platform).chain(context.applications.values());
        for graph in graphs {
            for (id, node) in graph.all_nodes() {
                state.entities.insert(
                    id.clone(),
                    ObservedEntity {
                        kind: node.kind,
                        parent: model.parent_of(id).cloned(),
                        labels: node.labels.clone(),
                    },
                );
            }
            for (id, edge) in graph.all_edges() {
                state.edges.insert(
                    id.clone(),
                    ObservedEdge {
                        source: edge.source.clone(),
                        target: edge.target.clone(),
                        labels: edge.labels.clone(),
                    },
                );
            }
        }
        for m in context.mappings {
            state.mappings.insert(m.app_entity, m.platform_entity);
        }
        state
    }

    pub fn count(&self, kind: Kind) -> usize {
        self.entities.values().filter(|e| e.kind == kind).count()
    }
}

/// Actions that take the model from `old` to `new`.
///
/// Order: unmaps, edge closes, node closes leaf-first, node creates
/// root-first, edge creates, maps. A changed mapping becomes an unmap/map
/// pair.
pub fn diff(old: &ObservedState, new: &ObservedState) -> Vec<Action> {
    let mut actions = Vec::new();
    for (app, platform) in &old.mappings {
        if new.mappings.get(app) != Some(platform) {
            actions.push(Action::Unmap {
                app_entity: app.clone(),
            });
        }
    }
    for id in old.edges.keys() {
        if !new.edges.contains_key(id) {
            actions.push(Action::CloseEdge { id: id.clone() });
        }
    }
    let mut closed: Vec<(&EntityId, &ObservedEntity)> = old
        .entities
        .iter()
        .filter(|(id, _)| !new.entities.contains_key(*id))
        .collect();
    closed.sort_by_key(|(id, e)| (std::cmp::Reverse(e.kind.depth()), *id));
    actions.extend(
        closed
            .into_iter()
            .map(|(id, _)| Action::CloseNode { id: id.clone() }),
    );
    let mut created: Vec<(&EntityId, &ObservedEntity)> = new
        .entities
        .iter()
        .filter(|(id, _)| !old.entities.contains_key(*id))
        .collect();
    created.sort_by_key(|(id, e)| (e.kind.depth(), *id));
    actions.extend(created.into_iter().map(|(id, e)| Action::CreateNode {
        id: id.clone(),
        kind: e.kind,
        parent: e.parent.clone(),
        labels: e.labels.clone(),
    }));
    for (id, edge) in &new.edges {
        if !old.edges.contains_key(id) {
            actions.push(Action::CreateEdge {
                id: id.clone(),
                source: edge.source.clone(),
                target: edge.target.clone(),
                labels: edge.labels.clone(),
            });
        }
    }
    for (app, platform) in &new.mappings {
        if old.mappings.get(app) != Some(platform) {
            actions.push(Action::Map {
                app_entity: app.clone(),
                platform_entity: platform.clone(),
            });
        }
    }
    actions
}

/// A source of structural and metric observations.
pub trait SensorSource {
    /// The source's clock; collection timestamps come from here.
    fn now(&self) -> Timestamp;
    /// Platform entities (nodes, processors, cores), stable across calls.
    fn enumerate_platform(&self) -> Result<Vec<(EntityId, ObservedEntity)>, SourceError>;
    /// Full current structure, platform included.
    fn poll_structure(&self) -> Result<ObservedState, SourceError>;
    /// Entities whose metrics the exporter on `node` is responsible for.
    fn local_entities(&self, node: &EntityId) -> Result<Vec<EntityId>, SourceError>;
    fn poll_metrics(&self, entity: &EntityId) -> Result<Vec<(String, f64)>, SourceError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorConfig {
    pub metric_period: i64,
    pub structure_period: i64,
    /// `None` publishes every metric the source reports.
    pub allowlist: Option<BTreeSet<String>>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            metric_period: NANOS_PER_SEC,
            structure_period: 500 * NANOS_PER_MILLI,
            allowlist: None,
        }
    }
}

impl SensorConfig {
    pub fn is_valid(&self) -> bool {
        self.metric_period > 0 && self.structure_period > 0
    }
}

/// Doubling retry delay, reset on success.
#[derive(Debug, Clone)]
pub struct Backoff {
    base: i64,
    max: i64,
    current: i64,
    retry_at: Option<Timestamp>,
}

impl Backoff {
    pub fn new(base: i64, max: i64) -> Self {
        Backoff {
            base,
            max,
            current: base,
            retry_at: None,
        }
    }

    pub fn ready(&self, now: Timestamp) -> bool {
        self.retry_at.is_none_or(|at| now >= at)
    }

    pub fn retry_at(&self) -> Option<Timestamp> {
        self.retry_at
    }

    pub fn failed(&mut self, now: Timestamp) {
        self.retry_at = Some(now + self.current);
        self.current = (self.current * 2).min(self.max);
    }

    pub fn succeeded(&mut self) {
        self.current = self.base;
        self.retry_at = None;
    }
}

/// Publishes structural deltas with dense sequence numbers.
pub struct ContextExporter {
    bus: Bus,
    last: ObservedState,
    next_seq: u64,
    last_ts: Option<Timestamp>,
    pending: VecDeque<StructuralEvent>,
    backoff: Backoff,
}

impl ContextExporter {
    pub fn new(bus: Bus, config: &SensorConfig) -> Self {
        ContextExporter {
            bus,
            last: ObservedState::default(),
            next_seq: 0,
            last_ts: None,
            pending: VecDeque::new(),
            backoff: Backoff::new(config.structure_period, 16 * config.structure_period),
        }
    }

    /// Picks up after the events already in `model`, so a restarted exporter
    /// emits nothing for entities that did not change.
    pub fn resume(bus: Bus, config: &SensorConfig, model: &ModelStore) -> Self {
        let mut exporter = ContextExporter::new(bus, config);
        exporter.next_seq = model.next_seq();
        exporter.last_ts = model.last_ts();
        if let Some(t) = model.last_ts() {
            exporter.last = ObservedState::from_model(model, t);
        }
        exporter
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Events built but not yet accepted by the bus.
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Polls the source once and publishes the resulting events. Events the
    /// bus refuses stay queued and go out first on the next call.
    pub fn step(&mut self, source: &dyn SensorSource) -> Result<Vec<StructuralEvent>, SensorError> {
        let now = source.now();
        if !self.backoff.ready(now) {
            return Err(SensorError::BackingOff(self.backoff.retry_at().unwrap_or(now)));
        }
        let observed = match source.poll_structure() {
            Ok(state) => {
                self.backoff.succeeded();
                state
            }
            Err(e) => {
                self.backoff.failed(now);
                return Err(e.into());
            }
        };
        let ts = self.last_ts.map_or(now, |last| now.max(last));
        for action in diff(&self.last, &observed) {
            self.pending.push_back(StructuralEvent {
                seq: self.next_seq,
                ts,
                action,
            });
            self.next_seq += 1;
        }
        self.last = observed;
        self.last_ts = Some(ts);
        let mut sent = Vec::new();
        while let Some(event) = self.pending.front() {
            let bytes = serde_json::to_vec(event).expect("events serialize");
            self.bus.publish(STRUCTURAL_EVENTS, &bytes)?;
            sent.push(self.pending.pop_front().expect("front exists"));
        }
        Ok(sent)
    }
}

/// One telemetry sample as carried on the bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub entity_id: EntityId,
    pub metric: String,
    pub ts: Timestamp,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ExporterStats {
    pub batches: u64,
    pub samples: u64,
    pub dropped_samples: u64,
    pub source_errors: u64,
}

/// Publishes metric samples for the entities local to one node.
pub struct NodeExporter {
    node: EntityId,
    bus: Bus,
    allowlist: Option<BTreeSet<String>>,
    backoff: Backoff,
    stats: ExporterStats,
}

impl NodeExporter {
    pub fn new(node: EntityId, bus: Bus, config: &SensorConfig) -> Self {
        NodeExporter {
            node,
            bus,
            allowlist: config.allowlist.clone(),
            backoff: Backoff::new(config.metric_period, 16 * config.metric_period),
            stats: ExporterStats::default(),
        }
    }

    pub fn node(&self) -> &EntityId {
        &self.node
    }

    pub fn stats(&self) -> ExporterStats {
        self.stats
    }

    /// Collects one sample per (local entity, allowed metric) stamped with
    /// the source clock and publishes them as one batch. A full bus drops
    /// the batch and counts it.
    pub fn step(&mut self, source: &dyn SensorSource) -> Result<usize, SensorError> {
        let now = source.now();
        if !self.backoff.ready(now) {
            return Err(SensorError::BackingOff(self.backoff.retry_at().unwrap_or(now)));
        }
        let batch = match self.collect(source, now) {
            Ok(batch) => {
                self.backoff.succeeded();
                batch
            }
            Err(e) => {
                self.stats.source_errors += 1;
                self.backoff.failed(now);
                return Err(e.into());
            }
        };
        if batch.is_empty() {
            return Ok(0);
        }
        let bytes = serde_json::to_vec(&batch).expect("samples serialize");
        match self.bus.publish(METRIC_SAMPLES, &bytes) {
            Ok(_) => {
                self.stats.batches += 1;
                self.stats.samples += batch.len() as u64;
                Ok(batch.len())
            }
            Err(BusError::BufferFull { .. }) => {
                self.stats.dropped_samples += batch.len() as u64;
                Ok(0)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn collect(&self, source: &dyn SensorSource, now: Timestamp) -> Result<Vec<SampleRecord>, SourceError> {
        let mut batch = Vec::new();
        for entity in source.local_entities(&self.node)? {
            let metrics = match source.poll_metrics(&entity) {
                Ok(m) => m,
                // Raced with the entity ending; nothing to report.
                Err(SourceError::UnknownEntity(_)) => continue,
                Err(e) => return Err(e),
            };
            for (metric, value) in metrics {
                if !value.is_finite() {
                    continue;
                }
                if self.allowlist.as_ref().is_some_and(|a| !a.contains(&metric)) {
                    continue;
                }
                batch.push(SampleRecord {
                    entity_id: entity.clone(),
                    metric,
                    ts: now,
                    value,
                });
            }
        }
        Ok(batch)
    }
}
