//! Event-sourced store for the anatomy graphs and the context mapping.
//!
//! Every mutation arrives as a [`StructuralEvent`] on a single serialized log.
//! Nodes, edges and mappings carry half-open validity intervals, so the state
//! of any graph at any past instant is recovered by filtering on lifetimes
//! instead of storing copies.

mod anatomy;
mod context;

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::entity::{EdgeId, EntityId, Kind, Lifetime, Side, Timestamp};
use crate::event::{Action, Labels, StructuralEvent};

pub use anatomy::{Relation, StaticEdge, StaticGraph, StaticNode, Violation};
pub use context::{ContextMapping, MappingView, StaticContextGraph};

pub const PLATFORM_GRAPH: &str = "platform";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GraphId(String);

impl GraphId {
    pub fn new(raw: impl Into<String>) -> Self {
        GraphId(raw.into())
    }

    pub fn platform() -> Self {
        GraphId(PLATFORM_GRAPH.to_string())
    }

    pub fn application(app_id: &str) -> Self {
        GraphId(format!("app:{app_id}"))
    }

    fn nested_under(node: &EntityId) -> Self {
        GraphId(format!("{node}#nested"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GraphId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for EntityId {
    fn borrow(&self) -> &str {
        self.as_str()
    }
}

impl Borrow<str> for EdgeId {
    fn borrow(&self) -> &str {
        self.as_str()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomyNode {
    pub id: EntityId,
    pub kind: Kind,
    pub lifetime: Lifetime,
    pub nested_graph: Option<GraphId>,
    pub labels: Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomyEdge {
    pub id: EdgeId,
    pub source: EntityId,
    pub target: EntityId,
    pub lifetime: Lifetime,
    pub labels: Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomyGraph {
    pub id: GraphId,
    pub side: Side,
    /// Application id (the job's stable key) or the literal `platform`.
    pub owner: String,
    pub root: bool,
    pub parent_node: Option<EntityId>,
    pub nodes: BTreeMap<EntityId, AnatomyNode>,
    pub edges: BTreeMap<EdgeId, AnatomyEdge>,
}

impl AnatomyGraph {
    fn new(id: GraphId, side: Side, owner: String, parent_node: Option<EntityId>) -> Self {
        AnatomyGraph {
            id,
            side,
            owner,
            root: parent_node.is_none(),
            parent_node,
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown graph `{0}`")]
    UnknownGraph(String),
    #[error("unknown application `{0}`")]
    UnknownApplication(String),
    #[error("edge endpoints `{from}` and `{to}` live in different subgraphs")]
    CrossSubgraphEdge { from: EntityId, to: EntityId },
    #[error("kind mismatch: {0}")]
    KindMismatch(String),
    #[error("expected sequence number {expected}, got {got}")]
    NonMonotoneSeq { expected: u64, got: u64 },
    #[error("sequence number {0} was already applied with different content")]
    SeqConflict(u64),
    #[error("event timestamp {got} precedes last applied timestamp {last}")]
    NonMonotoneTime { last: Timestamp, got: Timestamp },
    #[error("entity `{0}` already exists")]
    DuplicateEntity(String),
    #[error("`{id}` is not alive at {t}")]
    NotAliveAt { id: String, t: Timestamp },
    #[error("lifetime violation: {0}")]
    LifetimeViolation(String),
    #[error("`{0}` is not a well formed entity id for its kind")]
    InvalidId(String),
    #[error("kinds `{app}` and `{platform}` cannot be mapped onto each other")]
    KindIncompatible { app: String, platform: String },
    #[error("`{0}` is already mapped")]
    AlreadyMapped(EntityId),
    #[error("`{0}` is not mapped")]
    NotMapped(EntityId),
    #[error("event log sink: {0}")]
    Sink(String),
}

/// Outcome of a successful [`ModelStore::apply_event`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Applied {
    Applied,
    /// The event was already applied with the same seq and content.
    Duplicate,
}

/// Lifetime lookup used by the telemetry store to validate samples.
pub trait EntityLookup {
    fn entity_lifetime(&self, id: &str) -> Option<Lifetime>;
}

#[derive(Default)]
pub struct ModelStore {
    graphs: BTreeMap<GraphId, AnatomyGraph>,
    node_graph: BTreeMap<EntityId, GraphId>,
    edge_graph: BTreeMap<EdgeId, GraphId>,
    edges_by_node: BTreeMap<EntityId, BTreeSet<EdgeId>>,
    applications: BTreeMap<String, GraphId>,
    mappings: Vec<ContextMapping>,
    active_mapping: BTreeMap<EntityId, usize>,
    mappings_by_entity: BTreeMap<EntityId, Vec<usize>>,
    log: Vec<StructuralEvent>,
    last_ts: Option<Timestamp>,
    sink: Option<Box<dyn Write + Send + Sync>>,
}

impl fmt::Debug for ModelStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelStore")
            .field("graphs", &self.graphs.len())
            .field("mappings", &self.mappings.len())
            .field("events", &self.log.len())
            .finish()
    }
}

impl ModelStore {
    pub fn new() -> Self {
        let mut store = ModelStore::default();
        let platform = GraphId::platform();
        store.graphs.insert(
            platform.clone(),
            AnatomyGraph::new(platform, Side::Platform, PLATFORM_GRAPH.to_string(), None),
        );
        store
    }

    /// Rebuilds a store from a log; returns the index and error of the first
    /// rejected event.
    pub fn replay<'a>(
        events: impl IntoIterator<Item = &'a StructuralEvent>,
    ) -> Result<ModelStore, (usize, ModelError)> {
        let mut store = ModelStore::new();
        for (idx, event) in events.into_iter().enumerate() {
            store.apply_event(event.clone()).map_err(|e| (idx, e))?;
        }
        Ok(store)
    }

    /// Every applied event is also written (as one NDJSON line) to `sink`.
    pub fn set_sink(&mut self, sink: Box<dyn Write + Send + Sync>) {
        self.sink = Some(sink);
    }

    pub fn flush_sink(&mut self) -> std::io::Result<()> {
        match self.sink.as_mut() {
            Some(sink) => sink.flush(),
            None => Ok(()),
        }
    }

    pub fn next_seq(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn last_ts(&self) -> Option<Timestamp> {
        self.last_ts
    }

    pub fn log(&self) -> &[StructuralEvent] {
        &self.log
    }

    pub fn apply_event(&mut self, event: StructuralEvent) -> Result<Applied, ModelError> {
        let expected = self.next_seq();
        if event.seq < expected {
            return if self.log[event.seq as usize] == event {
                Ok(Applied::Duplicate)
            } else {
                Err(ModelError::SeqConflict(event.seq))
            };
        }
        if event.seq > expected {
            return Err(ModelError::NonMonotoneSeq {
                expected,
                got: event.seq,
            });
        }
        if let Some(last) = self.last_ts {
            if event.ts < last {
                return Err(ModelError::NonMonotoneTime {
                    last,
                    got: event.ts,
                });
            }
        }
        let ts = event.ts;
        // Each action validates completely before mutating anything.
        match &event.action {
            Action::CreateNode {
                id,
                kind,
                parent,
                labels,
            } => self.create_node(ts, id, *kind, parent.as_ref(), labels)?,
            Action::CloseNode { id } => self.close_node(ts, id)?,
            Action::CreateEdge {
                id,
                source,
                target,
                labels,
            } => self.create_edge(ts, id, source, target, labels)?,
            Action::CloseEdge { id } => self.close_edge(ts, id)?,
            Action::Map {
                app_entity,
                platform_entity,
            } => self.map(ts, app_entity, platform_entity)?,
            Action::Unmap { app_entity } => self.unmap(ts, app_entity)?,
        }
        self.last_ts = Some(ts);
        let sink_result = match self.sink.as_mut() {
            Some(sink) => writeln!(sink, "{}", event.to_json_line()),
            None => Ok(()),
        };
        self.log.push(event);
        sink_result.map_err(|e| ModelError::Sink(e.to_string()))?;
        Ok(Applied::Applied)
    }

    fn create_node(
        &mut self,
        ts: Timestamp,
        id: &EntityId,
        kind: Kind,
        parent: Option<&EntityId>,
        labels: &Labels,
    ) -> Result<(), ModelError> {
        if id.kind() != Some(kind) {
            return Err(ModelError::InvalidId(id.to_string()));
        }
        if self.node_graph.contains_key(id) {
            return Err(ModelError::DuplicateEntity(id.to_string()));
        }
        let graph_id = match (kind.parent(), parent) {
            (None, None) => match kind {
                Kind::Job => GraphId::application(id.stable_key()),
                _ => GraphId::platform(),
            },
            (None, Some(_)) => {
                return Err(ModelError::KindMismatch(format!(
                    "{kind} is a root kind and takes no parent"
                )))
            }
            (Some(expected), None) => {
                return Err(ModelError::KindMismatch(format!(
                    "{kind} requires a {expected} parent"
                )))
            }
            (Some(expected), Some(parent)) => {
                let parent_node = self
                    .node(parent)
                    .ok_or_else(|| ModelError::UnknownEntity(parent.to_string()))?;
                if parent_node.kind != expected {
                    return Err(ModelError::KindMismatch(format!(
                        "{kind} must be nested under a {expected}, not a {}",
                        parent_node.kind
                    )));
                }
                if !parent_node.lifetime.contains(ts) {
                    return Err(ModelError::NotAliveAt {
                        id: parent.to_string(),
                        t: ts,
                    });
                }
                parent_node
                    .nested_graph
                    .clone()
                    .expect("non-leaf kinds always carry a nested graph")
            }
        };

        if kind == Kind::Job {
            let owner = id.stable_key().to_string();
            self.graphs.insert(
                graph_id.clone(),
                AnatomyGraph::new(graph_id.clone(), Side::Application, owner.clone(), None),
            );
            self.applications.insert(owner, graph_id.clone());
        }
        let owner = self.graphs[&graph_id].owner.clone();
        let nested_graph = kind.child().map(|_| {
            let nested = GraphId::nested_under(id);
            self.graphs.insert(
                nested.clone(),
                AnatomyGraph::new(nested.clone(), kind.side(), owner, Some(id.clone())),
            );
            nested
        });
        let node = AnatomyNode {
            id: id.clone(),
            kind,
            lifetime: Lifetime::open(ts),
            nested_graph,
            labels: labels.clone(),
        };
        self.graphs
            .get_mut(&graph_id)
            .expect("graph resolved above")
            .nodes
            .insert(id.clone(), node);
        self.node_graph.insert(id.clone(), graph_id);
        Ok(())
    }

    fn close_node(&mut self, ts: Timestamp, id: &EntityId) -> Result<(), ModelError> {
        let node = self
            .node(id)
            .ok_or_else(|| ModelError::UnknownEntity(id.to_string()))?;
        if !node.lifetime.is_open() {
            return Err(ModelError::NotAliveAt {
                id: id.to_string(),
                t: ts,
            });
        }
        // Closing cascades over open descendants, incident edges and mappings.
        let mut subtree = Vec::new();
        self.collect_open_subtree(id, &mut subtree);
        let mut edges = BTreeSet::new();
        let mut mappings = BTreeSet::new();
        for entity in &subtree {
            let node = self.node(entity).expect("collected from store");
            if node.lifetime.start >= ts {
                return Err(ModelError::LifetimeViolation(format!(
                    "`{entity}` started at {} and cannot close at {ts}",
                    node.lifetime.start
                )));
            }
            for edge_id in self.edges_by_node.get(entity).into_iter().flatten() {
                let edge = self.edge(edge_id).expect("indexed edge exists");
                if edge.lifetime.is_open() {
                    if edge.lifetime.start >= ts {
                        return Err(ModelError::LifetimeViolation(format!(
                            "edge `{edge_id}` started at {} and cannot close at {ts}",
                            edge.lifetime.start
                        )));
                    }
                    edges.insert(edge_id.clone());
                }
            }
            for &idx in self.mappings_by_entity.get(entity).into_iter().flatten() {
                let mapping = &self.mappings[idx];
                if mapping.lifetime.is_open() {
                    if mapping.lifetime.start >= ts {
                        return Err(ModelError::LifetimeViolation(format!(
                            "mapping of `{}` started at {} and cannot close at {ts}",
                            mapping.app_entity, mapping.lifetime.start
                        )));
                    }
                    mappings.insert(idx);
                }
            }
        }
        for idx in mappings {
            let app = self.mappings[idx].app_entity.clone();
            self.mappings[idx].lifetime.end = Some(ts);
            self.active_mapping.remove(&app);
        }
        for edge_id in edges {
            self.edge_mut(&edge_id).expect("edge exists").lifetime.end = Some(ts);
        }
        for entity in subtree {
            self.node_mut(&entity).expect("node exists").lifetime.end = Some(ts);
        }
        Ok(())
    }

    fn collect_open_subtree(&self, id: &EntityId, out: &mut Vec<EntityId>) {
        let Some(node) = self.node(id) else { return };
        if !node.lifetime.is_open() {
            return;
        }
        out.push(id.clone());
        if let Some(nested) = node.nested_graph.as_ref().and_then(|g| self.graphs.get(g)) {
            for child in nested.nodes.keys() {
                self.collect_open_subtree(child, out);
            }
        }
    }

    fn create_edge(
        &mut self,
        ts: Timestamp,
        id: &EdgeId,
        source: &EntityId,
        target: &EntityId,
        labels: &Labels,
    ) -> Result<(), ModelError> {
        if self.edge_graph.contains_key(id) {
            return Err(ModelError::DuplicateEntity(id.to_string()));
        }
        for endpoint in [source, target] {
            let node = self
                .node(endpoint)
                .ok_or_else(|| ModelError::UnknownEntity(endpoint.to_string()))?;
            if !node.lifetime.contains(ts) {
                return Err(ModelError::NotAliveAt {
                    id: endpoint.to_string(),
                    t: ts,
                });
            }
        }
        let graph_id = self.node_graph[source].clone();
        if self.node_graph[target] != graph_id {
            return Err(ModelError::CrossSubgraphEdge {
                from: source.clone(),
                to: target.clone(),
            });
        }
        let edge = AnatomyEdge {
            id: id.clone(),
            source: source.clone(),
            target: target.clone(),
            lifetime: Lifetime::open(ts),
            labels: labels.clone(),
        };
        self.graphs
            .get_mut(&graph_id)
            .expect("endpoint graph exists")
            .edges
            .insert(id.clone(), edge);
        self.edge_graph.insert(id.clone(), graph_id);
        for endpoint in [source, target] {
            self.edges_by_node
                .entry(endpoint.clone())
                .or_default()
                .insert(id.clone());
        }
        Ok(())
    }

    fn close_edge(&mut self, ts: Timestamp, id: &EdgeId) -> Result<(), ModelError> {
        let edge = self
            .edge(id)
            .ok_or_else(|| ModelError::UnknownEntity(id.to_string()))?;
        if !edge.lifetime.is_open() {
            return Err(ModelError::NotAliveAt {
                id: id.to_string(),
                t: ts,
            });
        }
        if edge.lifetime.start >= ts {
            return Err(ModelError::LifetimeViolation(format!(
                "edge `{id}` started at {} and cannot close at {ts}",
                edge.lifetime.start
            )));
        }
        self.edge_mut(id).expect("checked").lifetime.end = Some(ts);
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&AnatomyNode> {
        let graph = self.node_graph.get(id)?;
        self.graphs.get(graph)?.nodes.get(id)
    }

    fn node_mut(&mut self, id: &str) -> Option<&mut AnatomyNode> {
        let graph = self.node_graph.get(id)?;
        self.graphs.get_mut(graph)?.nodes.get_mut(id)
    }

    pub fn edge(&self, id: &str) -> Option<&AnatomyEdge> {
        let graph = self.edge_graph.get(id)?;
        self.graphs.get(graph)?.edges.get(id)
    }

    fn edge_mut(&mut self, id: &str) -> Option<&mut AnatomyEdge> {
        let graph = self.edge_graph.get(id)?;
        self.graphs.get_mut(graph)?.edges.get_mut(id)
    }

    pub fn graph(&self, id: &GraphId) -> Option<&AnatomyGraph> {
        self.graphs.get(id)
    }

    pub fn graphs(&self) -> impl Iterator<Item = &AnatomyGraph> {
        self.graphs.values()
    }

    /// Graph that directly contains the node.
    pub fn graph_of(&self, id: &str) -> Option<&GraphId> {
        self.node_graph.get(id)
    }

    /// Application ids (job stable keys) ever created, in order.
    pub fn applications(&self) -> impl Iterator<Item = &str> {
        self.applications.keys().map(String::as_str)
    }

    pub fn application_graph(&self, app_id: &str) -> Option<&GraphId> {
        self.applications.get(app_id)
    }

    /// Canonical JSON rendering of the full store state; identical logs give
    /// identical strings.
    pub fn state_json(&self) -> String {
        #[derive(Serialize)]
        struct State<'a> {
            graphs: &'a BTreeMap<GraphId, AnatomyGraph>,
            mappings: &'a [ContextMapping],
            next_seq: u64,
            last_ts: Option<Timestamp>,
        }
        serde_json::to_string(&State {
            graphs: &self.graphs,
            mappings: &self.mappings,
            next_seq: self.next_seq(),
            last_ts: self.last_ts,
        })
        .expect("store state serializes")
    }

    #[cfg(test)]
    pub(crate) fn graphs_mut(&mut self) -> &mut BTreeMap<GraphId, AnatomyGraph> {
        &mut self.graphs
    }
}

impl EntityLookup for ModelStore {
    fn entity_lifetime(&self, id: &str) -> Option<Lifetime> {
        self.node(id)
            .map(|n| n.lifetime)
            .or_else(|| self.edge(id).map(|e| e.lifetime))
    }
}

#[cfg(test)]
mod tests;
