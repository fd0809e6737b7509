use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{GraphId, ModelError, ModelStore};
use crate::entity::{EdgeId, EntityId, Kind, Lifetime, Side, Timestamp};
use crate::event::Labels;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Parent,
    Children,
    Siblings,
}

/// Immutable view of a graph at one instant, nested graphs included.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaticGraph {
    pub id: GraphId,
    pub side: Side,
    pub owner: String,
    pub at: Timestamp,
    pub nodes: BTreeMap<EntityId, StaticNode>,
    pub edges: BTreeMap<EdgeId, StaticEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaticNode {
    pub kind: Kind,
    pub lifetime: Lifetime,
    pub labels: Labels,
    pub nested: Option<StaticGraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaticEdge {
    pub source: EntityId,
    pub target: EntityId,
    pub lifetime: Lifetime,
    pub labels: Labels,
}

impl StaticGraph {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Depth-first walk over every node of this graph and its nested graphs.
    pub fn all_nodes(&self) -> Vec<(&EntityId, &StaticNode)> {
        let mut out = Vec::new();
        self.walk(&mut |graph| out.extend(graph.nodes.iter()));
        out
    }

    pub fn all_edges(&self) -> Vec<(&EdgeId, &StaticEdge)> {
        let mut out = Vec::new();
        self.walk(&mut |graph| out.extend(graph.edges.iter()));
        out
    }

    pub fn node_count(&self) -> usize {
        let mut count = 0;
        self.walk(&mut |graph| count += graph.nodes.len());
        count
    }

    pub fn edge_count(&self) -> usize {
        let mut count = 0;
        self.walk(&mut |graph| count += graph.edges.len());
        count
    }

    fn walk<'a>(&'a self, visit: &mut dyn FnMut(&'a StaticGraph)) {
        visit(self);
        for node in self.nodes.values() {
            if let Some(nested) = &node.nested {
                nested.walk(visit);
            }
        }
    }
}

/// One broken invariant found by [`ModelStore::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MalformedLifetime(String),
    CrossSubgraphEdge { edge: EdgeId },
    EdgeOutlivesEndpoint { edge: EdgeId, endpoint: EntityId },
    ChildKindMismatch { graph: GraphId, node: EntityId },
    SideMismatch { graph: GraphId, node: EntityId },
    ChildOutlivesParent { child: EntityId, parent: EntityId },
    NestingCycle { graph: GraphId },
    DanglingNestedGraph { node: EntityId },
    NodeIndexMismatch { node: EntityId },
}

impl ModelStore {
    pub fn kind_of(&self, id: &str) -> Option<Kind> {
        self.node(id).map(|n| n.kind)
    }

    pub fn is_alive(&self, id: &str, t: Timestamp) -> bool {
        self.node(id).is_some_and(|n| n.lifetime.contains(t))
    }

    pub fn parent_of(&self, id: &str) -> Option<&EntityId> {
        let graph = self.graph_of(id)?;
        self.graph(graph)?.parent_node.as_ref()
    }

    /// Closest ancestor (or the entity itself) of the given kind.
    pub fn ancestor_of_kind(&self, id: &str, kind: Kind) -> Option<&EntityId> {
        let mut current = &self.node(id)?.id;
        loop {
            if self.kind_of(current.as_str())? == kind {
                return Some(current);
            }
            current = self.parent_of(current.as_str())?;
        }
    }

    pub fn children_at(&self, id: &str, t: Timestamp) -> Vec<EntityId> {
        let Some(nested) = self.node(id).and_then(|n| n.nested_graph.as_ref()) else {
            return Vec::new();
        };
        self.graph(nested)
            .map(|g| {
                g.nodes
                    .values()
                    .filter(|n| n.lifetime.contains(t))
                    .map(|n| n.id.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn siblings_at(&self, id: &str, t: Timestamp) -> Vec<EntityId> {
        let Some(graph) = self.graph_of(id).and_then(|g| self.graph(g)) else {
            return Vec::new();
        };
        graph
            .nodes
            .values()
            .filter(|n| n.id.as_str() != id && n.lifetime.contains(t))
            .map(|n| n.id.clone())
            .collect()
    }

    /// All descendants of `kind` alive at `t`.
    pub fn descendants_at(&self, id: &str, kind: Kind, t: Timestamp) -> Vec<EntityId> {
        let mut frontier = vec![EntityId::from_raw(id)];
        while let Some(first) = frontier.first() {
            match self.kind_of(first.as_str()) {
                Some(k) if k == kind => break,
                Some(k) if k.is_ancestor_of(kind) => {}
                _ => return Vec::new(),
            }
            frontier = frontier
                .iter()
                .flat_map(|e| self.children_at(e.as_str(), t))
                .collect();
        }
        frontier
    }

    pub fn navigate(
        &self,
        id: &str,
        relation: Relation,
        t: Timestamp,
    ) -> Result<Vec<EntityId>, ModelError> {
        let node = self
            .node(id)
            .ok_or_else(|| ModelError::UnknownEntity(id.to_string()))?;
        if !node.lifetime.contains(t) {
            return Err(ModelError::NotAliveAt {
                id: id.to_string(),
                t,
            });
        }
        Ok(match relation {
            Relation::Parent => self.parent_of(id).cloned().into_iter().collect(),
            Relation::Children => self.children_at(id, t),
            Relation::Siblings => self.siblings_at(id, t),
        })
    }

    pub fn snapshot(&self, graph_id: &GraphId, t: Timestamp) -> Result<StaticGraph, ModelError> {
        let graph = self
            .graph(graph_id)
            .ok_or_else(|| ModelError::UnknownGraph(graph_id.to_string()))?;
        let nodes = graph
            .nodes
            .values()
            .filter(|n| n.lifetime.contains(t))
            .map(|n| {
                let nested = n
                    .nested_graph
                    .as_ref()
                    .map(|g| self.snapshot(g, t))
                    .transpose()?;
                Ok((
                    n.id.clone(),
                    StaticNode {
                        kind: n.kind,
                        lifetime: n.lifetime,
                        labels: n.labels.clone(),
                        nested,
                    },
                ))
            })
            .collect::<Result<_, ModelError>>()?;
        let edges = graph
            .edges
            .values()
            .filter(|e| e.lifetime.contains(t))
            .map(|e| {
                (
                    e.id.clone(),
                    StaticEdge {
                        source: e.source.clone(),
                        target: e.target.clone(),
                        lifetime: e.lifetime,
                        labels: e.labels.clone(),
                    },
                )
            })
            .collect();
        Ok(StaticGraph {
            id: graph.id.clone(),
            side: graph.side,
            owner: graph.owner.clone(),
            at: t,
            nodes,
            edges,
        })
    }

    pub fn platform_snapshot(&self, t: Timestamp) -> StaticGraph {
        self.snapshot(&GraphId::platform(), t)
            .expect("platform graph always exists")
    }

    /// Snapshots of every application that has at least one node alive at `t`.
    pub fn application_snapshots(&self, t: Timestamp) -> BTreeMap<String, StaticGraph> {
        self.applications
            .iter()
            .filter_map(|(app, gid)| {
                let snap = self.snapshot(gid, t).ok()?;
                (!snap.is_empty()).then(|| (app.clone(), snap))
            })
            .collect()
    }

    /// Checks every structural invariant of one graph and its nested graphs.
    pub fn validate(&self, graph_id: &GraphId) -> Result<Vec<Violation>, ModelError> {
        if self.graph(graph_id).is_none() {
            return Err(ModelError::UnknownGraph(graph_id.to_string()));
        }
        let mut violations = Vec::new();
        let mut visited = BTreeSet::new();
        self.validate_graph(graph_id, &mut visited, &mut violations);
        Ok(violations)
    }

    /// Validates every root graph; nested graphs are reached recursively.
    pub fn validate_all(&self) -> Vec<Violation> {
        let mut violations = Vec::new();
        let mut visited = BTreeSet::new();
        for graph in self.graphs.values().filter(|g| g.root) {
            self.validate_graph(&graph.id, &mut visited, &mut violations);
        }
        violations
    }

    fn validate_graph(
        &self,
        graph_id: &GraphId,
        visited: &mut BTreeSet<GraphId>,
        violations: &mut Vec<Violation>,
    ) {
        if !visited.insert(graph_id.clone()) {
            violations.push(Violation::NestingCycle {
                graph: graph_id.clone(),
            });
            return;
        }
        let Some(graph) = self.graph(graph_id) else {
            return;
        };
        let parent = graph.parent_node.as_ref().and_then(|p| self.node(p));
        let expected_kind = parent.and_then(|p| p.kind.child());

        for node in graph.nodes.values() {
            if !node.lifetime.is_well_formed() {
                violations.push(Violation::MalformedLifetime(node.id.to_string()));
            }
            if node.kind.side() != graph.side {
                violations.push(Violation::SideMismatch {
                    graph: graph_id.clone(),
                    node: node.id.clone(),
                });
            }
            match (expected_kind, parent) {
                (Some(kind), _) if kind != node.kind => {
                    violations.push(Violation::ChildKindMismatch {
                        graph: graph_id.clone(),
                        node: node.id.clone(),
                    });
                }
                (None, None) if node.kind.parent().is_some() => {
                    violations.push(Violation::ChildKindMismatch {
                        graph: graph_id.clone(),
                        node: node.id.clone(),
                    });
                }
                _ => {}
            }
            if let Some(parent) = parent {
                if !node.lifetime.within(&parent.lifetime) {
                    violations.push(Violation::ChildOutlivesParent {
                        child: node.id.clone(),
                        parent: parent.id.clone(),
                    });
                }
            }
            if self.graph_of(node.id.as_str()) != Some(graph_id) {
                violations.push(Violation::NodeIndexMismatch {
                    node: node.id.clone(),
                });
            }
            if let Some(nested) = &node.nested_graph {
                match self.graph(nested) {
                    Some(g) if g.parent_node.as_ref() == Some(&node.id) => {
                        self.validate_graph(nested, visited, violations);
                    }
                    Some(_) => violations.push(Violation::NestingCycle {
                        graph: nested.clone(),
                    }),
                    None => violations.push(Violation::DanglingNestedGraph {
                        node: node.id.clone(),
                    }),
                }
            }
        }

        for edge in graph.edges.values() {
            if !edge.lifetime.is_well_formed() {
                violations.push(Violation::MalformedLifetime(edge.id.to_string()));
            }
            let mut crosses = false;
            for endpoint in [&edge.source, &edge.target] {
                match graph.nodes.get(endpoint) {
                    None => crosses = true,
                    Some(node) if !edge.lifetime.within(&node.lifetime) => {
                        violations.push(Violation::EdgeOutlivesEndpoint {
                            edge: edge.id.clone(),
                            endpoint: endpoint.clone(),
                        });
                    }
                    Some(_) => {}
                }
            }
            if crosses {
                violations.push(Violation::CrossSubgraphEdge {
                    edge: edge.id.clone(),
                });
            }
        }
    }
}
