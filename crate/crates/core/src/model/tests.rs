use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use super::*;
use crate::entity::{EdgeId, EntityId, Kind};
use crate::event::{Action, Labels, StructuralEvent};

fn id(kind: Kind, key: &str) -> EntityId {
    EntityId::new(kind, key)
}

fn create(kind: Kind, key: &str, parent: Option<&EntityId>) -> Action {
    Action::CreateNode {
        id: id(kind, key),
        kind,
        parent: parent.cloned(),
        labels: Labels::new(),
    }
}

struct Log {
    store: ModelStore,
}

impl Log {
    fn new() -> Self {
        Log {
            store: ModelStore::new(),
        }
    }

    fn apply(&mut self, ts: Timestamp, action: Action) -> Result<Applied, ModelError> {
        let event = StructuralEvent {
            seq: self.store.next_seq(),
            ts,
            action,
        };
        self.store.apply_event(event)
    }

    fn ok(&mut self, ts: Timestamp, action: Action) {
        self.apply(ts, action).expect("event accepted");
    }
}

// ---------------------------------------------------------------------------
// Naive oracle: replays events into plain collections with its own rules.
// ---------------------------------------------------------------------------

#[derive(Default, Clone)]
struct Oracle {
    nodes: BTreeMap<EntityId, (Kind, Option<EntityId>, Timestamp, Option<Timestamp>)>,
    edges: BTreeMap<EdgeId, (EntityId, EntityId, Timestamp, Option<Timestamp>)>,
    maps: Vec<(EntityId, EntityId, Timestamp, Option<Timestamp>)>,
    last_ts: Option<Timestamp>,
}

#[derive(Debug, PartialEq, Eq)]
struct FlatState {
    nodes: BTreeSet<(EntityId, Kind, Option<EntityId>)>,
    edges: BTreeSet<(EdgeId, EntityId, EntityId)>,
    maps: BTreeSet<(EntityId, EntityId)>,
}

fn alive(start: Timestamp, end: Option<Timestamp>, t: Timestamp) -> bool {
    start <= t && end.is_none_or(|e| t < e)
}

impl Oracle {
    fn node_alive(&self, id: &EntityId, t: Timestamp) -> bool {
        self.nodes
            .get(id)
            .is_some_and(|&(_, _, s, e)| alive(s, e, t))
    }

    /// Same-subgraph test derived from parents alone: non-root nodes share a
    /// subgraph iff they share a parent; all platform roots share one graph;
    /// each job is alone in its graph.
    fn same_subgraph(&self, a: &EntityId, b: &EntityId) -> bool {
        let (ka, pa, _, _) = &self.nodes[a];
        let (kb, pb, _, _) = &self.nodes[b];
        match (pa, pb) {
            (Some(x), Some(y)) => x == y,
            (None, None) => match (ka, kb) {
                (Kind::Node, Kind::Node) => true,
                (Kind::Job, Kind::Job) => a == b,
                _ => false,
            },
            _ => false,
        }
    }

    fn open_subtree(&self, root: &EntityId) -> Vec<EntityId> {
        let mut out = vec![root.clone()];
        let mut idx = 0;
        while idx < out.len() {
            let current = out[idx].clone();
            for (child, (_, parent, _, end)) in &self.nodes {
                if parent.as_ref() == Some(&current) && end.is_none() {
                    out.push(child.clone());
                }
            }
            idx += 1;
        }
        out
    }

    /// Returns whether the event is valid, applying it when it is.
    fn apply(&mut self, ts: Timestamp, action: &Action) -> bool {
        if self.last_ts.is_some_and(|last| ts < last) {
            return false;
        }
        let ok = match action {
            Action::CreateNode {
                id, kind, parent, ..
            } => {
                let parent_ok = match (kind.parent(), parent) {
                    (None, None) => true,
                    (Some(pk), Some(p)) => {
                        self.nodes.get(p).is_some_and(|n| n.0 == pk) && self.node_alive(p, ts)
                    }
                    _ => false,
                };
                let fresh = !self.nodes.contains_key(id) && id.kind() == Some(*kind);
                if parent_ok && fresh {
                    self.nodes.insert(id.clone(), (*kind, parent.clone(), ts, None));
                }
                parent_ok && fresh
            }
            Action::CloseNode { id } => {
                if !self.nodes.get(id).is_some_and(|n| n.3.is_none()) {
                    return false;
                }
                let subtree = self.open_subtree(id);
                let members: BTreeSet<_> = subtree.iter().cloned().collect();
                let starts_ok = subtree.iter().all(|n| self.nodes[n].2 < ts)
                    && self.edges.values().all(|(s, d, start, end)| {
                        !(end.is_none() && (members.contains(s) || members.contains(d)))
                            || *start < ts
                    })
                    && self.maps.iter().all(|(a, p, start, end)| {
                        !(end.is_none() && (members.contains(a) || members.contains(p)))
                            || *start < ts
                    });
                if !starts_ok {
                    return false;
                }
                for n in &subtree {
                    self.nodes.get_mut(n).unwrap().3 = Some(ts);
                }
                for (s, d, _, end) in self.edges.values_mut() {
                    if end.is_none() && (members.contains(s) || members.contains(d)) {
                        *end = Some(ts);
                    }
                }
                for (a, p, _, end) in self.maps.iter_mut() {
                    if end.is_none() && (members.contains(a) || members.contains(p)) {
                        *end = Some(ts);
                    }
                }
                true
            }
            Action::CreateEdge {
                id, source, target, ..
            } => {
                let ok = !self.edges.contains_key(id)
                    && self.node_alive(source, ts)
                    && self.node_alive(target, ts)
                    && self.same_subgraph(source, target);
                if ok {
                    self.edges
                        .insert(id.clone(), (source.clone(), target.clone(), ts, None));
                }
                ok
            }
            Action::CloseEdge { id } => match self.edges.get_mut(id) {
                Some(edge) if edge.3.is_none() && edge.2 < ts => {
                    edge.3 = Some(ts);
                    true
                }
                _ => false,
            },
            Action::Map {
                app_entity,
                platform_entity,
            } => {
                let kinds_ok = match (self.nodes.get(app_entity), self.nodes.get(platform_entity))
                {
                    (Some(a), Some(p)) => {
                        a.0.side() == Side::Application && p.0 == a.0.counterpart()
                    }
                    _ => false,
                };
                let ok = kinds_ok
                    && self.node_alive(app_entity, ts)
                    && self.node_alive(platform_entity, ts)
                    && !self
                        .maps
                        .iter()
                        .any(|(a, _, _, end)| a == app_entity && end.is_none());
                if ok {
                    self.maps
                        .push((app_entity.clone(), platform_entity.clone(), ts, None));
                }
                ok
            }
            Action::Unmap { app_entity } => {
                match self
                    .maps
                    .iter_mut()
                    .find(|(a, _, _, end)| a == app_entity && end.is_none())
                {
                    Some(m) if m.2 < ts => {
                        m.3 = Some(ts);
                        true
                    }
                    _ => false,
                }
            }
        };
        if ok {
            self.last_ts = Some(ts);
        }
        ok
    }

    fn state_at(&self, t: Timestamp) -> FlatState {
        FlatState {
            nodes: self
                .nodes
                .iter()
                .filter(|(_, n)| alive(n.2, n.3, t))
                .map(|(id, n)| (id.clone(), n.0, n.1.clone()))
                .collect(),
            edges: self
                .edges
                .iter()
                .filter(|(_, e)| alive(e.2, e.3, t))
                .map(|(id, e)| (id.clone(), e.0.clone(), e.1.clone()))
                .collect(),
            maps: self
                .maps
                .iter()
                .filter(|m| alive(m.2, m.3, t))
                .map(|m| (m.0.clone(), m.1.clone()))
                .collect(),
        }
    }

    fn siblings_at(&self, of: &EntityId, t: Timestamp) -> Vec<EntityId> {
        let state = self.state_at(t);
        let me = state.nodes.iter().find(|n| &n.0 == of).unwrap();
        state
            .nodes
            .iter()
            .filter(|n| &n.0 != of && self.same_subgraph(&n.0, &me.0))
            .map(|n| n.0.clone())
            .collect()
    }
}

fn flatten(store: &ModelStore, t: Timestamp) -> FlatState {
    let ctx = store.global_context(t);
    let mut nodes = BTreeSet::new();
    let mut edges = BTreeSet::new();
    for graph in std::iter::once(&ctx.platform).chain(ctx.applications.values()) {
        for (id, node) in graph.all_nodes() {
            nodes.insert((id.clone(), node.kind, store.parent_of(id.as_str()).cloned()));
        }
        for (id, edge) in graph.all_edges() {
            edges.insert((id.clone(), edge.source.clone(), edge.target.clone()));
        }
    }
    FlatState {
        nodes,
        edges,
        maps: ctx
            .mappings
            .into_iter()
            .map(|m| (m.app_entity, m.platform_entity))
            .collect(),
    }
}

/// Job start, two processes, three threads, one process exit.
fn twelve_event_scenario() -> Vec<(Timestamp, Action)> {
    let node = id(Kind::Node, "n0");
    let cpu = id(Kind::Processor, "n0.s0");
    let job = id(Kind::Job, "j0");
    let p0 = id(Kind::Process, "j0.p0");
    let p1 = id(Kind::Process, "j0.p1");
    let t0 = id(Kind::Thread, "j0.p0.t0");
    vec![
        (0, create(Kind::Node, "n0", None)),
        (0, create(Kind::Processor, "n0.s0", Some(&node))),
        (0, create(Kind::Core, "n0.s0.c0", Some(&cpu))),
        (10, create(Kind::Job, "j0", None)),
        (10, create(Kind::Process, "j0.p0", Some(&job))),
        (12, create(Kind::Process, "j0.p1", Some(&job))),
        (
            15,
            Action::CreateEdge {
                id: EdgeId::between(&p0, &p1),
                source: p0.clone(),
                target: p1.clone(),
                labels: Labels::new(),
            },
        ),
        (20, create(Kind::Thread, "j0.p0.t0", Some(&p0))),
        (20, create(Kind::Thread, "j0.p0.t1", Some(&p0))),
        (25, create(Kind::Thread, "j0.p1.t0", Some(&p1))),
        (
            30,
            Action::Map {
                app_entity: t0.clone(),
                platform_entity: id(Kind::Core, "n0.s0.c0"),
            },
        ),
        (40, Action::CloseNode { id: p1.clone() }),
    ]
}

#[test]
fn empty_log_replays_to_empty_platform() {
    let store = ModelStore::replay(&[]).unwrap();
    assert!(store.platform_snapshot(0).is_empty());
    assert_eq!(store.applications().count(), 0);
    assert!(store.validate_all().is_empty());
}

#[test]
fn cross_subgraph_edge_rejected() {
    let mut log = Log::new();
    log.ok(0, create(Kind::Job, "j1", None));
    log.ok(0, create(Kind::Job, "j2", None));
    log.ok(0, create(Kind::Process, "j1.a", Some(&id(Kind::Job, "j1"))));
    log.ok(0, create(Kind::Process, "j2.b", Some(&id(Kind::Job, "j2"))));
    let before = log.store.state_json();
    let err = log
        .apply(
            1,
            Action::CreateEdge {
                id: EdgeId::new("e"),
                source: id(Kind::Process, "j1.a"),
                target: id(Kind::Process, "j2.b"),
                labels: Labels::new(),
            },
        )
        .unwrap_err();
    assert!(matches!(err, ModelError::CrossSubgraphEdge { .. }));
    assert_eq!(log.store.state_json(), before, "rejection leaves state untouched");
}

#[test]
fn seq_rules() {
    let mut store = ModelStore::new();
    let event = StructuralEvent {
        seq: 0,
        ts: 5,
        action: create(Kind::Node, "n0", None),
    };
    assert_eq!(store.apply_event(event.clone()), Ok(Applied::Applied));
    assert_eq!(store.apply_event(event.clone()), Ok(Applied::Duplicate));
    let mut conflicting = event.clone();
    conflicting.ts = 6;
    assert_eq!(
        store.apply_event(conflicting),
        Err(ModelError::SeqConflict(0))
    );
    let gap = StructuralEvent {
        seq: 5,
        ts: 5,
        action: create(Kind::Node, "n1", None),
    };
    assert_eq!(
        store.apply_event(gap),
        Err(ModelError::NonMonotoneSeq { expected: 1, got: 5 })
    );
    let backwards = StructuralEvent {
        seq: 1,
        ts: 4,
        action: create(Kind::Node, "n1", None),
    };
    assert!(matches!(
        store.apply_event(backwards),
        Err(ModelError::NonMonotoneTime { .. })
    ));
}

#[test]
fn kind_rules() {
    let mut log = Log::new();
    log.ok(0, create(Kind::Job, "j0", None));
    let job = id(Kind::Job, "j0");
    assert!(matches!(
        log.apply(0, create(Kind::Thread, "j0.t", Some(&job))),
        Err(ModelError::KindMismatch(_))
    ));
    assert!(matches!(
        log.apply(0, create(Kind::Process, "orphan", None)),
        Err(ModelError::KindMismatch(_))
    ));
    assert!(matches!(
        log.apply(0, create(Kind::Process, "j0.p", Some(&id(Kind::Job, "nope")))),
        Err(ModelError::UnknownEntity(_))
    ));
    assert!(matches!(
        log.apply(
            0,
            Action::CreateNode {
                id: id(Kind::Core, "x"),
                kind: Kind::Node,
                parent: None,
                labels: Labels::new()
            }
        ),
        Err(ModelError::InvalidId(_))
    ));
    assert!(matches!(
        log.apply(0, create(Kind::Job, "j0", None)),
        Err(ModelError::DuplicateEntity(_))
    ));
}

#[test]
fn twelve_event_scenario_matches_oracle() {
    let mut log = Log::new();
    let mut oracle = Oracle::default();
    for (ts, action) in twelve_event_scenario() {
        assert!(oracle.apply(ts, &action));
        log.ok(ts, action);
    }
    for probe in [5, 14, 27, 45] {
        let expected = oracle.state_at(probe);
        let actual = flatten(&log.store, probe);
        assert_eq!(actual.nodes.len(), expected.nodes.len(), "nodes at {probe}");
        assert_eq!(actual.edges.len(), expected.edges.len(), "edges at {probe}");
        assert_eq!(actual, expected);
    }
    // Frozen counts from the oracle replay.
    assert_eq!(oracle.state_at(5).nodes.len(), 3);
    assert_eq!(oracle.state_at(14).nodes.len(), 6);
    assert_eq!(oracle.state_at(27).nodes.len(), 9);
    assert_eq!(oracle.state_at(27).edges.len(), 1);
    assert_eq!(oracle.state_at(45).nodes.len(), 7);
    assert_eq!(oracle.state_at(45).edges.len(), 0);

    let t_mid = 22;
    assert_eq!(flatten(&log.store, t_mid), oracle.state_at(t_mid));
    for (node, ..) in oracle.state_at(27).nodes {
        let mut expected = oracle.siblings_at(&node, 27);
        expected.sort();
        let actual = log.store.navigate(node.as_str(), Relation::Siblings, 27).unwrap();
        assert_eq!(actual, expected, "siblings of {node}");
    }
}

#[test]
fn snapshot_respects_lifetimes() {
    let mut log = Log::new();
    for (ts, action) in twelve_event_scenario() {
        log.ok(ts, action);
    }
    let app = GraphId::application("j0");
    assert!(log.store.snapshot(&app, -1).unwrap().is_empty());
    let before = log.store.snapshot(&app, 39).unwrap();
    let after = log.store.snapshot(&app, 40).unwrap();
    assert_eq!(before.edge_count(), 1);
    assert_eq!(after.edge_count(), 0);
    let p1 = id(Kind::Process, "j0.p1");
    assert!(after.all_nodes().iter().all(|(n, _)| **n != p1));
    assert!(after
        .all_nodes()
        .iter()
        .all(|(n, _)| n.as_str() != "application/thread/j0.p1.t0"));
    assert!(matches!(
        log.store.snapshot(&GraphId::new("missing"), 0),
        Err(ModelError::UnknownGraph(_))
    ));
}

#[test]
fn navigation() {
    let mut log = Log::new();
    for (ts, action) in twelve_event_scenario() {
        log.ok(ts, action);
    }
    let thread = "application/thread/j0.p0.t1";
    assert_eq!(
        log.store.navigate(thread, Relation::Parent, 30).unwrap(),
        vec![id(Kind::Process, "j0.p0")]
    );
    // After p1 exits, p0 is the only process of the job.
    assert!(log
        .store
        .navigate("application/process/j0.p0", Relation::Siblings, 45)
        .unwrap()
        .is_empty());
    assert!(log
        .store
        .navigate("application/job/j0", Relation::Parent, 45)
        .unwrap()
        .is_empty());
    assert_eq!(
        log.store
            .navigate("application/job/j0", Relation::Children, 30)
            .unwrap()
            .len(),
        2
    );
    assert!(matches!(
        log.store.navigate("application/process/j0.p1", Relation::Parent, 45),
        Err(ModelError::NotAliveAt { .. })
    ));
    assert!(matches!(
        log.store.navigate("nope", Relation::Parent, 45),
        Err(ModelError::UnknownEntity(_))
    ));
}

#[test]
fn validate_detects_hand_corruption() {
    let mut log = Log::new();
    for (ts, action) in twelve_event_scenario() {
        log.ok(ts, action);
    }
    assert!(log.store.validate_all().is_empty());
    // Splice an edge between threads of different processes into p0's subgraph.
    let graph = log.store.graph_of("application/thread/j0.p0.t0").unwrap().clone();
    let edge = AnatomyEdge {
        id: EdgeId::new("bad"),
        source: id(Kind::Thread, "j0.p0.t0"),
        target: id(Kind::Thread, "j0.p1.t0"),
        lifetime: Lifetime { start: 26, end: Some(30) },
        labels: Labels::new(),
    };
    log.store
        .graphs_mut()
        .get_mut(&graph)
        .unwrap()
        .edges
        .insert(edge.id.clone(), edge);
    let violations = log.store.validate_all();
    assert_eq!(
        violations,
        vec![Violation::CrossSubgraphEdge {
            edge: EdgeId::new("bad")
        }]
    );
}

#[test]
fn durable_sink_receives_every_applied_event() {
    use std::sync::{Arc, Mutex};

    #[derive(Clone, Default)]
    struct Shared(Arc<Mutex<Vec<u8>>>);
    impl std::io::Write for Shared {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    let sink = Shared::default();
    let mut log = Log::new();
    log.store.set_sink(Box::new(sink.clone()));
    for (ts, action) in twelve_event_scenario() {
        log.ok(ts, action);
    }
    let _ = log.apply(50, Action::CloseNode { id: id(Kind::Job, "nope") });
    let bytes = sink.0.lock().unwrap().clone();
    let events = crate::event::read_log(bytes.as_slice()).unwrap();
    assert_eq!(events, log.store.log());
    let replayed = ModelStore::replay(&events).unwrap();
    assert_eq!(replayed.state_json(), log.store.state_json());
}

// ---------------------------------------------------------------------------
// Context mapping
// ---------------------------------------------------------------------------

fn two_node_platform(log: &mut Log) {
    for n in 0..2 {
        let node = format!("n{n}");
        log.ok(0, create(Kind::Node, &node, None));
        for s in 0..2 {
            let cpu = format!("{node}.s{s}");
            log.ok(0, create(Kind::Processor, &cpu, Some(&id(Kind::Node, &node))));
            for c in 0..2 {
                log.ok(
                    0,
                    create(
                        Kind::Core,
                        &format!("{cpu}.c{c}"),
                        Some(&id(Kind::Processor, &cpu)),
                    ),
                );
            }
        }
    }
}

fn map(app: &EntityId, core: &str) -> Action {
    Action::Map {
        app_entity: app.clone(),
        platform_entity: id(Kind::Core, core),
    }
}

#[test]
fn context_queries_and_migration() {
    let mut log = Log::new();
    two_node_platform(&mut log);
    log.ok(1, create(Kind::Job, "j", None));
    let job = id(Kind::Job, "j");
    log.ok(1, create(Kind::Process, "j.p0", Some(&job)));
    log.ok(1, create(Kind::Process, "j.p1", Some(&job)));
    let p0 = id(Kind::Process, "j.p0");
    let p1 = id(Kind::Process, "j.p1");
    log.ok(1, create(Kind::Thread, "j.p0.t0", Some(&p0)));
    log.ok(1, create(Kind::Thread, "j.p0.t1", Some(&p0)));
    log.ok(1, create(Kind::Thread, "j.p1.t0", Some(&p1)));
    let t1 = id(Kind::Thread, "j.p0.t0");
    let t2 = id(Kind::Thread, "j.p0.t1");
    let t3 = id(Kind::Thread, "j.p1.t0");
    let store = &log.store;
    assert_eq!(store.context_of(t1.as_str(), 1).unwrap(), Vec::<EntityId>::new());

    log.ok(2, map(&t1, "n0.s0.c0"));
    log.ok(2, map(&t2, "n0.s0.c0"));
    log.ok(2, map(&t3, "n1.s1.c0"));
    let store = &log.store;
    assert_eq!(
        store.context_of(t1.as_str(), 2).unwrap(),
        vec![id(Kind::Core, "n0.s0.c0")]
    );
    assert_eq!(
        store.context_of("platform/core/n0.s0.c0", 2).unwrap(),
        vec![t1.clone(), t2.clone()]
    );
    assert_eq!(
        store.context_of(job.as_str(), 2).unwrap(),
        vec![id(Kind::Node, "n0"), id(Kind::Node, "n1")]
    );
    assert_eq!(
        store.context_of(p0.as_str(), 2).unwrap(),
        vec![id(Kind::Processor, "n0.s0")]
    );
    assert_eq!(
        store.context_of("platform/node/n1", 2).unwrap(),
        vec![job.clone()]
    );
    assert_eq!(
        store.context_of("platform/processor/n1.s1", 2).unwrap(),
        vec![p1.clone()]
    );

    assert!(matches!(
        log.apply(
            3,
            Action::Map {
                app_entity: t1.clone(),
                platform_entity: id(Kind::Node, "n0")
            }
        ),
        Err(ModelError::KindIncompatible { .. })
    ));
    assert!(matches!(
        log.apply(3, map(&t1, "n0.s0.c1")),
        Err(ModelError::AlreadyMapped(_))
    ));

    // Migration of t1 to c1 at t=10.
    log.ok(10, Action::Unmap { app_entity: t1.clone() });
    log.ok(10, map(&t1, "n0.s0.c1"));
    assert_eq!(
        log.store.context_of(t1.as_str(), 9).unwrap(),
        vec![id(Kind::Core, "n0.s0.c0")]
    );
    assert_eq!(
        log.store.context_of(t1.as_str(), 10).unwrap(),
        vec![id(Kind::Core, "n0.s0.c1")]
    );
    log.ok(12, Action::Unmap { app_entity: t2.clone() });
    assert!(log.store.context_of(t2.as_str(), 13).unwrap().is_empty());
    assert!(matches!(
        log.apply(13, Action::Unmap { app_entity: t2.clone() }),
        Err(ModelError::NotMapped(_))
    ));

    // Closing a process closes the mappings of its threads.
    log.ok(20, Action::CloseNode { id: p1.clone() });
    assert!(log
        .store
        .context_of("platform/core/n1.s1.c0", 20)
        .unwrap()
        .is_empty());
    assert!(log.store.validate_all().is_empty());
}

#[test]
fn app_subgraphs_partition_global_mappings() {
    let mut log = Log::new();
    two_node_platform(&mut log);
    for j in 0..3 {
        let job = format!("j{j}");
        log.ok(1, create(Kind::Job, &job, None));
        let proc_key = format!("{job}.p0");
        log.ok(1, create(Kind::Process, &proc_key, Some(&id(Kind::Job, &job))));
        let thread_key = format!("{proc_key}.t0");
        log.ok(1, create(Kind::Thread, &thread_key, Some(&id(Kind::Process, &proc_key))));
        if j < 2 {
            log.ok(1, map(&id(Kind::Thread, &thread_key), &format!("n{j}.s0.c0")));
        }
    }
    let global = log.store.global_context(1);
    let mut union = BTreeSet::new();
    for app in ["j0", "j1", "j2"] {
        let sub = log.store.app_context_subgraph(app, 1).unwrap();
        assert_eq!(sub.platform, global.platform);
        union.extend(sub.mappings);
    }
    assert_eq!(union, global.mappings);
    assert!(log
        .store
        .app_context_subgraph("application/job/j2", 1)
        .unwrap()
        .mappings
        .is_empty());
    assert!(matches!(
        log.store.app_context_subgraph("zzz", 1),
        Err(ModelError::UnknownApplication(_))
    ));
}

// ---------------------------------------------------------------------------
// Generated event sequences
// ---------------------------------------------------------------------------

type Op = (u8, usize, usize, u8);

/// Turns random op codes into events over a small universe. Many events are
/// invalid on purpose; the oracle decides independently which ones are.
pub(crate) fn events_from_ops(ops: &[Op]) -> Vec<(Timestamp, Action)> {
    let mut created: Vec<(EntityId, Kind)> = Vec::new();
    let mut edges: Vec<EdgeId> = Vec::new();
    let mut counter = 0usize;
    let mut ts = 0;
    let mut out = Vec::new();
    for &(code, a, b, step) in ops {
        ts += step as Timestamp * 5;
        counter += 1;
        let pick = |i: usize| created.get(i % created.len().max(1)).cloned();
        let action = match code % 8 {
            0 => {
                let kind = if a % 2 == 0 { Kind::Node } else { Kind::Job };
                create(kind, &format!("r{counter}"), None)
            }
            1 | 7 => match pick(a) {
                Some((parent, pkind)) => {
                    let kind = if code % 8 == 7 {
                        Kind::ALL[b % 6]
                    } else {
                        pkind.child().unwrap_or(Kind::Thread)
                    };
                    create(kind, &format!("{}.{counter}", parent.stable_key()), Some(&parent))
                }
                None => create(Kind::Node, &format!("r{counter}"), None),
            },
            2 => match pick(a) {
                Some((node, _)) => Action::CloseNode { id: node },
                None => continue,
            },
            3 => match (pick(a), pick(b)) {
                (Some((s, _)), Some((d, _))) => {
                    let id = EdgeId::new(format!("e{counter}"));
                    edges.push(id.clone());
                    Action::CreateEdge {
                        id,
                        source: s,
                        target: d,
                        labels: Labels::new(),
                    }
                }
                _ => continue,
            },
            4 => match edges.get(a % edges.len().max(1)) {
                Some(e) => Action::CloseEdge { id: e.clone() },
                None => continue,
            },
            5 => match (pick(a), pick(b)) {
                (Some((app, _)), Some((plat, _))) => Action::Map {
                    app_entity: app,
                    platform_entity: plat,
                },
                _ => continue,
            },
            _ => match pick(a) {
                Some((app, _)) => Action::Unmap { app_entity: app },
                None => continue,
            },
        };
        if let Action::CreateNode { id, kind, .. } = &action {
            created.push((id.clone(), *kind));
        }
        out.push((ts, action));
    }
    out
}

fn op_strategy() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec((0u8..8, 0usize..64, 0usize..64, 0u8..3), 1..200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn store_agrees_with_oracle_at_every_boundary(ops in op_strategy()) {
        let mut log = Log::new();
        let mut oracle = Oracle::default();
        let mut boundaries = BTreeSet::new();
        for (ts, action) in events_from_ops(&ops) {
            let expected = oracle.apply(ts, &action);
            let actual = log.apply(ts, action.clone());
            prop_assert_eq!(actual.is_ok(), expected, "disagreement on {:?}: {:?}", action, actual);
            boundaries.insert(ts);
            prop_assert!(log.store.validate_all().is_empty());
        }
        for &t in &boundaries {
            for probe in [t - 1, t, t + 1] {
                prop_assert_eq!(flatten(&log.store, probe), oracle.state_at(probe));
            }
        }
        // Edge only present with both endpoints.
        for &t in &boundaries {
            let state = flatten(&log.store, t);
            let alive: BTreeSet<_> = state.nodes.iter().map(|n| n.0.clone()).collect();
            for (_, s, d) in &state.edges {
                prop_assert!(alive.contains(s) && alive.contains(d));
            }
        }
        let replayed = ModelStore::replay(log.store.log()).unwrap();
        prop_assert_eq!(replayed.state_json(), log.store.state_json());
    }

    #[test]
    fn context_invariants_hold(ops in op_strategy()) {
        let mut log = Log::new();
        let mut boundaries = BTreeSet::new();
        for (ts, action) in events_from_ops(&ops) {
            let _ = log.apply(ts, action);
            boundaries.insert(ts);
        }
        let store = &log.store;
        for &t in &boundaries {
            let global = store.global_context(t);
            for graph in global.applications.values() {
                for (id, node) in graph.all_nodes() {
                    let ctx = store.context_of(id.as_str(), t).unwrap();
                    if node.kind == Kind::Thread {
                        prop_assert!(ctx.len() <= 1);
                        if let Some(core) = ctx.first() {
                            let back = store.context_of(core.as_str(), t).unwrap();
                            prop_assert!(back.contains(id));
                        }
                    }
                }
            }
            let mut union = BTreeSet::new();
            for app in store.applications() {
                union.extend(store.app_context_subgraph(app, t).unwrap().mappings);
            }
            prop_assert_eq!(union, global.mappings);
        }
    }
}
