//! Deterministic synthetic cluster: a fixed platform, a FIFO scheduler and
//! scripted jobs whose processes and threads carry metric generators.
//!
//! The simulator keeps its own interval history of every entity, edge and
//! placement, so [`ClusterSim::ground_truth`] can answer for any past
//! instant without consulting the model store.

mod generator;
mod script;

use std::collections::{BTreeMap, VecDeque};

use crate::entity::{EdgeId, EntityId, Kind, Timestamp, NANOS_PER_SEC};
use crate::event::{Action, Labels};
use crate::sensors::{ObservedEdge, ObservedEntity, ObservedState, SensorSource, SourceError};

pub use generator::Generator;
pub use script::{synthetic_workload, ClusterSpec, JobSpec, MetricSpec, Migration, Placement, WorkloadScript};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("time {requested} is after the simulated clock {clock}")]
    FutureTime { requested: Timestamp, clock: Timestamp },
}

/// One ground-truth change, in the order it happened.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Change {
    pub ts: Timestamp,
    #[serde(flatten)]
    pub action: Action,
}

/// Authoritative state at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub at: Timestamp,
    pub state: ObservedState,
}

#[derive(Debug, Clone)]
struct Interval<T> {
    value: T,
    start: Timestamp,
    end: Option<Timestamp>,
}

impl<T> Interval<T> {
    fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && self.end.is_none_or(|e| t < e)
    }
}

#[derive(Debug, Clone)]
struct Slot {
    node: usize,
    cores: Vec<usize>,
    generation: usize,
    process: Option<EntityId>,
    /// Current thread ids and the core index each runs on.
    threads: Vec<(EntityId, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum JobState {
    Pending,
    Queued,
    Running { start: Timestamp, end: Timestamp },
    Done,
}

#[derive(Debug, Clone)]
struct JobRun {
    id: EntityId,
    spec: JobSpec,
    state: JobState,
    slots: Vec<Slot>,
    next_migration: usize,
}

/// Platform coordinates of one core.
#[derive(Debug, Clone)]
struct CoreInfo {
    id: EntityId,
    node: usize,
}

pub struct ClusterSim {
    spec: ClusterSpec,
    platform_metrics: Vec<MetricSpec>,
    clock: Timestamp,
    nodes: Vec<EntityId>,
    cores: Vec<CoreInfo>,
    occupancy: Vec<usize>,
    jobs: Vec<JobRun>,
    migrations: Vec<Vec<Migration>>,
    queue: VecDeque<usize>,
    next_process: u64,
    entities: BTreeMap<EntityId, Interval<ObservedEntity>>,
    edges: BTreeMap<EdgeId, Interval<ObservedEdge>>,
    mappings: Vec<Interval<(EntityId, EntityId)>>,
    active_mapping: BTreeMap<EntityId, usize>,
    /// Job that owns each application entity, for metric lookup.
    owner: BTreeMap<EntityId, usize>,
    changes: Vec<Change>,
}

fn secs_to_nanos(s: f64) -> Timestamp {
    (s * NANOS_PER_SEC as f64).round() as Timestamp
}

impl ClusterSim {
    pub fn build(spec: ClusterSpec, script: WorkloadScript) -> Result<Self, SimError> {
        spec.validate()?;
        script.validate(&spec)?;
        let mut sim = ClusterSim {
            clock: 0,
            nodes: Vec::new(),
            cores: Vec::new(),
            occupancy: Vec::new(),
            jobs: Vec::new(),
            migrations: Vec::new(),
            queue: VecDeque::new(),
            next_process: 0,
            entities: BTreeMap::new(),
            edges: BTreeMap::new(),
            mappings: Vec::new(),
            active_mapping: BTreeMap::new(),
            owner: BTreeMap::new(),
            changes: Vec::new(),
            platform_metrics: spec.platform_metrics(),
            spec,
        };
        sim.build_platform();
        for (i, job) in script.jobs.into_iter().enumerate() {
            let mut migrations = job.migrations.clone();
            migrations.sort_by(|a, b| a.at.total_cmp(&b.at));
            sim.migrations.push(migrations);
            sim.jobs.push(JobRun {
                id: EntityId::new(Kind::Job, &format!("j{i}")),
                spec: job,
                state: JobState::Pending,
                slots: Vec::new(),
                next_migration: 0,
            });
        }
        sim.run_until(0);
        Ok(sim)
    }

    fn build_platform(&mut self) {
        let spec = self.spec.clone();
        for a in 0..spec.nodes {
            let node_key = format!("n{a}");
            let node = EntityId::new(Kind::Node, &node_key);
            let labels = Labels::from([("hostname".to_string(), format!("node{a}"))]);
            self.create(0, &node, Kind::Node, None, labels);
            self.nodes.push(node.clone());
            for b in 0..spec.processors_per_node {
                let proc_key = format!("{node_key}.s{b}");
                let processor = EntityId::new(Kind::Processor, &proc_key);
                self.create(0, &processor, Kind::Processor, Some(&node), Labels::new());
                for c in 0..spec.cores_per_processor {
                    let core = EntityId::new(Kind::Core, &format!("{proc_key}.c{c}"));
                    self.create(0, &core, Kind::Core, Some(&processor), Labels::new());
                    self.cores.push(CoreInfo { id: core, node: a });
                    self.occupancy.push(0);
                }
            }
        }
        if spec.ring && spec.nodes > 1 {
            for a in 0..spec.nodes {
                let (from, to) = (self.nodes[a].clone(), self.nodes[(a + 1) % spec.nodes].clone());
                self.link(0, &from, &to);
            }
        }
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn clock(&self) -> Timestamp {
        self.clock
    }

    pub fn nodes(&self) -> &[EntityId] {
        &self.nodes
    }

    /// Every ground-truth change so far.
    pub fn changes(&self) -> &[Change] {
        &self.changes
    }

    /// The change history as NDJSON.
    pub fn changes_log(&self) -> String {
        let mut out = String::new();
        for change in &self.changes {
            out.push_str(&serde_json::to_string(change).expect("changes serialize"));
            out.push('\n');
        }
        out
    }

    /// Moves the clock forward by `dt`, applying every scheduled change up
    /// to and including the new time. Returns the changes made.
    pub fn advance(&mut self, dt: Timestamp) -> Vec<Change> {
        let before = self.changes.len();
        if dt > 0 {
            self.run_until(self.clock + dt);
        }
        self.changes[before..].to_vec()
    }

    pub fn advance_to(&mut self, t: Timestamp) -> Vec<Change> {
        self.advance(t - self.clock)
    }

    /// True once every job has finished.
    pub fn is_finished(&self) -> bool {
        self.jobs.iter().all(|j| j.state == JobState::Done)
    }

    pub fn ground_truth(&self, t: Timestamp) -> Result<GroundTruth, SimError> {
        if t > self.clock {
            return Err(SimError::FutureTime {
                requested: t,
                clock: self.clock,
            });
        }
        let mut state = ObservedState::default();
        for (id, iv) in &self.entities {
            if iv.contains(t) {
                state.entities.insert(id.clone(), iv.value.clone());
            }
        }
        for (id, iv) in &self.edges {
            if iv.contains(t) {
                state.edges.insert(id.clone(), iv.value.clone());
            }
        }
        for iv in &self.mappings {
            if iv.contains(t) {
                state.mappings.insert(iv.value.0.clone(), iv.value.1.clone());
            }
        }
        Ok(GroundTruth { at: t, state })
    }

    /// Value the generators produce for `(entity, metric)` at `t`, if the
    /// entity is alive and has such a generator.
    pub fn expected_value(&self, entity: &str, metric: &str, t: Timestamp) -> Option<f64> {
        let iv = self.entities.get(entity)?;
        if !iv.contains(t) {
            return None;
        }
        self.metric_specs(entity, iv.value.kind)
            .into_iter()
            .find(|m| m.metric == metric)
            .map(|m| m.generator.value(t, iv.start, self.spec.seed, entity, metric))
    }

    fn metric_specs(&self, entity: &str, kind: Kind) -> Vec<&MetricSpec> {
        let specs: &[MetricSpec] = match self.owner.get(entity) {
            Some(&job) => &self.jobs[job].spec.metrics,
            None => &self.platform_metrics,
        };
        specs.iter().filter(|m| m.target == kind).collect()
    }

    fn record(&mut self, ts: Timestamp, action: Action) {
        self.changes.push(Change { ts, action });
    }

    fn create(
        &mut self,
        ts: Timestamp,
        id: &EntityId,
        kind: Kind,
        parent: Option<&EntityId>,
        labels: Labels,
    ) {
        let entity = ObservedEntity {
            kind,
            parent: parent.cloned(),
            labels: labels.clone(),
        };
        self.entities.insert(
            id.clone(),
            Interval {
                value: entity,
                start: ts,
                end: None,
            },
        );
        self.record(
            ts,
            Action::CreateNode {
                id: id.clone(),
                kind,
                parent: parent.cloned(),
                labels,
            },
        );
    }

    fn close(&mut self, ts: Timestamp, id: &EntityId) {
        if let Some(iv) = self.entities.get_mut(id) {
            iv.end = Some(ts);
        }
        self.record(ts, Action::CloseNode { id: id.clone() });
    }

    fn link(&mut self, ts: Timestamp, from: &EntityId, to: &EntityId) {
        let id = EdgeId::between(from, to);
        let edge = ObservedEdge {
            source: from.clone(),
            target: to.clone(),
            labels: Labels::new(),
        };
        self.edges.insert(
            id.clone(),
            Interval {
                value: edge,
                start: ts,
                end: None,
            },
        );
        self.record(
            ts,
            Action::CreateEdge {
                id,
                source: from.clone(),
                target: to.clone(),
                labels: Labels::new(),
            },
        );
    }

    fn unlink(&mut self, ts: Timestamp, id: &EdgeId) {
        if let Some(iv) = self.edges.get_mut(id) {
            if iv.end.is_none() {
                iv.end = Some(ts);
                self.record(ts, Action::CloseEdge { id: id.clone() });
            }
        }
    }

    fn place(&mut self, ts: Timestamp, thread: &EntityId, core: usize) {
        self.occupancy[core] += 1;
        let core_id = self.cores[core].id.clone();
        self.active_mapping.insert(thread.clone(), self.mappings.len());
        self.mappings.push(Interval {
            value: (thread.clone(), core_id.clone()),
            start: ts,
            end: None,
        });
        self.record(
            ts,
            Action::Map {
                app_entity: thread.clone(),
                platform_entity: core_id,
            },
        );
    }

    fn unplace(&mut self, ts: Timestamp, thread: &EntityId, core: usize) {
        self.occupancy[core] -= 1;
        if let Some(idx) = self.active_mapping.remove(thread) {
            self.mappings[idx].end = Some(ts);
        }
        self.record(
            ts,
            Action::Unmap {
                app_entity: thread.clone(),
            },
        );
    }

    fn run_until(&mut self, target: Timestamp) {
        while let Some(t) = self.next_event_time().filter(|&t| t <= target) {
            self.clock = t;
            self.process_at(t);
        }
        self.clock = target;
    }

    fn next_event_time(&self) -> Option<Timestamp> {
        let mut next: Option<Timestamp> = None;
        let mut consider = |t: Timestamp| next = Some(next.map_or(t, |n: Timestamp| n.min(t)));
        for (i, job) in self.jobs.iter().enumerate() {
            match job.state {
                JobState::Pending => consider(secs_to_nanos(job.spec.submit_time)),
                JobState::Running { start, end } => {
                    consider(end);
                    if let Some(churn) = self.next_churn(job, start, end) {
                        consider(churn);
                    }
                    if let Some(m) = self.migrations[i].get(job.next_migration) {
                        consider(secs_to_nanos(m.at).max(start));
                    }
                }
                JobState::Queued | JobState::Done => {}
            }
        }
        next
    }

    fn next_churn(&self, job: &JobRun, start: Timestamp, end: Timestamp) -> Option<Timestamp> {
        let life = secs_to_nanos(job.spec.process_lifetime?);
        let generation = job.slots.first()?.generation as i64;
        let t = start + (generation + 1) * life;
        (t < end).then_some(t)
    }

    fn process_at(&mut self, t: Timestamp) {
        for i in 0..self.jobs.len() {
            if matches!(self.jobs[i].state, JobState::Running { end, .. } if end == t) {
                self.finish_job(i, t);
            }
        }
        for i in 0..self.jobs.len() {
            if let JobState::Running { start, end } = self.jobs[i].state {
                if self.next_churn(&self.jobs[i], start, end) == Some(t) {
                    self.churn(i, t);
                }
            }
        }
        for i in 0..self.jobs.len() {
            if let JobState::Running { start, .. } = self.jobs[i].state {
                while let Some(m) = self.migrations[i].get(self.jobs[i].next_migration).cloned() {
                    if secs_to_nanos(m.at).max(start) != t {
                        break;
                    }
                    self.jobs[i].next_migration += 1;
                    self.migrate(i, &m, t);
                }
            }
        }
        let mut submitted: Vec<usize> = (0..self.jobs.len())
            .filter(|&i| {
                self.jobs[i].state == JobState::Pending
                    && secs_to_nanos(self.jobs[i].spec.submit_time) == t
            })
            .collect();
        submitted.sort_by_key(|&i| (secs_to_nanos(self.jobs[i].spec.submit_time), i));
        for i in submitted {
            self.jobs[i].state = JobState::Queued;
            self.queue.push_back(i);
        }
        self.schedule(t);
    }

    /// Starts queued jobs in submission order while the head fits.
    fn schedule(&mut self, t: Timestamp) {
        while let Some(&head) = self.queue.front() {
            let Some(placement) = self.find_placement(head) else {
                break;
            };
            self.queue.pop_front();
            self.start_job(head, placement, t);
        }
    }

    fn cores_per_slot(spec: &JobSpec) -> usize {
        if spec.oversubscribe {
            1
        } else {
            spec.threads_per_process
        }
    }

    /// Per slot: the node and its lowest-numbered free cores.
    fn find_placement(&self, job: usize) -> Option<Vec<(usize, Vec<usize>)>> {
        let spec = &self.jobs[job].spec;
        let need = Self::cores_per_slot(spec);
        let mut taken = vec![false; self.cores.len()];
        let mut used_nodes = vec![false; self.nodes.len()];
        let mut out = Vec::new();
        for _ in 0..spec.processes {
            let free_on = |node: usize, taken: &[bool]| -> Vec<usize> {
                (0..self.cores.len())
                    .filter(|&c| self.cores[c].node == node && self.occupancy[c] == 0 && !taken[c])
                    .take(need)
                    .collect()
            };
            let mut choice = None;
            if spec.placement == Placement::Spread {
                choice = (0..self.nodes.len())
                    .filter(|&n| !used_nodes[n])
                    .map(|n| (n, free_on(n, &taken)))
                    .find(|(_, free)| free.len() == need);
            }
            if choice.is_none() {
                choice = (0..self.nodes.len())
                    .map(|n| (n, free_on(n, &taken)))
                    .find(|(_, free)| free.len() == need);
            }
            let (node, cores) = choice?;
            for &c in &cores {
                taken[c] = true;
            }
            used_nodes[node] = true;
            out.push((node, cores));
        }
        Some(out)
    }

    fn start_job(&mut self, i: usize, placement: Vec<(usize, Vec<usize>)>, t: Timestamp) {
        let job_id = self.jobs[i].id.clone();
        let end = t + secs_to_nanos(self.jobs[i].spec.duration);
        let name = self.jobs[i]
            .spec
            .name
            .clone()
            .unwrap_or_else(|| job_id.stable_key().to_string());
        self.owner.insert(job_id.clone(), i);
        self.create(
            t,
            &job_id,
            Kind::Job,
            None,
            Labels::from([("name".to_string(), name)]),
        );
        self.jobs[i].state = JobState::Running { start: t, end };
        self.jobs[i].slots = placement
            .into_iter()
            .map(|(node, cores)| Slot {
                node,
                cores,
                generation: 0,
                process: None,
                threads: Vec::new(),
            })
            .collect();
        for s in 0..self.jobs[i].slots.len() {
            self.spawn_process(i, s, t);
        }
        self.create_links(i, t);
    }

    fn spawn_process(&mut self, i: usize, s: usize, t: Timestamp) {
        let job_id = self.jobs[i].id.clone();
        let slots = self.jobs[i].slots.len();
        let slot = self.jobs[i].slots[s].clone();
        let index = slot.generation * slots + s;
        let key = format!("{}.p{index}", job_id.stable_key());
        let process = EntityId::new(Kind::Process, &key);
        let pid = 1000 + 100 * self.next_process;
        self.next_process += 1;
        self.owner.insert(process.clone(), i);
        let node_key = self.nodes[slot.node].stable_key().to_string();
        self.create(
            t,
            &process,
            Kind::Process,
            Some(&job_id),
            Labels::from([
                ("node".to_string(), node_key),
                ("pid".to_string(), pid.to_string()),
            ]),
        );
        let mut threads = Vec::new();
        for m in 0..self.jobs[i].spec.threads_per_process {
            let thread = EntityId::new(Kind::Thread, &format!("{key}.t{m}"));
            self.owner.insert(thread.clone(), i);
            self.create(
                t,
                &thread,
                Kind::Thread,
                Some(&process),
                Labels::from([
                    ("pid".to_string(), pid.to_string()),
                    ("tid".to_string(), (pid + m as u64).to_string()),
                ]),
            );
            let core = slot.cores[m % slot.cores.len()];
            self.place(t, &thread, core);
            threads.push((thread, core));
        }
        let slot = &mut self.jobs[i].slots[s];
        slot.process = Some(process);
        slot.threads = threads;
    }

    fn create_links(&mut self, i: usize, t: Timestamp) {
        for [a, b] in self.jobs[i].spec.links.clone() {
            let slots = &self.jobs[i].slots;
            if let (Some(pa), Some(pb)) = (
                slots.get(a).and_then(|s| s.process.clone()),
                slots.get(b).and_then(|s| s.process.clone()),
            ) {
                if !self.edges.contains_key(&EdgeId::between(&pa, &pb)) {
                    self.link(t, &pa, &pb);
                }
            }
        }
    }

    /// Tears down the current process of slot `s`: placements, links,
    /// threads, then the process itself.
    fn retire_process(&mut self, i: usize, s: usize, t: Timestamp) {
        let slot = self.jobs[i].slots[s].clone();
        let Some(process) = slot.process else { return };
        for (thread, core) in &slot.threads {
            self.unplace(t, thread, *core);
        }
        let incident: Vec<EdgeId> = self
            .edges
            .iter()
            .filter(|(_, iv)| {
                iv.end.is_none() && (iv.value.source == process || iv.value.target == process)
            })
            .map(|(id, _)| id.clone())
            .collect();
        for edge in incident {
            self.unlink(t, &edge);
        }
        for (thread, _) in &slot.threads {
            self.close(t, thread);
        }
        self.close(t, &process);
        let slot = &mut self.jobs[i].slots[s];
        slot.process = None;
        slot.threads.clear();
    }

    fn churn(&mut self, i: usize, t: Timestamp) {
        for s in 0..self.jobs[i].slots.len() {
            self.retire_process(i, s, t);
        }
        for s in 0..self.jobs[i].slots.len() {
            self.jobs[i].slots[s].generation += 1;
            self.spawn_process(i, s, t);
        }
        self.create_links(i, t);
    }

    fn finish_job(&mut self, i: usize, t: Timestamp) {
        for s in 0..self.jobs[i].slots.len() {
            self.retire_process(i, s, t);
        }
        let job_id = self.jobs[i].id.clone();
        self.close(t, &job_id);
        self.jobs[i].state = JobState::Done;
        self.jobs[i].slots.clear();
    }

    /// Moves one thread to the lowest free core on its node; a no-op when
    /// the node has no free core.
    fn migrate(&mut self, i: usize, m: &Migration, t: Timestamp) {
        let Some(slot) = self.jobs[i].slots.get(m.process).cloned() else {
            return;
        };
        let Some((thread, from)) = slot.threads.get(m.thread).cloned() else {
            return;
        };
        let Some(to) = (0..self.cores.len())
            .find(|&c| self.cores[c].node == slot.node && self.occupancy[c] == 0)
        else {
            return;
        };
        self.unplace(t, &thread, from);
        self.place(t, &thread, to);
        let slot = &mut self.jobs[i].slots[m.process];
        slot.threads[m.thread].1 = to;
        if let Some(pos) = slot.cores.iter().position(|&c| c == from) {
            slot.cores[pos] = to;
        }
    }

    fn alive_now(&self, id: &str) -> Option<&Interval<ObservedEntity>> {
        self.entities.get(id).filter(|iv| iv.contains(self.clock))
    }
}

impl SensorSource for ClusterSim {
    fn now(&self) -> Timestamp {
        self.clock
    }

    fn enumerate_platform(&self) -> Result<Vec<(EntityId, ObservedEntity)>, SourceError> {
        Ok(self
            .entities
            .iter()
            .filter(|(_, iv)| iv.value.kind.side() == crate::entity::Side::Platform)
            .map(|(id, iv)| (id.clone(), iv.value.clone()))
            .collect())
    }

    fn poll_structure(&self) -> Result<ObservedState, SourceError> {
        Ok(self
            .ground_truth(self.clock)
            .expect("clock is never in the future")
            .state)
    }

    fn local_entities(&self, node: &EntityId) -> Result<Vec<EntityId>, SourceError> {
        let Some(n) = self.nodes.iter().position(|x| x == node) else {
            return Err(SourceError::UnknownEntity(node.to_string()));
        };
        let prefix = format!("{}.", node.stable_key());
        let mut out: Vec<EntityId> = self
            .entities
            .iter()
            .filter(|(id, iv)| {
                iv.contains(self.clock)
                    && iv.value.kind.side() == crate::entity::Side::Platform
                    && (*id == node || id.stable_key().starts_with(&prefix))
            })
            .map(|(id, _)| id.clone())
            .collect();
        for job in &self.jobs {
            if !matches!(job.state, JobState::Running { .. }) {
                continue;
            }
            if job.slots.first().is_some_and(|s| s.node == n) {
                out.push(job.id.clone());
            }
            for slot in job.slots.iter().filter(|s| s.node == n) {
                out.extend(slot.process.iter().cloned());
                out.extend(slot.threads.iter().map(|(t, _)| t.clone()));
            }
        }
        Ok(out)
    }

    fn poll_metrics(&self, entity: &EntityId) -> Result<Vec<(String, f64)>, SourceError> {
        let iv = self
            .alive_now(entity)
            .ok_or_else(|| SourceError::UnknownEntity(entity.to_string()))?;
        Ok(self
            .metric_specs(entity, iv.value.kind)
            .into_iter()
            .map(|m| {
                (
                    m.metric.clone(),
                    m.generator
                        .value(self.clock, iv.start, self.spec.seed, entity, &m.metric),
                )
            })
            .collect())
    }
}
