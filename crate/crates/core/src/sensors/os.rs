//! Linux process-table source. One host is one node; every session leader
//! stands for a job, since the process table carries no queueing-system
//! job boundaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use super::{ObservedEntity, ObservedState, SensorSource, SourceError};
use crate::entity::{EntityId, Kind, Timestamp};
use crate::event::Labels;

const PAGE_SIZE: f64 = 4096.0;

/// Reads a procfs tree (normally `/proc`).
pub struct ProcSource {
    root: PathBuf,
    node: String,
    /// Per-cpu (busy, total) jiffies from the previous poll.
    cpu_prev: Mutex<BTreeMap<usize, (u64, u64)>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Cpu {
    index: usize,
    socket: usize,
}

impl ProcSource {
    pub fn new(root: impl Into<PathBuf>, node: &str) -> Self {
        ProcSource {
            root: root.into(),
            node: node.to_string(),
            cpu_prev: Mutex::new(BTreeMap::new()),
        }
    }

    /// The local `/proc`, with the node named `n0`.
    pub fn local() -> Self {
        ProcSource::new("/proc", "n0")
    }

    fn read(&self, rel: impl AsRef<Path>) -> Result<String, SourceError> {
        let path = self.root.join(rel);
        fs::read_to_string(&path).map_err(|e| SourceError::Unavailable(format!("{}: {e}", path.display())))
    }

    fn node_id(&self) -> EntityId {
        EntityId::new(Kind::Node, &self.node)
    }

    fn processor_id(&self, socket: usize) -> EntityId {
        EntityId::new(Kind::Processor, &format!("{}.s{socket}", self.node))
    }

    fn core_id(&self, cpu: &Cpu) -> EntityId {
        EntityId::new(Kind::Core, &format!("{}.s{}.c{}", self.node, cpu.socket, cpu.index))
    }

    fn cpus(&self) -> Result<Vec<Cpu>, SourceError> {
        let text = self.read("cpuinfo")?;
        let mut out = Vec::new();
        for block in text.split("\n\n").filter(|b| !b.trim().is_empty()) {
            let field = |name: &str| {
                block.lines().find_map(|l| {
                    let (k, v) = l.split_once(':')?;
                    (k.trim() == name).then(|| v.trim().parse::<usize>().ok()).flatten()
                })
            };
            if let Some(index) = field("processor") {
                out.push(Cpu {
                    index,
                    socket: field("physical id").unwrap_or(0),
                });
            }
        }
        if out.is_empty() {
            return Err(SourceError::Unavailable("cpuinfo lists no processors".into()));
        }
        Ok(out)
    }

    fn pids(&self, dir: &Path) -> Vec<u32> {
        let mut pids: Vec<u32> = fs::read_dir(dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| e.file_name().to_str()?.parse().ok())
            .collect();
        pids.sort_unstable();
        pids
    }

    /// `(session, last cpu)` of a process or task.
    fn stat(&self, rel: impl AsRef<Path>) -> Option<(u32, usize)> {
        let text = self.read(rel).ok()?;
        // The command name may contain spaces and parentheses.
        let rest = &text[text.rfind(')')? + 1..];
        let fields: Vec<&str> = rest.split_whitespace().collect();
        // After the name: state ppid pgrp session ... processor is field 39 overall.
        let session = fields.get(3)?.parse().ok()?;
        let cpu = fields.get(36)?.parse().ok()?;
        Some((session, cpu))
    }
}

fn meminfo_bytes(text: &str, key: &str) -> Option<f64> {
    text.lines().find_map(|l| {
        let rest = l.strip_prefix(key)?.strip_prefix(':')?;
        let kb: f64 = rest.split_whitespace().next()?.parse().ok()?;
        Some(kb * 1024.0)
    })
}

impl SensorSource for ProcSource {
    fn now(&self) -> Timestamp {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as Timestamp)
    }

    fn enumerate_platform(&self) -> Result<Vec<(EntityId, ObservedEntity)>, SourceError> {
        let node = self.node_id();
        let entity = |kind, parent: Option<&EntityId>| ObservedEntity {
            kind,
            parent: parent.cloned(),
            labels: Labels::new(),
        };
        let mut out = vec![(node.clone(), entity(Kind::Node, None))];
        let cpus = self.cpus()?;
        let mut sockets: Vec<usize> = cpus.iter().map(|c| c.socket).collect();
        sockets.sort_unstable();
        sockets.dedup();
        for s in sockets {
            out.push((self.processor_id(s), entity(Kind::Processor, Some(&node))));
        }
        for cpu in &cpus {
            out.push((self.core_id(cpu), entity(Kind::Core, Some(&self.processor_id(cpu.socket)))));
        }
        Ok(out)
    }

    fn poll_structure(&self) -> Result<ObservedState, SourceError> {
        let mut state = ObservedState::default();
        state.entities.extend(self.enumerate_platform()?);
        let cores: BTreeMap<usize, EntityId> = self.cpus()?.iter().map(|c| (c.index, self.core_id(c))).collect();
        for pid in self.pids(&self.root) {
            // Processes can vanish between listing and reading; skip them.
            let Some((session, _)) = self.stat(format!("{pid}/stat")) else { continue };
            if session == 0 {
                continue;
            }
            let job = EntityId::new(Kind::Job, &format!("{}.sid{session}", self.node));
            let process = EntityId::new(Kind::Process, &format!("{}.p{pid}", job.stable_key()));
            state.entities.entry(job.clone()).or_insert(ObservedEntity {
                kind: Kind::Job,
                parent: None,
                labels: Labels::from([("session".to_string(), session.to_string())]),
            });
            state.entities.insert(
                process.clone(),
                ObservedEntity {
                    kind: Kind::Process,
                    parent: Some(job),
                    labels: Labels::from([("node".to_string(), self.node.clone()), ("pid".to_string(), pid.to_string())]),
                },
            );
            for tid in self.pids(&self.root.join(format!("{pid}/task"))) {
                let Some((_, cpu)) = self.stat(format!("{pid}/task/{tid}/stat")) else { continue };
                let thread = EntityId::new(Kind::Thread, &format!("{}.t{tid}", process.stable_key()));
                state.entities.insert(
                    thread.clone(),
                    ObservedEntity {
                        kind: Kind::Thread,
                        parent: Some(process.clone()),
                        labels: Labels::from([("pid".to_string(), pid.to_string()), ("tid".to_string(), tid.to_string())]),
                    },
                );
                if let Some(core) = cores.get(&cpu) {
                    state.mappings.insert(thread, core.clone());
                }
            }
        }
        Ok(state)
    }

    fn local_entities(&self, node: &EntityId) -> Result<Vec<EntityId>, SourceError> {
        if *node != self.node_id() {
            return Err(SourceError::UnknownEntity(node.to_string()));
        }
        let state = self.poll_structure()?;
        Ok(state
            .entities
            .into_iter()
            .filter(|(_, e)| matches!(e.kind, Kind::Node | Kind::Core | Kind::Process))
            .map(|(id, _)| id)
            .collect())
    }

    fn poll_metrics(&self, entity: &EntityId) -> Result<Vec<(String, f64)>, SourceError> {
        match entity.kind() {
            Some(Kind::Node) => {
                let text = self.read("meminfo")?;
                let total = meminfo_bytes(&text, "MemTotal");
                let avail = meminfo_bytes(&text, "MemAvailable");
                let mut out = Vec::new();
                if let Some(t) = total {
                    out.push(("memory_total".to_string(), t));
                    if let Some(a) = avail {
                        out.push(("memory_rss".to_string(), t - a));
                    }
                }
                Ok(out)
            }
            Some(Kind::Core) => {
                let index: usize = entity
                    .stable_key()
                    .rsplit_once(".c")
                    .and_then(|(_, c)| c.parse().ok())
                    .ok_or_else(|| SourceError::UnknownEntity(entity.to_string()))?;
                let text = self.read("stat")?;
                let line = text
                    .lines()
                    .find(|l| l.split_whitespace().next() == Some(&format!("cpu{index}")))
                    .ok_or_else(|| SourceError::UnknownEntity(entity.to_string()))?;
                let jiffies: Vec<u64> = line.split_whitespace().skip(1).filter_map(|v| v.parse().ok()).collect();
                let total: u64 = jiffies.iter().sum();
                // idle + iowait
                let idle = jiffies.get(3).copied().unwrap_or(0) + jiffies.get(4).copied().unwrap_or(0);
                let busy = total - idle;
                let mut prev = self.cpu_prev.lock().expect("cpu counters lock");
                let out = match prev.insert(index, (busy, total)) {
                    Some((pb, pt)) if total > pt => vec![("cpu_utilization".to_string(), (busy - pb) as f64 / (total - pt) as f64)],
                    _ => Vec::new(),
                };
                Ok(out)
            }
            Some(Kind::Process) => {
                let pid = entity
                    .stable_key()
                    .rsplit_once(".p")
                    .map(|(_, p)| p.to_string())
                    .ok_or_else(|| SourceError::UnknownEntity(entity.to_string()))?;
                let statm = self
                    .read(format!("{pid}/statm"))
                    .map_err(|_| SourceError::UnknownEntity(entity.to_string()))?;
                let mut out = Vec::new();
                if let Some(pages) = statm.split_whitespace().nth(1).and_then(|v| v.parse::<f64>().ok()) {
                    out.push(("memory_rss".to_string(), pages * PAGE_SIZE));
                }
                // Often unreadable for other users' processes.
                if let Ok(io) = self.read(format!("{pid}/io")) {
                    for (key, metric) in [("read_bytes", "io_read_bytes"), ("write_bytes", "io_write_bytes")] {
                        let value = io.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix(':')?.trim().parse::<f64>().ok());
                        if let Some(v) = value {
                            out.push((metric.to_string(), v));
                        }
                    }
                }
                Ok(out)
            }
            _ => Ok(Vec::new()),
        }
    }
}
