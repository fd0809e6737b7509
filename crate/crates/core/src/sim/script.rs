use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Generator, SimError};
use crate::entity::Kind;

fn default_memory_total() -> f64 {
    64e9
}

/// Platform shape. Cores are numbered node-major, so "lowest id" means
/// lowest (node, processor, core) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub nodes: usize,
    pub processors_per_node: usize,
    pub cores_per_processor: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_memory_total")]
    pub memory_total: f64,
    /// Link the nodes in a directed ring of platform edges.
    #[serde(default)]
    pub ring: bool,
    /// Platform metric generators; defaults apply when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<MetricSpec>>,
}

impl ClusterSpec {
    pub fn new(nodes: usize, processors_per_node: usize, cores_per_processor: usize) -> Self {
        ClusterSpec {
            nodes,
            processors_per_node,
            cores_per_processor,
            seed: 0,
            memory_total: default_memory_total(),
            ring: false,
            metrics: None,
        }
    }

    pub fn cores_per_node(&self) -> usize {
        self.processors_per_node * self.cores_per_processor
    }

    pub fn total_cores(&self) -> usize {
        self.nodes * self.cores_per_node()
    }

    pub fn platform_metrics(&self) -> Vec<MetricSpec> {
        self.metrics.clone().unwrap_or_else(|| {
            vec![
                MetricSpec::new(Kind::Node, "memory_total", Generator::Constant { value: self.memory_total }),
                MetricSpec::new(
                    Kind::Node,
                    "memory_rss",
                    Generator::UniformNoise {
                        low: 0.1 * self.memory_total,
                        high: 0.6 * self.memory_total,
                    },
                ),
                MetricSpec::new(Kind::Core, "cpu_utilization", Generator::UniformNoise { low: 0.0, high: 1.0 }),
            ]
        })
    }

    pub(super) fn validate(&self) -> Result<(), SimError> {
        if self.nodes == 0 || self.processors_per_node == 0 || self.cores_per_processor == 0 {
            return Err(SimError::InvalidSpec("all counts must be at least 1".into()));
        }
        if !(self.memory_total.is_finite() && self.memory_total >= 0.0) {
            return Err(SimError::InvalidSpec("memory_total must be finite".into()));
        }
        for m in self.platform_metrics() {
            m.validate(crate::entity::Side::Platform)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub target: Kind,
    pub metric: String,
    pub generator: Generator,
}

impl MetricSpec {
    pub fn new(target: Kind, metric: &str, generator: Generator) -> Self {
        MetricSpec {
            target,
            metric: metric.to_string(),
            generator,
        }
    }

    fn validate(&self, side: crate::entity::Side) -> Result<(), SimError> {
        if self.target.side() != side {
            return Err(SimError::InvalidSpec(format!(
                "metric `{}` targets {} but belongs to the {side} side",
                self.metric, self.target
            )));
        }
        if !crate::timeseries::is_valid_metric_name(&self.metric) {
            return Err(SimError::InvalidSpec(format!("invalid metric name `{}`", self.metric)));
        }
        if !self.generator.is_finite() {
            return Err(SimError::InvalidSpec(format!(
                "generator for `{}` produces non-finite values",
                self.metric
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Fill the lowest-numbered node first.
    #[default]
    Pack,
    /// Prefer a node no other process of the job uses yet.
    Spread,
}

/// Move thread `thread` of process slot `process` at time `at` (seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Migration {
    pub at: f64,
    pub process: usize,
    pub thread: usize,
}

/// One job. Times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub submit_time: f64,
    pub duration: f64,
    /// Concurrent processes (slots).
    pub processes: usize,
    pub threads_per_process: usize,
    #[serde(default)]
    pub placement: Placement,
    /// When set, each slot's process is replaced by a fresh one this often.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process_lifetime: Option<f64>,
    /// Let a process's threads share one core.
    #[serde(default)]
    pub oversubscribe: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub migrations: Vec<Migration>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<MetricSpec>,
    /// Communication edges between process slots.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkloadScript {
    pub jobs: Vec<JobSpec>,
}

impl WorkloadScript {
    pub(super) fn validate(&self, spec: &ClusterSpec) -> Result<(), SimError> {
        for (i, job) in self.jobs.iter().enumerate() {
            let bad = |msg: &str| Err(SimError::InvalidSpec(format!("job {i}: {msg}")));
            let times = [Some(job.submit_time), Some(job.duration), job.process_lifetime];
            if times.iter().flatten().any(|t| !t.is_finite() || *t < 0.0) {
                return bad("times must be finite and non-negative");
            }
            if job.duration <= 0.0 || job.process_lifetime.is_some_and(|l| l <= 0.0) {
                return bad("duration and process_lifetime must be positive");
            }
            if job.processes == 0 || job.threads_per_process == 0 {
                return bad("processes and threads_per_process must be at least 1");
            }
            let per_slot = if job.oversubscribe { 1 } else { job.threads_per_process };
            if per_slot > spec.cores_per_node() || job.processes * per_slot > spec.total_cores() {
                return bad("job can never be placed on this cluster");
            }
            if job.links.iter().flatten().any(|&s| s >= job.processes) {
                return bad("link refers to a missing process slot");
            }
            if job
                .migrations
                .iter()
                .any(|m| m.process >= job.processes || m.thread >= job.threads_per_process || !m.at.is_finite())
            {
                return bad("migration refers to a missing thread");
            }
            for m in &job.metrics {
                m.validate(crate::entity::Side::Application)?;
            }
        }
        Ok(())
    }
}

/// Seeded workload of `jobs` jobs with short-lived processes, two threads
/// each, communication rings, migrations and I/O generators.
pub fn synthetic_workload(seed: u64, jobs: usize) -> WorkloadScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut submit = 0.0;
    let mut out = Vec::new();
    for i in 0..jobs {
        let processes = rng.random_range(3..=5usize);
        let duration = rng.random_range(50..=90u32) as f64;
        let lifetime = rng.random_range(10..=15u32) as f64;
        let links = (0..processes).map(|s| [s, (s + 1) % processes]).collect();
        let migrations = (0..rng.random_range(1..=2usize))
            .map(|_| Migration {
                at: submit + rng.random_range(1..40u32) as f64 + 0.25,
                process: rng.random_range(0..processes),
                thread: rng.random_range(0..2),
            })
            .collect();
        let io_rate = rng.random_range(1..=8u32) as f64 * 50_000.0;
        out.push(JobSpec {
            name: Some(format!("synthetic-{i}")),
            submit_time: submit,
            duration,
            processes,
            threads_per_process: 2,
            placement: if i % 2 == 0 { Placement::Pack } else { Placement::Spread },
            process_lifetime: Some(lifetime),
            oversubscribe: false,
            migrations,
            metrics: vec![
                MetricSpec::new(Kind::Thread, "cpu_utilization", Generator::UniformNoise { low: 0.2, high: 1.0 }),
                MetricSpec::new(
                    Kind::Process,
                    "memory_rss",
                    Generator::Constant {
                        value: rng.random_range(1..=16u32) as f64 * 1e8,
                    },
                ),
                MetricSpec::new(
                    Kind::Process,
                    "io_read_bytes",
                    Generator::Sinusoid {
                        amplitude: io_rate,
                        period: rng.random_range(10..=30u32) as f64,
                        offset: io_rate,
                    },
                ),
                MetricSpec::new(Kind::Process, "io_write_bytes", Generator::LinearCounter { rate: io_rate, start: 0.0 }),
                MetricSpec::new(Kind::Job, "net_tx_bytes", Generator::LinearCounter { rate: 1e6, start: 0.0 }),
            ],
            links,
        });
        submit += rng.random_range(2..=6u32) as f64;
    }
    WorkloadScript { jobs: out }
}
