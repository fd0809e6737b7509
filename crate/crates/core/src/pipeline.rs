//! Deterministic in-process wiring: simulator, sensors, bus, ingest and
//! metric engine advanced in lockstep on the simulated clock.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::Serialize;

use crate::bus::{Bus, BusConfig, BusError, CACHE_INVALIDATION};
use crate::entity::{Timestamp, NANOS_PER_MILLI};
use crate::ingest::{IngestStats, Ingestor};
use crate::metric::{Notification, DEFAULT_EVAL_PERIOD, DEFAULT_LOOKBACK};
use crate::model::ModelStore;
use crate::sensors::{ContextExporter, ExporterStats, NodeExporter, SensorConfig, SensorError};
use crate::sim::ClusterSim;
use crate::timeseries::StoreConfig;
use crate::{MetricEngineF64, SampleStore};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error("invalid pipeline config: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Simulator step.
    pub tick: i64,
    pub sensors: SensorConfig,
    /// How often subscriptions are checked.
    pub detect_period: i64,
    pub bus: BusConfig,
    pub store: StoreConfig,
    pub lookback: i64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tick: 100 * NANOS_PER_MILLI,
            sensors: SensorConfig::default(),
            detect_period: DEFAULT_EVAL_PERIOD,
            bus: BusConfig::default(),
            store: StoreConfig::default(),
            lookback: DEFAULT_LOOKBACK,
        }
    }
}

/// Handles the API layer reads from.
#[derive(Clone)]
pub struct Shared {
    pub model: Arc<RwLock<ModelStore>>,
    pub samples: Arc<SampleStore>,
    pub engine: Arc<MetricEngineF64>,
    /// Latest instant the model and stores are complete up to.
    pub clock: Arc<AtomicI64>,
    pub bus: Bus,
}

impl Shared {
    pub fn new(bus: Bus, store: StoreConfig, lookback: i64) -> Self {
        Shared {
            model: Arc::new(RwLock::new(ModelStore::new())),
            samples: Arc::new(SampleStore::new(store)),
            engine: Arc::new(MetricEngineF64::new(lookback)),
            clock: Arc::new(AtomicI64::new(0)),
            bus,
        }
    }

    pub fn now(&self) -> Timestamp {
        self.clock.load(Ordering::Acquire)
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PipelineStats {
    pub clock: Timestamp,
    pub ticks: u64,
    pub structural_events: u64,
    pub notifications: u64,
    pub structure_backpressure: u64,
    pub ingest: IngestStats,
    pub exporters: ExporterStats,
}

pub struct Pipeline {
    sim: ClusterSim,
    config: PipelineConfig,
    shared: Shared,
    context: ContextExporter,
    nodes: Vec<NodeExporter>,
    ingest: Ingestor,
    next_structure: Timestamp,
    next_metrics: Timestamp,
    next_detect: Timestamp,
    stats: PipelineStats,
}

impl Pipeline {
    pub fn new(sim: ClusterSim, config: PipelineConfig) -> Result<Self, PipelineError> {
        let bus = match config.bus.spill_dir {
            Some(_) => Bus::open(config.bus.clone())?,
            None => Bus::in_memory(config.bus.clone()),
        };
        let shared = Shared::new(bus, config.store, config.lookback);
        Pipeline::with_shared(sim, config, shared)
    }

    pub fn with_shared(sim: ClusterSim, config: PipelineConfig, shared: Shared) -> Result<Self, PipelineError> {
        let periods = [config.tick, config.detect_period];
        if !config.sensors.is_valid() || periods.iter().any(|p| *p <= 0) {
            return Err(PipelineError::Config("periods must be positive".into()));
        }
        let bus = shared.bus.clone();
        let nodes = sim
            .nodes()
            .iter()
            .map(|n| NodeExporter::new(n.clone(), bus.clone(), &config.sensors))
            .collect();
        let start = sim.clock();
        let context = ContextExporter::resume(bus.clone(), &config.sensors, &shared.model.read());
        Ok(Pipeline {
            context,
            ingest: Ingestor::new(&bus, "pipeline")?,
            nodes,
            sim,
            config,
            shared,
            next_structure: start,
            next_metrics: start,
            next_detect: start,
            stats: PipelineStats::default(),
        })
    }

    pub fn shared(&self) -> Shared {
        self.shared.clone()
    }

    pub fn sim(&self) -> &ClusterSim {
        &self.sim
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn clock(&self) -> Timestamp {
        self.sim.clock()
    }

    pub fn stats(&self) -> PipelineStats {
        let mut stats = self.stats.clone();
        stats.ingest = self.ingest.stats();
        for n in &self.nodes {
            let s = n.stats();
            stats.exporters.batches += s.batches;
            stats.exporters.samples += s.samples;
            stats.exporters.dropped_samples += s.dropped_samples;
            stats.exporters.source_errors += s.source_errors;
        }
        stats
    }

    /// Collects at the current instant, ingests, checks subscriptions, then
    /// advances the simulator by one tick. Returns the rising edges found.
    pub fn step(&mut self) -> Result<Vec<Notification>, PipelineError> {
        let t = self.sim.clock();
        if t >= self.next_structure {
            match self.context.step(&self.sim) {
                Ok(_) => {}
                // Stays queued in the exporter; retried next period.
                Err(SensorError::Bus(BusError::BufferFull { .. })) => self.stats.structure_backpressure += 1,
                Err(SensorError::BackingOff(_)) | Err(SensorError::Source(_)) => {}
                Err(e) => return Err(e.into()),
            }
            self.next_structure = next_due(t, self.config.sensors.structure_period);
        }
        if t >= self.next_metrics {
            for n in &mut self.nodes {
                match n.step(&self.sim) {
                    Ok(_) | Err(SensorError::BackingOff(_)) | Err(SensorError::Source(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            self.next_metrics = next_due(t, self.config.sensors.metric_period);
        }
        let drained = {
            let mut model = self.shared.model.write();
            self.ingest.drain(&mut model, &self.shared.samples)?
        };
        if !drained.events.is_empty() {
            self.stats.structural_events += drained.events.len() as u64;
            let msg = serde_json::json!({ "ts": t, "events": drained.events.len() });
            if let Err(e) = self.shared.bus.publish_json(CACHE_INVALIDATION, &msg) {
                tracing::warn!(error = %e, "cache invalidation not published");
            }
        }
        self.shared.clock.store(t, Ordering::Release);
        let mut notes = Vec::new();
        if t >= self.next_detect {
            let model = self.shared.model.read();
            notes = self.shared.engine.detect(&self.shared.samples, &*model, t);
            self.next_detect = next_due(t, self.config.detect_period);
        }
        self.stats.notifications += notes.len() as u64;
        self.stats.ticks += 1;
        self.stats.clock = t;
        self.sim.advance(self.config.tick);
        Ok(notes)
    }

    /// Steps until the simulator clock passes `t`, handing every
    /// notification to `notify`.
    pub fn run_until(
        &mut self,
        t: Timestamp,
        mut notify: impl FnMut(Notification),
    ) -> Result<(), PipelineError> {
        while self.sim.clock() <= t {
            for n in self.step()? {
                notify(n);
            }
        }
        Ok(())
    }

    /// Flushes the bus spill files and the model's event log sink.
    pub fn flush(&mut self) -> Result<(), PipelineError> {
        self.shared.bus.flush()?;
        self.shared
            .model
            .write()
            .flush_sink()
            .map_err(|e| PipelineError::Bus(BusError::Io(e)))?;
        Ok(())
    }
}

fn next_due(t: Timestamp, period: i64) -> Timestamp {
    (t.div_euclid(period) + 1) * period
}
