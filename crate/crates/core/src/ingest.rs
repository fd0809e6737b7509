//! Bus consumers that feed the model store and the telemetry store.

use serde::Serialize;

use crate::bus::{Bus, BusError, Consumer, METRIC_SAMPLES, STRUCTURAL_EVENTS};
use crate::event::StructuralEvent;
use crate::model::{Applied, ModelStore};
use crate::scalar::Scalar;
use crate::sensors::SampleRecord;
use crate::timeseries::{Sample, SeriesKey, TimeSeriesStore};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub events_applied: u64,
    pub events_duplicate: u64,
    pub events_rejected: u64,
    pub samples_stored: u64,
    pub samples_rejected: u64,
    pub malformed_records: u64,
}

/// What one drain pass did.
#[derive(Debug, Clone, Default)]
pub struct Drained {
    pub events: Vec<StructuralEvent>,
    pub samples: usize,
}

pub struct Ingestor {
    events: Consumer,
    samples: Consumer,
    stats: IngestStats,
}

const BATCH: usize = 4096;

impl Ingestor {
    /// Attaches consumers named `<name>.events` and `<name>.samples`,
    /// resuming from their committed offsets.
    pub fn new(bus: &Bus, name: &str) -> Result<Self, BusError> {
        Ok(Ingestor {
            events: bus.subscribe(STRUCTURAL_EVENTS, &format!("{name}.events"), None)?,
            samples: bus.subscribe(METRIC_SAMPLES, &format!("{name}.samples"), None)?,
            stats: IngestStats::default(),
        })
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    /// Applies every pending structural event, then every pending sample
    /// batch. Events go first so samples of new entities find them.
    pub fn drain<V: Scalar>(
        &mut self,
        model: &mut ModelStore,
        store: &TimeSeriesStore<V>,
    ) -> Result<Drained, BusError> {
        let mut out = Drained::default();
        loop {
            let records = self.events.poll(BATCH);
            let Some(last) = records.last().map(|r| r.offset) else { break };
            for record in &records {
                let Ok(event) = record.json::<StructuralEvent>() else {
                    self.stats.malformed_records += 1;
                    continue;
                };
                match model.apply_event(event.clone()) {
                    Ok(Applied::Applied) => {
                        self.stats.events_applied += 1;
                        out.events.push(event);
                    }
                    Ok(Applied::Duplicate) => self.stats.events_duplicate += 1,
                    Err(e) => {
                        self.stats.events_rejected += 1;
                        tracing::warn!(seq = event.seq, error = %e, "structural event rejected");
                    }
                }
            }
            self.events.ack(last)?;
        }
        loop {
            let records = self.samples.poll(BATCH);
            let Some(last) = records.last().map(|r| r.offset) else { break };
            for record in &records {
                let Ok(batch) = record.json::<Vec<SampleRecord>>() else {
                    self.stats.malformed_records += 1;
                    continue;
                };
                for s in batch {
                    let key = SeriesKey::new(s.entity_id.as_str(), s.metric);
                    match store.append(&*model, &key, Sample::new(s.ts, V::from_f64_lossy(s.value))) {
                        Ok(()) => {
                            self.stats.samples_stored += 1;
                            out.samples += 1;
                        }
                        Err(_) => self.stats.samples_rejected += 1,
                    }
                }
            }
            self.samples.ack(last)?;
        }
        Ok(out)
    }
}
