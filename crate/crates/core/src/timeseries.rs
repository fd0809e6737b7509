//! In-memory telemetry store: one ordered series per (entity, metric).
//!
//! Appends to different series proceed in parallel; appends to one series
//! are serialized by that series' lock. Duplicate timestamps keep the last
//! written value.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, Write};
use std::ops::Bound;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::entity::{Timestamp, NANOS_PER_SEC};
use crate::model::EntityLookup;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesKey {
    pub entity_id: String,
    pub metric: String,
}

impl SeriesKey {
    pub fn new(entity_id: impl Into<String>, metric: impl Into<String>) -> Self {
        SeriesKey {
            entity_id: entity_id.into(),
            metric: metric.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample<V> {
    pub ts: Timestamp,
    pub value: V,
}

impl<V> Sample<V> {
    pub fn new(ts: Timestamp, value: V) -> Self {
        Sample { ts, value }
    }
}

pub fn is_valid_metric_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some('a'..='z'))
        && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreConfig {
    /// Samples older than `newest - retention` are evicted per series.
    pub retention: i64,
    /// Slack around an entity's lifetime within which samples are accepted.
    pub lifetime_tolerance: i64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            retention: 24 * 3600 * NANOS_PER_SEC,
            lifetime_tolerance: 5 * NANOS_PER_SEC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SeriesError {
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown series {}/{}", .0.entity_id, .0.metric)]
    UnknownSeries(SeriesKey),
    #[error("sample value is not finite")]
    NonFiniteValue,
    #[error("sample at {ts} lies outside the lifetime of `{entity}`")]
    OutsideLifetime { entity: String, ts: Timestamp },
    #[error("invalid metric name `{0}`")]
    InvalidMetricName(String),
    #[error("invalid range: {from} > {to}")]
    InvalidRange { from: Timestamp, to: Timestamp },
}

type Series<V> = Arc<Mutex<BTreeMap<Timestamp, V>>>;

pub struct TimeSeriesStore<V> {
    config: StoreConfig,
    series: RwLock<HashMap<SeriesKey, Series<V>>>,
    metrics: RwLock<BTreeMap<String, BTreeSet<String>>>,
}

impl<V: Scalar> Default for TimeSeriesStore<V> {
    fn default() -> Self {
        Self::new(StoreConfig::default())
    }
}

impl<V: Scalar> TimeSeriesStore<V> {
    pub fn new(config: StoreConfig) -> Self {
        TimeSeriesStore {
            config,
            series: RwLock::new(HashMap::new()),
            metrics: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn config(&self) -> StoreConfig {
        self.config
    }

    pub fn append(
        &self,
        entities: &dyn EntityLookup,
        key: &SeriesKey,
        sample: Sample<V>,
    ) -> Result<(), SeriesError> {
        if !is_valid_metric_name(&key.metric) {
            return Err(SeriesError::InvalidMetricName(key.metric.clone()));
        }
        let lifetime = entities
            .entity_lifetime(&key.entity_id)
            .ok_or_else(|| SeriesError::UnknownEntity(key.entity_id.clone()))?;
        if !sample.value.is_finite() {
            return Err(SeriesError::NonFiniteValue);
        }
        let tol = self.config.lifetime_tolerance;
        let before_start = sample.ts < lifetime.start.saturating_sub(tol);
        let after_end = lifetime
            .end
            .is_some_and(|end| sample.ts >= end.saturating_add(tol));
        if before_start || after_end {
            return Err(SeriesError::OutsideLifetime {
                entity: key.entity_id.clone(),
                ts: sample.ts,
            });
        }

        let series = self.series_or_insert(key);
        let mut points = series.lock();
        points.insert(sample.ts, sample.value);
        if let Some((&newest, _)) = points.last_key_value() {
            let horizon = newest.saturating_sub(self.config.retention);
            if points.first_key_value().is_some_and(|(&oldest, _)| oldest < horizon) {
                *points = points.split_off(&horizon);
            }
        }
        Ok(())
    }

    fn series_or_insert(&self, key: &SeriesKey) -> Series<V> {
        if let Some(series) = self.series.read().get(key) {
            return series.clone();
        }
        let mut map = self.series.write();
        let series = map.entry(key.clone()).or_default().clone();
        drop(map);
        self.metrics
            .write()
            .entry(key.entity_id.clone())
            .or_default()
            .insert(key.metric.clone());
        series
    }

    fn get(&self, key: &SeriesKey) -> Result<Series<V>, SeriesError> {
        self.series
            .read()
            .get(key)
            .cloned()
            .ok_or_else(|| SeriesError::UnknownSeries(key.clone()))
    }

    /// Samples with `from <= ts < to`, ascending.
    pub fn query_range(
        &self,
        key: &SeriesKey,
        from: Timestamp,
        to: Timestamp,
    ) -> Result<Vec<Sample<V>>, SeriesError> {
        if from > to {
            return Err(SeriesError::InvalidRange { from, to });
        }
        let series = self.get(key)?;
        let points = series.lock();
        Ok(points
            .range(from..to)
            .map(|(&ts, &value)| Sample { ts, value })
            .collect())
    }

    /// Samples with `from <= ts <= to`, ascending.
    pub fn query_closed(
        &self,
        key: &SeriesKey,
        from: Timestamp,
        to: Timestamp,
    ) -> Result<Vec<Sample<V>>, SeriesError> {
        if from > to {
            return Err(SeriesError::InvalidRange { from, to });
        }
        let series = self.get(key)?;
        let points = series.lock();
        Ok(points
            .range((Bound::Included(from), Bound::Included(to)))
            .map(|(&ts, &value)| Sample { ts, value })
            .collect())
    }

    /// Newest sample with `ts <= t`.
    pub fn latest_at(&self, key: &SeriesKey, t: Timestamp) -> Result<Option<Sample<V>>, SeriesError> {
        let series = self.get(key)?;
        let points = series.lock();
        Ok(points
            .range(..=t)
            .next_back()
            .map(|(&ts, &value)| Sample { ts, value }))
    }

    /// Up to `n` newest samples with `ts <= t`, oldest first.
    pub fn last_n(&self, key: &SeriesKey, t: Timestamp, n: usize) -> Result<Vec<Sample<V>>, SeriesError> {
        let series = self.get(key)?;
        let points = series.lock();
        let mut out: Vec<_> = points
            .range(..=t)
            .rev()
            .take(n)
            .map(|(&ts, &value)| Sample { ts, value })
            .collect();
        out.reverse();
        Ok(out)
    }

    pub fn has_series(&self, key: &SeriesKey) -> bool {
        self.series.read().contains_key(key)
    }

    /// Sorted metric names ever written for the entity.
    pub fn list_metrics(
        &self,
        entities: &dyn EntityLookup,
        entity_id: &str,
    ) -> Result<Vec<String>, SeriesError> {
        if entities.entity_lifetime(entity_id).is_none() {
            return Err(SeriesError::UnknownEntity(entity_id.to_string()));
        }
        Ok(self
            .metrics
            .read()
            .get(entity_id)
            .map(|m| m.iter().cloned().collect())
            .unwrap_or_default())
    }

    /// Every metric name written for any entity.
    pub fn metric_names(&self) -> BTreeSet<String> {
        self.metrics.read().values().flatten().cloned().collect()
    }

    pub fn series_count(&self) -> usize {
        self.series.read().len()
    }

    pub fn sample_count(&self) -> usize {
        self.series.read().values().map(|s| s.lock().len()).sum()
    }

    /// Writes one series as `ts,value` CSV with a header line.
    pub fn export_csv(&self, key: &SeriesKey, mut out: impl Write) -> io::Result<usize> {
        let series = self
            .get(key)
            .map_err(|e| io::Error::new(io::ErrorKind::NotFound, e.to_string()))?;
        let points = series.lock();
        writeln!(out, "ts,value")?;
        for (ts, value) in points.iter() {
            writeln!(out, "{ts},{value}")?;
        }
        out.flush()?;
        Ok(points.len())
    }
}
