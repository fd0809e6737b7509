//! Embedded publish/subscribe log with bounded buffering and optional
//! spill-to-disk durability.
//!
//! Each topic is a single ordered partition. Consumers are named; their
//! committed offsets are persisted alongside the log so a reopened bus
//! resumes every consumer where it last acknowledged. Records are retained
//! until every registered consumer has acknowledged them.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Condvar, Mutex};
use serde::de::DeserializeOwned;

pub const STRUCTURAL_EVENTS: &str = "structural_events";
pub const METRIC_SAMPLES: &str = "metric_samples";
pub const CACHE_INVALIDATION: &str = "cache_invalidation";

#[derive(Debug, thiserror::Error)]
pub enum BusError {
    #[error("topic `{topic}` buffer full")]
    BufferFull { topic: String },
    #[error("offset {offset} out of range [{low}, {high}] on `{topic}`")]
    OffsetOutOfRange {
        topic: String,
        offset: u64,
        low: u64,
        high: u64,
    },
    #[error("invalid topic name `{0}`")]
    InvalidTopic(String),
    #[error("corrupt spill file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct BusConfig {
    pub max_records: usize,
    pub max_bytes: usize,
    /// Directory for spill files; `None` keeps everything in memory.
    pub spill_dir: Option<PathBuf>,
    /// Un-acked records are redelivered once this much time has passed
    /// since they were handed out.
    pub ack_timeout: Duration,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            max_records: 1_000_000,
            max_bytes: 256 << 20,
            spill_dir: None,
            ack_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub offset: u64,
    /// Wall-clock nanoseconds at append.
    pub enqueue_ts: i64,
    pub payload: Vec<u8>,
}

impl Record {
    pub fn json<T: DeserializeOwned>(&self) -> serde_json::Result<T> {
        serde_json::from_slice(&self.payload)
    }
}

struct Spill {
    log_path: PathBuf,
    offsets_path: PathBuf,
    writer: BufWriter<File>,
    /// Records physically present in the log file, trimmed or not.
    on_disk: usize,
}

struct TopicState {
    base: u64,
    records: VecDeque<Record>,
    bytes: usize,
    consumers: BTreeMap<String, u64>,
    spill: Option<Spill>,
}

impl TopicState {
    fn next_offset(&self) -> u64 {
        self.base + self.records.len() as u64
    }

    fn trim(&mut self) -> io::Result<()> {
        let Some(&low) = self.consumers.values().min() else {
            return Ok(());
        };
        while self.base < low {
            let Some(r) = self.records.pop_front() else { break };
            self.bytes -= r.payload.len();
            self.base += 1;
        }
        let live = self.records.len();
        if let Some(spill) = &mut self.spill {
            if spill.on_disk > 1024 && spill.on_disk > 2 * live {
                compact(spill, &self.records)?;
            }
        }
        Ok(())
    }

    fn persist_offsets(&mut self) -> io::Result<()> {
        if let Some(spill) = &self.spill {
            let tmp = spill.offsets_path.with_extension("offsets.tmp");
            fs::write(&tmp, serde_json::to_vec(&self.consumers)?)?;
            fs::rename(tmp, &spill.offsets_path)?;
        }
        Ok(())
    }
}

struct Topic {
    name: String,
    state: Mutex<TopicState>,
    arrived: Condvar,
}

struct Inner {
    config: BusConfig,
    topics: Mutex<HashMap<String, Arc<Topic>>>,
}

/// Cheaply cloneable handle to a bus.
#[derive(Clone)]
pub struct Bus {
    inner: Arc<Inner>,
}

impl Default for Bus {
    fn default() -> Self {
        Bus::in_memory(BusConfig::default())
    }
}

fn now_nanos() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as i64)
        .unwrap_or(0)
}

fn valid_topic(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

fn write_record(w: &mut impl Write, r: &Record) -> io::Result<()> {
    w.write_all(&r.offset.to_le_bytes())?;
    w.write_all(&r.enqueue_ts.to_le_bytes())?;
    w.write_all(&(r.payload.len() as u32).to_le_bytes())?;
    w.write_all(&r.payload)
}

fn read_record(r: &mut impl Read) -> io::Result<Option<Record>> {
    let mut head = [0u8; 20];
    match r.read_exact(&mut head[..1]) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    r.read_exact(&mut head[1..])?;
    let offset = u64::from_le_bytes(head[0..8].try_into().unwrap());
    let enqueue_ts = i64::from_le_bytes(head[8..16].try_into().unwrap());
    let len = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
    let mut payload = vec![0; len];
    r.read_exact(&mut payload)?;
    Ok(Some(Record {
        offset,
        enqueue_ts,
        payload,
    }))
}

fn compact(spill: &mut Spill, records: &VecDeque<Record>) -> io::Result<()> {
    spill.writer.flush()?;
    let tmp = spill.log_path.with_extension("log.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        for r in records {
            write_record(&mut w, r)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, &spill.log_path)?;
    spill.writer = BufWriter::new(OpenOptions::new().append(true).open(&spill.log_path)?);
    spill.on_disk = records.len();
    Ok(())
}

impl Bus {
    pub fn in_memory(config: BusConfig) -> Self {
        Bus {
            inner: Arc::new(Inner {
                config: BusConfig {
                    spill_dir: None,
                    ..config
                },
                topics: Mutex::default(),
            }),
        }
    }

    /// Opens a bus, reloading any topics spilled under `config.spill_dir`.
    pub fn open(config: BusConfig) -> Result<Self, BusError> {
        let bus = Bus {
            inner: Arc::new(Inner {
                config,
                topics: Mutex::default(),
            }),
        };
        if let Some(dir) = bus.inner.config.spill_dir.clone() {
            fs::create_dir_all(&dir)?;
            let mut names: Vec<String> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let name = e.file_name().into_string().ok()?;
                    name.strip_suffix(".log").map(str::to_string)
                })
                .collect();
            names.sort();
            for name in names {
                bus.topic(&name)?;
            }
        }
        Ok(bus)
    }

    pub fn config(&self) -> &BusConfig {
        &self.inner.config
    }

    fn load_spill(&self, dir: &Path, name: &str) -> Result<TopicState, BusError> {
        let log_path = dir.join(format!("{name}.log"));
        let offsets_path = dir.join(format!("{name}.offsets"));
        let consumers: BTreeMap<String, u64> = match fs::read(&offsets_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| BusError::Corrupt {
                path: offsets_path.clone(),
                reason: e.to_string(),
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        let mut records = VecDeque::new();
        let mut on_disk = 0;
        let mut valid_len = 0u64;
        if log_path.exists() {
            let mut reader = BufReader::new(File::open(&log_path)?);
            loop {
                match read_record(&mut reader) {
                    Ok(Some(r)) => {
                        if let Some(last) = records.back().map(|l: &Record| l.offset) {
                            if r.offset != last + 1 {
                                return Err(BusError::Corrupt {
                                    path: log_path,
                                    reason: format!("offset {} follows {last}", r.offset),
                                });
                            }
                        }
                        valid_len += 20 + r.payload.len() as u64;
                        on_disk += 1;
                        records.push_back(r);
                    }
                    Ok(None) => break,
                    // A torn final record from a crash mid-write is dropped.
                    Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&log_path)?;
        file.set_len(valid_len)?;
        let base = records.front().map_or_else(
            || consumers.values().copied().max().unwrap_or(0),
            |r| r.offset,
        );
        let bytes = records.iter().map(|r| r.payload.len()).sum();
        let mut state = TopicState {
            base,
            records,
            bytes,
            consumers,
            spill: Some(Spill {
                log_path,
                offsets_path,
                writer: BufWriter::new(file),
                on_disk,
            }),
        };
        state.trim()?;
        Ok(state)
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>, BusError> {
        if !valid_topic(name) {
            return Err(BusError::InvalidTopic(name.to_string()));
        }
        let mut topics = self.inner.topics.lock();
        if let Some(t) = topics.get(name) {
            return Ok(t.clone());
        }
        let state = match &self.inner.config.spill_dir {
            Some(dir) => self.load_spill(dir, name)?,
            None => TopicState {
                base: 0,
                records: VecDeque::new(),
                bytes: 0,
                consumers: BTreeMap::new(),
                spill: None,
            },
        };
        let topic = Arc::new(Topic {
            name: name.to_string(),
            state: Mutex::new(state),
            arrived: Condvar::new(),
        });
        topics.insert(name.to_string(), topic.clone());
        Ok(topic)
    }

    pub fn publish(&self, topic: &str, payload: &[u8]) -> Result<u64, BusError> {
        let topic = self.topic(topic)?;
        let mut state = topic.state.lock();
        let config = &self.inner.config;
        if state.records.len() >= config.max_records
            || state.bytes + payload.len() > config.max_bytes
        {
            return Err(BusError::BufferFull {
                topic: topic.name.clone(),
            });
        }
        let record = Record {
            offset: state.next_offset(),
            enqueue_ts: now_nanos(),
            payload: payload.to_vec(),
        };
        if let Some(spill) = &mut state.spill {
            write_record(&mut spill.writer, &record)?;
            spill.writer.flush()?;
            spill.on_disk += 1;
        }
        let offset = record.offset;
        state.bytes += record.payload.len();
        state.records.push_back(record);
        drop(state);
        topic.arrived.notify_all();
        Ok(offset)
    }

    pub fn publish_json<T: serde::Serialize>(&self, topic: &str, value: &T) -> Result<u64, BusError> {
        let bytes = serde_json::to_vec(value).map_err(io::Error::from)?;
        self.publish(topic, &bytes)
    }

    /// Offset the next published record will get.
    pub fn next_offset(&self, topic: &str) -> Result<u64, BusError> {
        Ok(self.topic(topic)?.state.lock().next_offset())
    }

    /// Oldest offset still retained.
    pub fn low_offset(&self, topic: &str) -> Result<u64, BusError> {
        Ok(self.topic(topic)?.state.lock().base)
    }

    pub fn retained(&self, topic: &str) -> Result<usize, BusError> {
        Ok(self.topic(topic)?.state.lock().records.len())
    }

    /// Attaches a named consumer.
    ///
    /// With `from = None` a known consumer resumes at its committed offset
    /// and a new one starts at the oldest retained record.
    pub fn subscribe(
        &self,
        topic: &str,
        consumer: &str,
        from: Option<u64>,
    ) -> Result<Consumer, BusError> {
        let topic = self.topic(topic)?;
        let start = {
            let mut state = topic.state.lock();
            let start = match from {
                Some(offset) => offset,
                None => state.consumers.get(consumer).copied().unwrap_or(state.base),
            };
            let high = state.next_offset();
            if start < state.base || start > high {
                return Err(BusError::OffsetOutOfRange {
                    topic: topic.name.clone(),
                    offset: start,
                    low: state.base,
                    high,
                });
            }
            state.consumers.insert(consumer.to_string(), start);
            state.persist_offsets()?;
            start
        };
        Ok(Consumer {
            topic,
            name: consumer.to_string(),
            cursor: start,
            committed: start,
            handed_out_at: None,
            ack_timeout: self.inner.config.ack_timeout,
        })
    }

    /// Removes a consumer registration so it no longer pins retention.
    pub fn remove_consumer(&self, topic: &str, consumer: &str) -> Result<(), BusError> {
        let topic = self.topic(topic)?;
        let mut state = topic.state.lock();
        state.consumers.remove(consumer);
        state.persist_offsets()?;
        state.trim()?;
        Ok(())
    }

    pub fn flush(&self) -> Result<(), BusError> {
        let topics: Vec<_> = self.inner.topics.lock().values().cloned().collect();
        for topic in topics {
            if let Some(spill) = &mut topic.state.lock().spill {
                spill.writer.flush()?;
                spill.writer.get_ref().sync_data()?;
            }
        }
        Ok(())
    }
}

/// A named reader over one topic with at-least-once delivery.
pub struct Consumer {
    topic: Arc<Topic>,
    name: String,
    cursor: u64,
    committed: u64,
    handed_out_at: Option<Instant>,
    ack_timeout: Duration,
}

impl Consumer {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn committed(&self) -> u64 {
        self.committed
    }

    /// Returns up to `max` records past the read cursor. Records handed out
    /// but not acknowledged within the ack timeout are handed out again.
    pub fn poll(&mut self, max: usize) -> Vec<Record> {
        let topic = self.topic.clone();
        let state = topic.state.lock();
        self.take(&state, max)
    }

    /// Like [`Consumer::poll`] but waits up to `timeout` for new records.
    pub fn poll_wait(&mut self, max: usize, timeout: Duration) -> Vec<Record> {
        let deadline = Instant::now() + timeout;
        let topic = self.topic.clone();
        let mut state = topic.state.lock();
        loop {
            let out = self.take(&state, max);
            if !out.is_empty() {
                return out;
            }
            if topic.arrived.wait_until(&mut state, deadline).timed_out() {
                return self.take(&state, max);
            }
        }
    }

    fn take(&mut self, state: &TopicState, max: usize) -> Vec<Record> {
        if self.cursor > self.committed
            && self
                .handed_out_at
                .is_some_and(|at| at.elapsed() >= self.ack_timeout)
        {
            self.cursor = self.committed;
        }
        // Another registration under the same name may have trimmed past us.
        self.cursor = self.cursor.max(state.base);
        let skip = (self.cursor - state.base) as usize;
        let out: Vec<Record> = state.records.iter().skip(skip).take(max).cloned().collect();
        if let Some(last) = out.last() {
            self.cursor = last.offset + 1;
            self.handed_out_at = Some(Instant::now());
        }
        out
    }

    /// Commits every offset up to and including `offset`.
    pub fn ack(&mut self, offset: u64) -> Result<(), BusError> {
        let next = offset + 1;
        if next <= self.committed {
            return Ok(());
        }
        let mut state = self.topic.state.lock();
        let high = state.next_offset();
        if next > high {
            return Err(BusError::OffsetOutOfRange {
                topic: self.topic.name.clone(),
                offset,
                low: state.base,
                high,
            });
        }
        self.committed = next;
        self.cursor = self.cursor.max(next);
        state.consumers.insert(self.name.clone(), next);
        state.persist_offsets()?;
        state.trim()?;
        Ok(())
    }
}
