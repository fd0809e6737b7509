//! Webhook delivery with bounded parallelism, retries and a dead-letter
//! counter.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use seastar_core::metric::{Notification, RetryPolicy};
use serde::Serialize;
use tokio::sync::{mpsc, Semaphore};

pub const DEFAULT_IN_FLIGHT: usize = 8;

#[derive(Debug, Default)]
pub struct DeliveryCounters {
    pub submitted: AtomicU64,
    pub delivered: AtomicU64,
    pub attempts: AtomicU64,
    pub failed_attempts: AtomicU64,
    pub dead_letters: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DeliveryStats {
    pub submitted: u64,
    pub delivered: u64,
    pub attempts: u64,
    pub failed_attempts: u64,
    pub dead_letters: u64,
}

impl DeliveryCounters {
    pub fn snapshot(&self) -> DeliveryStats {
        DeliveryStats {
            submitted: self.submitted.load(Ordering::Relaxed),
            delivered: self.delivered.load(Ordering::Relaxed),
            attempts: self.attempts.load(Ordering::Relaxed),
            failed_attempts: self.failed_attempts.load(Ordering::Relaxed),
            dead_letters: self.dead_letters.load(Ordering::Relaxed),
        }
    }

    /// Every submitted notification has been delivered or dead-lettered.
    pub fn settled(&self) -> bool {
        let s = self.snapshot();
        s.delivered + s.dead_letters == s.submitted
    }
}

#[derive(Debug, Clone)]
pub struct DispatcherConfig {
    pub in_flight: usize,
    pub retry: RetryPolicy,
    pub attempt_timeout: Duration,
}

impl Default for DispatcherConfig {
    fn default() -> Self {
        DispatcherConfig {
            in_flight: DEFAULT_IN_FLIGHT,
            retry: RetryPolicy::default(),
            attempt_timeout: Duration::from_secs(2),
        }
    }
}

/// Cloneable submission handle. Submitting never blocks, so the evaluation
/// loop can call it from synchronous code.
#[derive(Clone)]
pub struct Dispatcher {
    tx: mpsc::UnboundedSender<Notification>,
    counters: Arc<DeliveryCounters>,
}

impl Dispatcher {
    /// Starts the delivery loop on the current tokio runtime.
    pub fn spawn(config: DispatcherConfig) -> Dispatcher {
        let (tx, mut rx) = mpsc::unbounded_channel::<Notification>();
        let counters = Arc::new(DeliveryCounters::default());
        let client = reqwest::Client::builder()
            .timeout(config.attempt_timeout)
            .build()
            .expect("http client builds");
        let permits = Arc::new(Semaphore::new(config.in_flight.max(1)));
        let shared = counters.clone();
        tokio::spawn(async move {
            while let Some(note) = rx.recv().await {
                let permit = permits.clone().acquire_owned().await.expect("semaphore open");
                let client = client.clone();
                let counters = shared.clone();
                let retry = config.retry;
                tokio::spawn(async move {
                    deliver(&client, &note, retry, &counters).await;
                    drop(permit);
                });
            }
        });
        Dispatcher { tx, counters }
    }

    pub fn submit(&self, note: Notification) {
        self.counters.submitted.fetch_add(1, Ordering::Relaxed);
        if self.tx.send(note).is_err() {
            self.counters.dead_letters.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn stats(&self) -> DeliveryStats {
        self.counters.snapshot()
    }

    pub fn counters(&self) -> Arc<DeliveryCounters> {
        self.counters.clone()
    }

    /// Waits until everything submitted so far is settled or `timeout` passes.
    pub async fn drain(&self, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        while !self.counters.settled() {
            if tokio::time::Instant::now() >= deadline {
                return false;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        true
    }
}

async fn deliver(client: &reqwest::Client, note: &Notification, retry: RetryPolicy, counters: &DeliveryCounters) {
    for attempt in 0..retry.attempts {
        let delay = retry.delay_ms(attempt);
        if delay > 0 {
            tokio::time::sleep(Duration::from_millis(delay)).await;
        }
        counters.attempts.fetch_add(1, Ordering::Relaxed);
        let sent = client.post(&note.callback_uri).json(&note.payload).send().await;
        match sent {
            Ok(resp) if resp.status().is_success() => {
                counters.delivered.fetch_add(1, Ordering::Relaxed);
                return;
            }
            Ok(resp) => {
                tracing::debug!(uri = %note.callback_uri, status = %resp.status(), "webhook rejected");
            }
            Err(e) => tracing::debug!(uri = %note.callback_uri, error = %e, "webhook failed"),
        }
        counters.failed_attempts.fetch_add(1, Ordering::Relaxed);
    }
    counters.dead_letters.fetch_add(1, Ordering::Relaxed);
    tracing::warn!(uri = %note.callback_uri, "webhook dead-lettered");
}
