use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::KmsClient;
use crate::error::Result;

/// Fixed per-call round-trip time added in front of every KMS request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LatencyModel {
    pub rtt: Duration,
}

impl LatencyModel {
    pub fn fixed(rtt: Duration) -> Self {
        Self { rtt }
    }

    pub fn from_millis(ms: u64) -> Self {
        Self::fixed(Duration::from_millis(ms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KmsStats {
    pub wrap_calls: u64,
    pub unwrap_calls: u64,
    pub total_injected_latency: Duration,
}

impl KmsStats {
    pub fn total_calls(&self) -> u64 {
        self.wrap_calls + self.unwrap_calls
    }
}

#[derive(Default)]
struct Counters {
    wrap_calls: AtomicU64,
    unwrap_calls: AtomicU64,
    injected_nanos: AtomicU64,
}

/// Counts calls and injects latency in front of an inner client.
///
/// Every issued call is counted, including ones the inner client rejects.
#[derive(Clone)]
pub struct InstrumentedKms {
    inner: Arc<dyn KmsClient>,
    latency: LatencyModel,
    counters: Arc<Counters>,
}

impl InstrumentedKms {
    pub fn new(inner: Arc<dyn KmsClient>, latency: LatencyModel) -> Self {
        Self {
            inner,
            latency,
            counters: Arc::default(),
        }
    }

    /// Counting only, no added latency.
    pub fn counting(inner: Arc<dyn KmsClient>) -> Self {
        Self::new(inner, LatencyModel::default())
    }

    pub fn latency(&self) -> LatencyModel {
        self.latency
    }

    pub fn stats(&self) -> KmsStats {
        KmsStats {
            wrap_calls: self.counters.wrap_calls.load(Ordering::SeqCst),
            unwrap_calls: self.counters.unwrap_calls.load(Ordering::SeqCst),
            total_injected_latency: Duration::from_nanos(self.counters.injected_nanos.load(Ordering::SeqCst)),
        }
    }

    fn delay(&self) {
        let rtt = self.latency.rtt;
        if !rtt.is_zero() {
            thread::sleep(rtt);
            self.counters
                .injected_nanos
                .fetch_add(rtt.as_nanos() as u64, Ordering::SeqCst);
        }
    }
}

impl KmsClient for InstrumentedKms {
    fn wrap(&self, key_id: &str, plaintext: &[u8]) -> Result<String> {
        self.counters.wrap_calls.fetch_add(1, Ordering::SeqCst);
        self.delay();
        self.inner.wrap(key_id, plaintext)
    }

    fn unwrap(&self, key_id: &str, wrapped: &str) -> Result<Vec<u8>> {
        self.counters.unwrap_calls.fetch_add(1, Ordering::SeqCst);
        self.delay();
        self.inner.unwrap(key_id, wrapped)
    }
}

pub fn with_latency(inner: Arc<dyn KmsClient>, model: LatencyModel) -> InstrumentedKms {
    InstrumentedKms::new(inner, model)
}
