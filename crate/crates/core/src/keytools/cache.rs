use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use zeroize::Zeroize;

/// Monotonic time source for cache expiry.
pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct MonotonicClock;

impl Clock for MonotonicClock {
    fn now(&self) -> Instant {
        Instant::now()
    }
}

/// Clock that only moves when told to. For tests and simulations.
#[derive(Debug)]
pub struct ManualClock {
    origin: Instant,
    offset_nanos: AtomicU64,
}

impl ManualClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
            offset_nanos: AtomicU64::new(0),
        }
    }

    pub fn advance(&self, by: Duration) {
        self.offset_nanos.fetch_add(by.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Default for ManualClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Instant {
        self.origin + Duration::from_nanos(self.offset_nanos.load(Ordering::SeqCst))
    }
}

#[derive(Clone)]
pub struct KekCacheEntry {
    pub kek: [u8; 16],
    pub kek_id: [u8; 16],
    pub wrapped_kek: String,
    pub expires_at: Instant,
}

impl Drop for KekCacheEntry {
    fn drop(&mut self) {
        self.kek.zeroize();
    }
}

struct Unwrapped {
    key: [u8; 16],
    expires_at: Instant,
}

impl Drop for Unwrapped {
    fn drop(&mut self) {
        self.key.zeroize();
    }
}

#[derive(Default)]
struct Maps {
    /// master key id -> the KEK this process wraps new DEKs with.
    write: HashMap<String, KekCacheEntry>,
    /// (master key id, kek id) -> KEK recovered from the KMS.
    read: HashMap<(String, [u8; 16]), Unwrapped>,
    /// (master key id, wrapped DEK) -> DEK recovered from the KMS in single mode.
    single: HashMap<(String, String), Unwrapped>,
}

/// Per-process KEK cache with a fixed time-to-live.
///
/// Entries are checked against the clock on lookup and never served once
/// `expires_at` has passed; a zero TTL disables caching.
pub struct KekCache {
    ttl: Duration,
    clock: Arc<dyn Clock>,
    maps: Mutex<Maps>,
}

pub const DEFAULT_TTL: Duration = Duration::from_secs(600);

impl Default for KekCache {
    fn default() -> Self {
        Self::new(DEFAULT_TTL)
    }
}

impl KekCache {
    pub fn new(ttl: Duration) -> Self {
        Self::with_clock(ttl, Arc::new(MonotonicClock))
    }

    pub fn with_clock(ttl: Duration, clock: Arc<dyn Clock>) -> Self {
        Self {
            ttl,
            clock,
            maps: Mutex::new(Maps::default()),
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    fn expiry(&self) -> Instant {
        self.clock.now() + self.ttl
    }

    fn maps(&self) -> std::sync::MutexGuard<'_, Maps> {
        self.maps.lock().expect("KEK cache lock poisoned")
    }

    pub fn live_write_kek(&self, master_key_id: &str) -> Option<KekCacheEntry> {
        let now = self.clock.now();
        let mut maps = self.maps();
        match maps.write.get(master_key_id) {
            Some(entry) if now < entry.expires_at => Some(entry.clone()),
            Some(_) => {
                maps.write.remove(master_key_id);
                None
            }
            None => None,
        }
    }

    /// Caches a freshly wrapped KEK unless a concurrent writer already
    /// installed a live one; returns whichever entry is now cached.
    pub fn insert_write_kek(
        &self,
        master_key_id: &str,
        kek: [u8; 16],
        kek_id: [u8; 16],
        wrapped_kek: String,
    ) -> KekCacheEntry {
        let now = self.clock.now();
        let candidate = KekCacheEntry {
            kek,
            kek_id,
            wrapped_kek,
            expires_at: self.expiry(),
        };
        let mut maps = self.maps();
        match maps.write.get(master_key_id) {
            Some(existing) if now < existing.expires_at => existing.clone(),
            _ => {
                maps.write.insert(master_key_id.to_string(), candidate.clone());
                candidate
            }
        }
    }

    pub fn live_read_kek(&self, master_key_id: &str, kek_id: &[u8; 16]) -> Option<[u8; 16]> {
        let now = self.clock.now();
        let mut maps = self.maps();
        let key = (master_key_id.to_string(), *kek_id);
        match maps.read.get(&key) {
            Some(entry) if now < entry.expires_at => Some(entry.key),
            Some(_) => {
                maps.read.remove(&key);
                None
            }
            None => None,
        }
    }

    pub fn insert_read_kek(&self, master_key_id: &str, kek_id: [u8; 16], kek: [u8; 16]) {
        let expires_at = self.expiry();
        self.maps()
            .read
            .insert((master_key_id.to_string(), kek_id), Unwrapped { key: kek, expires_at });
    }

    pub fn live_single_dek(&self, master_key_id: &str, wrapped_dek: &str) -> Option<[u8; 16]> {
        let now = self.clock.now();
        let mut maps = self.maps();
        let key = (master_key_id.to_string(), wrapped_dek.to_string());
        match maps.single.get(&key) {
            Some(entry) if now < entry.expires_at => Some(entry.key),
            Some(_) => {
                maps.single.remove(&key);
                None
            }
            None => None,
        }
    }

    pub fn insert_single_dek(&self, master_key_id: &str, wrapped_dek: &str, dek: [u8; 16]) {
        let expires_at = self.expiry();
        self.maps().single.insert(
            (master_key_id.to_string(), wrapped_dek.to_string()),
            Unwrapped { key: dek, expires_at },
        );
    }

    /// Drops every entry derived from `master_key_id`.
    pub fn invalidate(&self, master_key_id: &str) {
        let mut maps = self.maps();
        maps.write.remove(master_key_id);
        maps.read.retain(|(mek, _), _| mek != master_key_id);
        maps.single.retain(|(mek, _), _| mek != master_key_id);
    }

    pub fn clear(&self) {
        *self.maps() = Maps::default();
    }

    /// Number of entries (live or not yet purged) across all maps.
    pub fn len(&self) -> usize {
        let maps = self.maps();
        maps.write.len() + maps.read.len() + maps.single.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
