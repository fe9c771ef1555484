//! Key Management Service abstraction.
//!
//! Master keys live only inside a [`KeyStore`]; callers see them through the
//! [`KmsClient`] wrap/unwrap interface, either in-process ([`InMemoryKms`]) or
//! over HTTP ([`HttpKmsClient`] against [`serve_http`]). [`InstrumentedKms`]
//! decorates any client with call counting and fixed round-trip latency.

mod http;
mod instrumented;
mod store;

use std::sync::Arc;

pub use http::{serve_http, serve_http_blocking, HttpKmsClient, KmsServer};
pub use instrumented::{with_latency, InstrumentedKms, KmsStats, LatencyModel};
pub use store::{InMemoryKms, KeyStore};

use crate::error::Result;

/// Env var the CLI reads the bearer token from.
pub const TOKEN_ENV: &str = "CCF_KMS_TOKEN";

pub trait KmsClient: Send + Sync {
    /// Encrypts key bytes under master key `key_id`; returns base64.
    fn wrap(&self, key_id: &str, plaintext: &[u8]) -> Result<String>;

    fn unwrap(&self, key_id: &str, wrapped: &str) -> Result<Vec<u8>>;
}

impl<T: KmsClient + ?Sized> KmsClient for Arc<T> {
    fn wrap(&self, key_id: &str, plaintext: &[u8]) -> Result<String> {
        (**self).wrap(key_id, plaintext)
    }

    fn unwrap(&self, key_id: &str, wrapped: &str) -> Result<Vec<u8>> {
        (**self).unwrap(key_id, wrapped)
    }
}

/// Master key ids travel in URL paths, so they are restricted to a safe set.
pub(crate) fn validate_key_id(key_id: &str) -> Result<()> {
    let ok = !key_id.is_empty()
        && key_id.len() <= 128
        && key_id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(crate::error::Error::Config(format!(
            "invalid master key id {key_id:?}: use 1-128 chars of [A-Za-z0-9._-]"
        )))
    }
}
