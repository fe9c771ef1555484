//! Columnar tables with modular encryption and envelope key management.
//!
//! * [`format`]: the `CCF1`/`CCFE` container and PLAIN column encoding.
//! * [`crypto`]: AES-GCM module encryption and key wrapping.
//! * [`keytools`]: single/double DEK wrapping with a TTL-bounded KEK cache.
//! * [`kms`]: master key store, instrumented clients, HTTP transport.
//! * [`query`]: column-pruning scans and the prescription misuse query.
//! * [`emrgen`]: seeded synthetic medical record tables.
//! * [`bench`]: local-vs-remote KMS overhead experiment.

pub mod bench;
pub mod crypto;
pub mod emrgen;
mod error;
pub mod format;
pub mod keytools;
pub mod kms;
pub mod query;

pub use error::{Error, Result};
