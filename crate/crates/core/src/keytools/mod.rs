//! Envelope encryption: per-module DEKs wrapped either directly by a KMS
//! master key (single wrapping) or by a locally cached KEK that is itself
//! wrapped by the master key (double wrapping).
//!
//! Double wrapping contacts the KMS once per master key per cache TTL on the
//! write side, and once per (master key, KEK) per TTL on the read side. When
//! the KMS revokes a caller's access, cached keys keep working until their
//! entry expires; the next KMS round trip then fails with
//! [`Error::AccessDenied`].

mod cache;
mod material;

use std::str::FromStr;
use std::sync::Arc;

pub use cache::{Clock, KekCache, KekCacheEntry, ManualClock, MonotonicClock, DEFAULT_TTL};
pub use material::{decode_key_material, encode_key_material, KeyMaterial, Wrapping, KEY_MATERIAL_TYPE};

use crate::crypto::{self, Dek, KEY_LEN};
use crate::error::{Error, Result};
use crate::kms::KmsClient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WrapMode {
    Single,
    Double,
}

impl FromStr for WrapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(WrapMode::Single),
            "double" => Ok(WrapMode::Double),
            other => Err(Error::Config(format!("unknown wrap mode {other:?}"))),
        }
    }
}

/// Recovers DEKs from key material on the read path.
pub trait KeyResolver: Send + Sync {
    fn resolve_dek(&self, material: &KeyMaterial) -> Result<Dek>;
}

fn key_from_kms(bytes: Vec<u8>) -> Result<[u8; KEY_LEN]> {
    bytes
        .try_into()
        .map_err(|b: Vec<u8>| Error::MalformedKeyMaterial(format!("KMS returned a {}-byte key", b.len())))
}

/// Runs a KMS call, dropping cached keys for the master key on denial.
fn kms_call<T>(cache: &KekCache, master_key_id: &str, call: impl FnOnce() -> Result<T>) -> Result<T> {
    call().inspect_err(|err| {
        if matches!(err, Error::AccessDenied(_)) {
            cache.invalidate(master_key_id);
        }
    })
}

/// Creates a fresh DEK for one module and the key material that lets an
/// authorized reader recover it.
pub fn create_dek_for_write(
    master_key_id: &str,
    is_footer: bool,
    mode: WrapMode,
    kms: &dyn KmsClient,
    cache: &KekCache,
) -> Result<(Dek, KeyMaterial)> {
    let dek = Dek::generate()?;
    let (wrapped_dek, wrapping) = match mode {
        WrapMode::Single => {
            let wrapped = kms_call(cache, master_key_id, || kms.wrap(master_key_id, dek.as_bytes()))?;
            (wrapped, Wrapping::Single)
        }
        WrapMode::Double => {
            let entry = match cache.live_write_kek(master_key_id) {
                Some(entry) => entry,
                None => {
                    let kek: [u8; KEY_LEN] = crypto::generate_key(KEY_LEN)?.try_into().expect("16 bytes");
                    let kek_id: [u8; 16] = crypto::generate_key(KEY_LEN)?.try_into().expect("16 bytes");
                    let wrapped_kek = kms_call(cache, master_key_id, || kms.wrap(master_key_id, &kek))?;
                    cache.insert_write_kek(master_key_id, kek, kek_id, wrapped_kek)
                }
            };
            let wrapped = crypto::wrap_key(&entry.kek, dek.as_bytes())?;
            (
                wrapped,
                Wrapping::Double {
                    kek_id: entry.kek_id,
                    wrapped_kek: entry.wrapped_kek.clone(),
                },
            )
        }
    };
    let material = KeyMaterial {
        is_footer_key: is_footer,
        master_key_id: master_key_id.to_string(),
        wrapped_dek,
        wrapping,
    };
    Ok((dek, material))
}

/// Recovers the DEK described by `km`, consulting the cache before the KMS.
pub fn unwrap_dek(km: &KeyMaterial, kms: &dyn KmsClient, cache: &KekCache) -> Result<Dek> {
    let mek = km.master_key_id.as_str();
    match &km.wrapping {
        Wrapping::Single => {
            if let Some(dek) = cache.live_single_dek(mek, &km.wrapped_dek) {
                return Ok(Dek::from_bytes(dek));
            }
            let dek = key_from_kms(kms_call(cache, mek, || kms.unwrap(mek, &km.wrapped_dek))?)?;
            cache.insert_single_dek(mek, &km.wrapped_dek, dek);
            Ok(Dek::from_bytes(dek))
        }
        Wrapping::Double { kek_id, wrapped_kek } => {
            let kek = match cache.live_read_kek(mek, kek_id) {
                Some(kek) => kek,
                None => {
                    let kek = key_from_kms(kms_call(cache, mek, || kms.unwrap(mek, wrapped_kek))?)?;
                    cache.insert_read_kek(mek, *kek_id, kek);
                    kek
                }
            };
            Ok(Dek::from_bytes(crypto::unwrap_key(&kek, &km.wrapped_dek)?))
        }
    }
}

/// A KMS client paired with its process-wide KEK cache.
#[derive(Clone)]
pub struct KeyManager {
    kms: Arc<dyn KmsClient>,
    cache: Arc<KekCache>,
}

impl KeyManager {
    pub fn new(kms: Arc<dyn KmsClient>, cache: Arc<KekCache>) -> Self {
        Self { kms, cache }
    }

    pub fn with_ttl(kms: Arc<dyn KmsClient>, ttl: std::time::Duration) -> Self {
        Self::new(kms, Arc::new(KekCache::new(ttl)))
    }

    pub fn kms(&self) -> &Arc<dyn KmsClient> {
        &self.kms
    }

    pub fn cache(&self) -> &Arc<KekCache> {
        &self.cache
    }

    pub fn create_dek(&self, master_key_id: &str, is_footer: bool, mode: WrapMode) -> Result<(Dek, KeyMaterial)> {
        create_dek_for_write(master_key_id, is_footer, mode, self.kms.as_ref(), &self.cache)
    }

    pub fn unwrap_dek(&self, km: &KeyMaterial) -> Result<Dek> {
        unwrap_dek(km, self.kms.as_ref(), &self.cache)
    }
}

impl KeyResolver for KeyManager {
    fn resolve_dek(&self, material: &KeyMaterial) -> Result<Dek> {
        self.unwrap_dek(material)
    }
}
