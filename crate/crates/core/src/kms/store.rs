use std::collections::{HashMap, HashSet};
use std::sync::{Arc, RwLock};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

use super::{validate_key_id, KmsClient};
use crate::crypto::{self, EncryptedBlob, KEY_LEN};
use crate::error::{Error, Result};

struct MasterKeyRecord {
    key: [u8; KEY_LEN],
    allowed_tokens: HashSet<String>,
}

/// Server-side master key storage with per-key token ACLs.
pub struct KeyStore {
    admin_token: String,
    keys: RwLock<HashMap<String, MasterKeyRecord>>,
}

impl KeyStore {
    pub fn new(admin_token: impl Into<String>) -> Self {
        Self {
            admin_token: admin_token.into(),
            keys: RwLock::new(HashMap::new()),
        }
    }

    fn check_admin(&self, token: &str) -> Result<()> {
        if token == self.admin_token {
            Ok(())
        } else {
            Err(Error::Unauthorized)
        }
    }

    pub fn create_master_key<I, S>(&self, admin_token: &str, key_id: &str, allowed_tokens: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.check_admin(admin_token)?;
        validate_key_id(key_id)?;
        let mut keys = self.keys.write().expect("key store lock poisoned");
        if keys.contains_key(key_id) {
            return Err(Error::DuplicateKey(key_id.to_string()));
        }
        let key: [u8; KEY_LEN] = crypto::generate_key(KEY_LEN)?.try_into().expect("16 bytes");
        keys.insert(
            key_id.to_string(),
            MasterKeyRecord {
                key,
                allowed_tokens: allowed_tokens.into_iter().map(Into::into).collect(),
            },
        );
        Ok(())
    }

    pub fn revoke_access(&self, admin_token: &str, key_id: &str, token: &str) -> Result<()> {
        self.check_admin(admin_token)?;
        let mut keys = self.keys.write().expect("key store lock poisoned");
        let record = keys
            .get_mut(key_id)
            .ok_or_else(|| Error::UnknownKey(key_id.to_string()))?;
        record.allowed_tokens.remove(token);
        Ok(())
    }

    pub fn grant_access(&self, admin_token: &str, key_id: &str, token: &str) -> Result<()> {
        self.check_admin(admin_token)?;
        let mut keys = self.keys.write().expect("key store lock poisoned");
        let record = keys
            .get_mut(key_id)
            .ok_or_else(|| Error::UnknownKey(key_id.to_string()))?;
        record.allowed_tokens.insert(token.to_string());
        Ok(())
    }

    pub fn contains(&self, key_id: &str) -> bool {
        self.keys.read().expect("key store lock poisoned").contains_key(key_id)
    }

    fn with_key<T>(&self, token: &str, key_id: &str, f: impl FnOnce(&[u8; KEY_LEN]) -> Result<T>) -> Result<T> {
        let keys = self.keys.read().expect("key store lock poisoned");
        let record = keys.get(key_id).ok_or_else(|| Error::UnknownKey(key_id.to_string()))?;
        if !record.allowed_tokens.contains(token) {
            return Err(Error::AccessDenied(key_id.to_string()));
        }
        f(&record.key)
    }

    pub fn wrap(&self, token: &str, key_id: &str, plaintext: &[u8]) -> Result<String> {
        self.with_key(token, key_id, |mek| {
            let blob = crypto::seal(mek, plaintext, &[])?;
            Ok(BASE64.encode(blob.to_bytes()))
        })
    }

    pub fn unwrap(&self, token: &str, key_id: &str, wrapped: &str) -> Result<Vec<u8>> {
        self.with_key(token, key_id, |mek| {
            let raw = BASE64
                .decode(wrapped)
                .map_err(|e| Error::MalformedBlob(format!("wrapped key is not base64: {e}")))?;
            crypto::open(mek, &EncryptedBlob::from_bytes(&raw)?, &[])
        })
    }
}

/// In-process client bound to one bearer token.
#[derive(Clone)]
pub struct InMemoryKms {
    store: Arc<KeyStore>,
    token: String,
}

impl InMemoryKms {
    pub fn new(store: Arc<KeyStore>, token: impl Into<String>) -> Self {
        Self {
            store,
            token: token.into(),
        }
    }

    pub fn store(&self) -> &Arc<KeyStore> {
        &self.store
    }
}

impl KmsClient for InMemoryKms {
    fn wrap(&self, key_id: &str, plaintext: &[u8]) -> Result<String> {
        self.store.wrap(&self.token, key_id, plaintext)
    }

    fn unwrap(&self, key_id: &str, wrapped: &str) -> Result<Vec<u8>> {
        self.store.unwrap(&self.token, key_id, wrapped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> Arc<KeyStore> {
        let store = Arc::new(KeyStore::new("admin"));
        store.create_master_key("admin", "k1", ["alice", "bob"]).unwrap();
        store.create_master_key("admin", "k2", ["alice"]).unwrap();
        store
    }

    #[test]
    fn create_and_use() {
        let kms = InMemoryKms::new(store(), "alice");
        let wrapped = kms.wrap("k1", b"0123456789abcdef").unwrap();
        assert_eq!(kms.unwrap("k1", &wrapped).unwrap(), b"0123456789abcdef");
    }

    #[test]
    fn duplicate_and_unauthorized() {
        let store = store();
        assert!(matches!(
            store.create_master_key("admin", "k1", ["x"]),
            Err(Error::DuplicateKey(_))
        ));
        assert!(matches!(
            store.create_master_key("nope", "k3", ["x"]),
            Err(Error::Unauthorized)
        ));
        assert!(matches!(
            store.revoke_access("nope", "k1", "bob"),
            Err(Error::Unauthorized)
        ));
        assert!(store.create_master_key("admin", "bad/id", ["x"]).is_err());
    }

    #[test]
    fn acl_enforced() {
        let store = store();
        let carol = InMemoryKms::new(store.clone(), "carol");
        assert!(matches!(carol.wrap("k1", &[0; 16]), Err(Error::AccessDenied(_))));
        let bob = InMemoryKms::new(store.clone(), "bob");
        assert!(matches!(bob.wrap("k2", &[0; 16]), Err(Error::AccessDenied(_))));
        assert!(matches!(bob.wrap("missing", &[0; 16]), Err(Error::UnknownKey(_))));
    }

    #[test]
    fn revocation_is_per_token() {
        let store = store();
        let alice = InMemoryKms::new(store.clone(), "alice");
        let bob = InMemoryKms::new(store.clone(), "bob");
        let wrapped = alice.wrap("k1", &[7; 16]).unwrap();
        store.revoke_access("admin", "k1", "bob").unwrap();
        assert!(matches!(bob.unwrap("k1", &wrapped), Err(Error::AccessDenied(_))));
        assert_eq!(alice.unwrap("k1", &wrapped).unwrap(), vec![7; 16]);
        assert!(matches!(
            store.revoke_access("admin", "nope", "bob"),
            Err(Error::UnknownKey(_))
        ));
        store.grant_access("admin", "k1", "bob").unwrap();
        assert!(bob.unwrap("k1", &wrapped).is_ok());
    }

    #[test]
    fn key_separation() {
        let kms = InMemoryKms::new(store(), "alice");
        let wrapped = kms.wrap("k1", &[1; 16]).unwrap();
        assert!(matches!(kms.unwrap("k2", &wrapped), Err(Error::Integrity(_))));
    }
}
