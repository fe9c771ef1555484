//! AEAD protection of file modules and raw key wrapping.
//!
//! All modules use AES-128-GCM with a random 96-bit nonce and a 128-bit tag.
//! A serialized [`EncryptedBlob`] is `nonce (12) || ciphertext || tag (16)`,
//! which is part of the on-disk format.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::rngs::OsRng;
use rand::RngCore;
use ring::aead::{Aad, LessSafeKey, Nonce, UnboundKey, AES_128_GCM};
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::error::{Error, Result};

pub const KEY_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const AAD_LEN: usize = 21;

/// Length of a base64-decoded wrapped 16-byte key.
pub const WRAPPED_KEY_LEN: usize = NONCE_LEN + KEY_LEN + TAG_LEN;

/// A 128-bit data encryption key. Wiped from memory on drop.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct Dek([u8; KEY_LEN]);

impl Dek {
    pub fn generate() -> Result<Self> {
        let mut bytes = [0u8; KEY_LEN];
        fill_random(&mut bytes)?;
        Ok(Self(bytes))
    }

    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; KEY_LEN] = bytes
            .try_into()
            .map_err(|_| Error::Crypto(format!("key must be {KEY_LEN} bytes, got {}", bytes.len())))?;
        Ok(Self(arr))
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for Dek {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Dek(..)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ModuleType {
    Footer = 0,
    ColumnChunk = 1,
}

/// Additional authenticated data binding a module to its position in a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModuleAad {
    pub file_id: [u8; 16],
    pub module_type: ModuleType,
    pub row_group: u16,
    pub column_ordinal: u16,
}

impl ModuleAad {
    /// The footer is encrypted before readers can learn the file id, so its
    /// AAD carries an all-zero file id; the footer DEK is unique per file.
    pub fn footer() -> Self {
        Self {
            file_id: [0; 16],
            module_type: ModuleType::Footer,
            row_group: 0xFFFF,
            column_ordinal: 0xFFFF,
        }
    }

    pub fn column_chunk(file_id: [u8; 16], row_group: u16, column_ordinal: u16) -> Self {
        Self {
            file_id,
            module_type: ModuleType::ColumnChunk,
            row_group,
            column_ordinal,
        }
    }

    pub fn to_bytes(&self) -> [u8; AAD_LEN] {
        let mut out = [0u8; AAD_LEN];
        out[..16].copy_from_slice(&self.file_id);
        out[16] = self.module_type as u8;
        out[17..19].copy_from_slice(&self.row_group.to_le_bytes());
        out[19..21].copy_from_slice(&self.column_ordinal.to_le_bytes());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedBlob {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl EncryptedBlob {
    pub fn serialized_len(&self) -> usize {
        NONCE_LEN + self.ciphertext.len() + TAG_LEN
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < NONCE_LEN + TAG_LEN {
            return Err(Error::MalformedBlob(format!(
                "blob of {} bytes is shorter than nonce + tag ({})",
                bytes.len(),
                NONCE_LEN + TAG_LEN
            )));
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (ciphertext, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(Self {
            nonce: nonce.try_into().expect("split length"),
            ciphertext: ciphertext.to_vec(),
            tag: tag.try_into().expect("split length"),
        })
    }
}

fn fill_random(buf: &mut [u8]) -> Result<()> {
    OsRng
        .try_fill_bytes(buf)
        .map_err(|e| Error::Crypto(format!("random number generator failed: {e}")))
}

/// Returns `len_bytes` bytes from the OS CSPRNG. Only 128-bit keys are supported.
pub fn generate_key(len_bytes: usize) -> Result<Vec<u8>> {
    if len_bytes != KEY_LEN {
        return Err(Error::Crypto(format!(
            "unsupported key length {len_bytes}, only {KEY_LEN} bytes allowed"
        )));
    }
    let mut key = vec![0u8; len_bytes];
    fill_random(&mut key)?;
    Ok(key)
}

fn cipher(key: &[u8]) -> Result<LessSafeKey> {
    if key.len() != KEY_LEN {
        return Err(Error::Crypto(format!("key must be {KEY_LEN} bytes, got {}", key.len())));
    }
    let key = UnboundKey::new(&AES_128_GCM, key).map_err(|_| Error::Crypto("invalid AES-128 key".into()))?;
    Ok(LessSafeKey::new(key))
}

/// Encrypts `plaintext` with a fresh random nonce, authenticating `aad`.
pub fn seal(key: &[u8], plaintext: &[u8], aad: &[u8]) -> Result<EncryptedBlob> {
    let cipher = cipher(key)?;
    let mut nonce = [0u8; NONCE_LEN];
    fill_random(&mut nonce)?;
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .seal_in_place_separate_tag(Nonce::assume_unique_for_key(nonce), Aad::from(aad), &mut buf)
        .map_err(|_| Error::Crypto("AES-GCM encryption failed".into()))?;
    Ok(EncryptedBlob {
        nonce,
        ciphertext: buf,
        tag: tag.as_ref().try_into().expect("16-byte tag"),
    })
}

fn open_parts(key: &[u8], nonce: [u8; NONCE_LEN], ciphertext: &[u8], tag: &[u8], aad: &[u8]) -> Result<Vec<u8>> {
    let cipher = cipher(key)?;
    let mut buf = Vec::with_capacity(ciphertext.len() + TAG_LEN);
    buf.extend_from_slice(ciphertext);
    buf.extend_from_slice(tag);
    let plain_len = cipher
        .open_in_place(Nonce::assume_unique_for_key(nonce), Aad::from(aad), &mut buf)
        .map_err(|_| Error::Integrity("AEAD authentication failed".into()))?
        .len();
    buf.truncate(plain_len);
    Ok(buf)
}

pub fn open(key: &[u8], blob: &EncryptedBlob, aad: &[u8]) -> Result<Vec<u8>> {
    open_parts(key, blob.nonce, &blob.ciphertext, &blob.tag, aad)
}

pub fn encrypt_module(key: &Dek, plaintext: &[u8], aad: &ModuleAad) -> Result<EncryptedBlob> {
    seal(key.as_bytes(), plaintext, &aad.to_bytes())
}

pub fn decrypt_module(key: &Dek, blob: &EncryptedBlob, aad: &ModuleAad) -> Result<Vec<u8>> {
    open(key.as_bytes(), blob, &aad.to_bytes())
}

/// Parses a serialized blob and decrypts it.
pub fn decrypt_module_bytes(key: &Dek, bytes: &[u8], aad: &ModuleAad) -> Result<Vec<u8>> {
    if bytes.len() < NONCE_LEN + TAG_LEN {
        // Same error as parsing the blob.
        EncryptedBlob::from_bytes(bytes)?;
    }
    let (nonce, rest) = bytes.split_at(NONCE_LEN);
    let (ciphertext, tag) = rest.split_at(rest.len() - TAG_LEN);
    open_parts(
        key.as_bytes(),
        nonce.try_into().expect("split length"),
        ciphertext,
        tag,
        &aad.to_bytes(),
    )
}

/// Wraps a 16-byte key under another with empty AAD; output is base64.
pub fn wrap_key(wrapping_key: &[u8], key_to_wrap: &[u8]) -> Result<String> {
    if key_to_wrap.len() != KEY_LEN {
        return Err(Error::Crypto(format!(
            "key to wrap must be {KEY_LEN} bytes, got {}",
            key_to_wrap.len()
        )));
    }
    let blob = seal(wrapping_key, key_to_wrap, &[])?;
    Ok(BASE64.encode(blob.to_bytes()))
}

pub fn unwrap_key(wrapping_key: &[u8], wrapped: &str) -> Result<[u8; KEY_LEN]> {
    let raw = BASE64
        .decode(wrapped)
        .map_err(|e| Error::MalformedBlob(format!("wrapped key is not base64: {e}")))?;
    if raw.len() != WRAPPED_KEY_LEN {
        return Err(Error::MalformedBlob(format!(
            "wrapped key must decode to {WRAPPED_KEY_LEN} bytes, got {}",
            raw.len()
        )));
    }
    let plain = open(wrapping_key, &EncryptedBlob::from_bytes(&raw)?, &[])?;
    Ok(plain.try_into().expect("length checked above"))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn aad() -> ModuleAad {
        ModuleAad::column_chunk([7; 16], 2, 5)
    }

    #[test]
    fn aad_layout() {
        let bytes = ModuleAad::column_chunk([0xAB; 16], 0x0102, 0x0304).to_bytes();
        assert_eq!(&bytes[..16], &[0xAB; 16]);
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[17..], &[0x02, 0x01, 0x04, 0x03]);
        let footer = ModuleAad::footer().to_bytes();
        assert_eq!(footer[16], 0);
        assert_eq!(&footer[19..], &[0xFF, 0xFF]);
    }

    #[test]
    fn generate_key_contract() {
        assert_eq!(generate_key(16).unwrap().len(), 16);
        assert_ne!(generate_key(16).unwrap(), generate_key(16).unwrap());
        assert!(matches!(generate_key(32), Err(Error::Crypto(_))));
        let keys: HashSet<Vec<u8>> = (0..10_000).map(|_| generate_key(16).unwrap()).collect();
        assert_eq!(keys.len(), 10_000);
    }

    #[test]
    fn round_trip_sizes() {
        let key = Dek::generate().unwrap();
        for len in [0usize, 1, 16, 4096, 1 << 20] {
            let pt: Vec<u8> = (0..len).map(|i| (i * 31 % 251) as u8).collect();
            let blob = encrypt_module(&key, &pt, &aad()).unwrap();
            assert_eq!(blob.ciphertext.len(), len);
            assert_eq!(decrypt_module(&key, &blob, &aad()).unwrap(), pt);
            let ser = blob.to_bytes();
            assert_eq!(ser.len(), len + 28);
            assert_eq!(decrypt_module_bytes(&key, &ser, &aad()).unwrap(), pt);
        }
    }

    #[test]
    fn wrong_aad_or_key_fails() {
        let key = Dek::generate().unwrap();
        let blob = encrypt_module(&key, b"payload", &aad()).unwrap();
        let mut shifted = aad();
        shifted.column_ordinal += 1;
        assert!(matches!(
            decrypt_module(&key, &blob, &shifted),
            Err(Error::Integrity(_))
        ));
        let other = Dek::generate().unwrap();
        assert!(matches!(
            decrypt_module(&other, &blob, &aad()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn every_byte_flip_is_rejected() {
        let key = Dek::generate().unwrap();
        // 36 bytes of plaintext -> 64-byte serialized blob.
        let bytes = encrypt_module(&key, &[0x5A; 36], &aad()).unwrap().to_bytes();
        assert_eq!(bytes.len(), 64);
        for pos in 0..bytes.len() {
            for mask in [0x01u8, 0x80, 0xFF] {
                let mut tampered = bytes.clone();
                tampered[pos] ^= mask;
                assert!(
                    matches!(decrypt_module_bytes(&key, &tampered, &aad()), Err(Error::Integrity(_))),
                    "flip at {pos} accepted"
                );
            }
        }
    }

    #[test]
    fn short_blob_is_malformed() {
        let key = Dek::generate().unwrap();
        assert!(matches!(
            decrypt_module_bytes(&key, &[0u8; 27], &aad()),
            Err(Error::MalformedBlob(_))
        ));
        let empty = encrypt_module(&key, &[], &aad()).unwrap().to_bytes();
        assert_eq!(empty.len(), 28);
        assert!(decrypt_module_bytes(&key, &empty, &aad()).unwrap().is_empty());
    }

    #[test]
    fn nonces_never_repeat() {
        let key = Dek::generate().unwrap();
        let nonces: HashSet<[u8; 12]> = (0..5000)
            .map(|_| encrypt_module(&key, b"x", &aad()).unwrap().nonce)
            .collect();
        assert_eq!(nonces.len(), 5000);
    }

    #[test]
    fn key_wrapping() {
        let kek = generate_key(16).unwrap();
        let dek = generate_key(16).unwrap();
        let wrapped = wrap_key(&kek, &dek).unwrap();
        assert_eq!(BASE64.decode(&wrapped).unwrap().len(), 44);
        assert_eq!(unwrap_key(&kek, &wrapped).unwrap().to_vec(), dek);
        let other = generate_key(16).unwrap();
        assert!(matches!(unwrap_key(&other, &wrapped), Err(Error::Integrity(_))));
        assert!(matches!(unwrap_key(&kek, "not base64!"), Err(Error::MalformedBlob(_))));
    }
}
