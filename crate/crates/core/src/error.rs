use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// AEAD authentication failures surface as [`Error::Integrity`] whether the
/// cause was tampering or a wrong key; the two cannot be told apart.
#[derive(Debug, Error)]
pub enum Error {
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("decoding error: {0}")]
    Decoding(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("not a columnar file: {0}")]
    NotAColumnarFile(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("malformed encrypted blob: {0}")]
    MalformedBlob(String),
    #[error("malformed key material: {0}")]
    MalformedKeyMaterial(String),
    #[error("crypto error: {0}")]
    Crypto(String),
    #[error("access denied to master key '{0}'")]
    AccessDenied(String),
    #[error("unknown master key '{0}'")]
    UnknownKey(String),
    #[error("master key '{0}' already exists")]
    DuplicateKey(String),
    #[error("unauthorized admin request")]
    Unauthorized,
    #[error("KMS unavailable: {0}")]
    KmsUnavailable(String),
    #[error("projection error: {0}")]
    Projection(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
