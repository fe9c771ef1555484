//! File container.
//!
//! ```text
//! plaintext: "CCF1" | chunks | footer JSON | footer_len u32le | "CCF1"
//! encrypted: "CCFE" | encrypted chunks | footer key material JSON
//!            | encrypted footer | km_len u32le | footer_len u32le | "CCFE"
//! ```
//!
//! Each encrypted column chunk and the encrypted footer is a separate AEAD
//! module with its own DEK. Column key material lives in the footer.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::hash::{Hash, Hasher};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::encoding::{decode_chunk, encode_chunk};
use super::types::{check_row_group, ColumnVector, TableSchema};
use crate::crypto::{self, Dek, ModuleAad};
use crate::error::{Error, Result};
use crate::keytools::{decode_key_material, encode_key_material, KeyManager, KeyResolver, WrapMode};

pub const MAGIC_PLAIN: &[u8; 4] = b"CCF1";
pub const MAGIC_ENCRYPTED: &[u8; 4] = b"CCFE";
pub const CREATED_BY: &str = concat!("ccf ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkMeta {
    #[serde(rename = "column")]
    pub column_name: String,
    pub ordinal: u16,
    pub row_group: u16,
    pub offset: u64,
    pub length: u64,
    pub encrypted: bool,
    /// Serialized key material JSON; present iff `encrypted`.
    #[serde(default)]
    pub key_material: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowGroupMeta {
    pub num_rows: u64,
    pub chunks: Vec<ChunkMeta>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileFooter {
    #[serde(serialize_with = "ser_file_id", deserialize_with = "de_file_id")]
    pub file_id: [u8; 16],
    pub schema: TableSchema,
    pub row_groups: Vec<RowGroupMeta>,
    pub created_by: String,
}

fn ser_file_id<S: Serializer>(id: &[u8; 16], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&BASE64.encode(id))
}

fn de_file_id<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<[u8; 16], D::Error> {
    let s = String::deserialize(d)?;
    let raw = BASE64.decode(&s).map_err(serde::de::Error::custom)?;
    raw.try_into()
        .map_err(|_| serde::de::Error::custom("file_id must be 16 bytes"))
}

impl FileFooter {
    pub fn num_rows(&self) -> u64 {
        self.row_groups.iter().map(|rg| rg.num_rows).sum()
    }

    pub fn encrypted_columns(&self) -> impl Iterator<Item = &ChunkMeta> {
        self.row_groups
            .iter()
            .flat_map(|rg| rg.chunks.iter())
            .filter(|c| c.encrypted)
    }

    fn validate(&self, body_start: u64, body_end: u64) -> Result<()> {
        self.schema
            .validate()
            .map_err(|e| Error::Decoding(format!("footer schema invalid: {e}")))?;
        let bad = |msg: String| Err(Error::Decoding(format!("footer invalid: {msg}")));
        for (g, rg) in self.row_groups.iter().enumerate() {
            if rg.chunks.len() != self.schema.columns.len() {
                return bad(format!("row group {g} has {} chunks", rg.chunks.len()));
            }
            for (i, (chunk, field)) in rg.chunks.iter().zip(&self.schema.columns).enumerate() {
                if chunk.column_name != field.name || chunk.ordinal as usize != i || chunk.row_group as usize != g {
                    return bad(format!("chunk {i} of row group {g} is out of schema order"));
                }
                if chunk.encrypted != chunk.key_material.is_some() {
                    return bad(format!(
                        "chunk '{}' has inconsistent encryption flags",
                        chunk.column_name
                    ));
                }
                let end = chunk.offset.checked_add(chunk.length);
                if chunk.offset < body_start || end.is_none_or(|e| e > body_end) {
                    return bad(format!("chunk '{}' lies outside the body region", chunk.column_name));
                }
            }
        }
        Ok(())
    }
}

/// Which master key protects which module, and how DEKs are wrapped.
///
/// Columns absent from `column_keys` use `default_column_key`, or stay
/// plaintext when that is `None`. The footer is always encrypted.
#[derive(Clone)]
pub struct EncryptionConfig {
    pub footer_key: String,
    pub column_keys: BTreeMap<String, String>,
    pub default_column_key: Option<String>,
    pub mode: WrapMode,
    pub keys: Arc<KeyManager>,
}

impl EncryptionConfig {
    pub fn key_for(&self, column: &str) -> Option<&str> {
        self.column_keys
            .get(column)
            .or(self.default_column_key.as_ref())
            .map(String::as_str)
    }
}

/// Counting writer so chunk offsets are known without seeking.
struct Positioned<W> {
    inner: W,
    pos: u64,
}

impl<W: Write> Positioned<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes)?;
        self.pos += bytes.len() as u64;
        Ok(())
    }
}

struct ContentDigest([DefaultHasher; 2]);

impl ContentDigest {
    fn new(schema: &TableSchema) -> Self {
        let mut halves = [DefaultHasher::new(), DefaultHasher::new()];
        for (i, h) in halves.iter_mut().enumerate() {
            h.write_u8(i as u8);
            schema.hash(h);
        }
        Self(halves)
    }

    fn update(&mut self, bytes: &[u8]) {
        for h in &mut self.0 {
            h.write_usize(bytes.len());
            h.write(bytes);
        }
    }

    fn finish(&self) -> [u8; 16] {
        let mut id = [0u8; 16];
        id[..8].copy_from_slice(&self.0[0].finish().to_le_bytes());
        id[8..].copy_from_slice(&self.0[1].finish().to_le_bytes());
        id
    }
}

fn u32_len(len: usize, what: &str) -> Result<u32> {
    u32::try_from(len).map_err(|_| Error::Encoding(format!("{what} of {len} bytes exceeds u32")))
}

/// Writes a table in the container format and returns the footer as written.
///
/// All DEKs are obtained before the first byte reaches `sink`, so a KMS
/// failure leaves the sink untouched.
pub fn write_table<W: Write>(
    schema: &TableSchema,
    row_groups: &[Vec<ColumnVector>],
    enc: Option<&EncryptionConfig>,
    sink: W,
) -> Result<FileFooter> {
    schema.validate()?;
    if row_groups.len() >= u16::MAX as usize {
        return Err(Error::Schema(format!("too many row groups ({})", row_groups.len())));
    }
    let row_counts = row_groups
        .iter()
        .map(|g| check_row_group(schema, g))
        .collect::<Result<Vec<_>>>()?;

    // Plaintext files have no AAD to bind, so their id is a content digest
    // and identical tables produce identical bytes.
    let mut file_id = [0u8; 16];
    if enc.is_some() {
        file_id.copy_from_slice(&crypto::generate_key(16)?);
    }
    let mut digest = ContentDigest::new(schema);

    // Key acquisition, one DEK per encrypted chunk plus one for the footer.
    let mut chunk_keys: Vec<Vec<Option<(Dek, String)>>> = Vec::with_capacity(row_groups.len());
    let mut footer_key = None;
    if let Some(cfg) = enc {
        for _ in row_groups {
            let mut keys = Vec::with_capacity(schema.columns.len());
            for field in &schema.columns {
                keys.push(match cfg.key_for(&field.name) {
                    Some(mek) => {
                        let (dek, km) = cfg.keys.create_dek(mek, false, cfg.mode)?;
                        Some((dek, encode_key_material(&km)))
                    }
                    None => None,
                });
            }
            chunk_keys.push(keys);
        }
        let (dek, km) = cfg.keys.create_dek(&cfg.footer_key, true, cfg.mode)?;
        footer_key = Some((dek, encode_key_material(&km)));
    }

    let magic = if enc.is_some() { MAGIC_ENCRYPTED } else { MAGIC_PLAIN };
    let mut out = Positioned { inner: sink, pos: 0 };
    out.put(magic)?;

    let mut metas = Vec::with_capacity(row_groups.len());
    for (g, group) in row_groups.iter().enumerate() {
        let mut chunks = Vec::with_capacity(group.len());
        for (i, vector) in group.iter().enumerate() {
            let plain = encode_chunk(vector)?;
            let key = chunk_keys.get(g).and_then(|k| k[i].as_ref());
            let (blob, key_material) = match key {
                Some((dek, km)) => {
                    let aad = ModuleAad::column_chunk(file_id, g as u16, i as u16);
                    (crypto::encrypt_module(dek, &plain, &aad)?.to_bytes(), Some(km.clone()))
                }
                None => (plain, None),
            };
            let offset = out.pos;
            digest.update(&blob);
            out.put(&blob)?;
            chunks.push(ChunkMeta {
                column_name: schema.columns[i].name.clone(),
                ordinal: i as u16,
                row_group: g as u16,
                offset,
                length: blob.len() as u64,
                encrypted: key_material.is_some(),
                key_material,
            });
        }
        metas.push(RowGroupMeta {
            num_rows: row_counts[g] as u64,
            chunks,
        });
    }

    if enc.is_none() {
        file_id = digest.finish();
    }
    let footer = FileFooter {
        file_id,
        schema: schema.clone(),
        row_groups: metas,
        created_by: CREATED_BY.to_string(),
    };
    let footer_json = serde_json::to_vec(&footer).map_err(|e| Error::Encoding(e.to_string()))?;

    match footer_key {
        None => {
            out.put(&footer_json)?;
            out.put(&u32_len(footer_json.len(), "footer")?.to_le_bytes())?;
        }
        Some((dek, km)) => {
            let sealed = crypto::encrypt_module(&dek, &footer_json, &ModuleAad::footer())?.to_bytes();
            out.put(km.as_bytes())?;
            out.put(&sealed)?;
            out.put(&u32_len(km.len(), "footer key material")?.to_le_bytes())?;
            out.put(&u32_len(sealed.len(), "footer")?.to_le_bytes())?;
        }
    }
    out.put(magic)?;
    out.inner.flush()?;
    Ok(footer)
}

/// Writes to `path` through a temporary file in the same directory, so a
/// failed write never leaves a partial file behind.
pub fn write_table_file(
    schema: &TableSchema,
    row_groups: &[Vec<ColumnVector>],
    enc: Option<&EncryptionConfig>,
    path: &Path,
) -> Result<FileFooter> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    let footer = write_table(schema, row_groups, enc, BufWriter::new(tmp.as_file()))?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(footer)
}

fn read_at<R: Read + Seek>(source: &mut R, offset: u64, len: u64) -> Result<Vec<u8>> {
    source.seek(SeekFrom::Start(offset))?;
    let mut buf = vec![0u8; len as usize];
    source.read_exact(&mut buf)?;
    Ok(buf)
}

fn le_u32(bytes: &[u8]) -> u64 {
    u32::from_le_bytes(bytes.try_into().expect("4 bytes")) as u64
}

fn parse_footer(json: &[u8]) -> Result<FileFooter> {
    serde_json::from_slice(json).map_err(|e| Error::Decoding(format!("footer JSON: {e}")))
}

fn require_resolver(resolver: Option<&dyn KeyResolver>) -> Result<&dyn KeyResolver> {
    resolver.ok_or_else(|| Error::Config("encrypted file requires a key resolver".into()))
}

/// Parses the trailer and footer, decrypting it when the file is encrypted.
pub fn read_footer<R: Read + Seek>(source: &mut R, resolver: Option<&dyn KeyResolver>) -> Result<FileFooter> {
    let file_len = source.seek(SeekFrom::End(0))?;
    if file_len < 12 {
        return Err(Error::NotAColumnarFile(format!(
            "file of {file_len} bytes is too short"
        )));
    }
    let head = read_at(source, 0, 4)?;
    let tail = read_at(source, file_len - 4, 4)?;
    if head != tail || (head != MAGIC_PLAIN && head != MAGIC_ENCRYPTED) {
        return Err(Error::NotAColumnarFile("bad magic".into()));
    }

    if head == MAGIC_PLAIN {
        let footer_len = le_u32(&read_at(source, file_len - 8, 4)?);
        let footer_start = (file_len - 8)
            .checked_sub(footer_len)
            .filter(|&s| s >= 4)
            .ok_or_else(|| Error::NotAColumnarFile("footer length out of range".into()))?;
        let footer = parse_footer(&read_at(source, footer_start, footer_len)?)?;
        footer.validate(4, footer_start)?;
        return Ok(footer);
    }

    if file_len < 16 {
        return Err(Error::NotAColumnarFile("encrypted trailer truncated".into()));
    }
    let lens = read_at(source, file_len - 12, 8)?;
    let (km_len, footer_len) = (le_u32(&lens[..4]), le_u32(&lens[4..]));
    let footer_start = (file_len - 12)
        .checked_sub(footer_len)
        .ok_or_else(|| Error::NotAColumnarFile("footer length out of range".into()))?;
    let km_start = footer_start
        .checked_sub(km_len)
        .filter(|&s| s >= 4)
        .ok_or_else(|| Error::NotAColumnarFile("key material length out of range".into()))?;

    let km_json = read_at(source, km_start, km_len)?;
    let km_str = std::str::from_utf8(&km_json)
        .map_err(|_| Error::MalformedKeyMaterial("footer key material is not UTF-8".into()))?;
    let km = decode_key_material(km_str)?;
    if !km.is_footer_key {
        return Err(Error::MalformedKeyMaterial(
            "footer key material not marked as footer key".into(),
        ));
    }
    let dek = require_resolver(resolver)?.resolve_dek(&km)?;
    let sealed = read_at(source, footer_start, footer_len)?;
    let plain = crypto::decrypt_module_bytes(&dek, &sealed, &ModuleAad::footer())?;
    let footer = parse_footer(&plain)?;
    footer.validate(4, km_start)?;
    Ok(footer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowGroupData {
    pub num_rows: u64,
    /// One vector per projected column, in projection order.
    pub columns: Vec<ColumnVector>,
}

fn resolve_projection(footer: &FileFooter, projection: &[&str]) -> Result<Vec<usize>> {
    let mut seen = HashSet::new();
    projection
        .iter()
        .map(|name| {
            if !seen.insert(*name) {
                return Err(Error::Projection(format!("column '{name}' projected twice")));
            }
            footer
                .schema
                .index_of(name)
                .ok_or_else(|| Error::Projection(format!("unknown column '{name}'")))
        })
        .collect()
}

fn read_chunk<R: Read + Seek>(
    source: &mut R,
    footer: &FileFooter,
    group: usize,
    ordinal: usize,
    resolver: Option<&dyn KeyResolver>,
) -> Result<ColumnVector> {
    let rg = &footer.row_groups[group];
    let chunk = &rg.chunks[ordinal];
    let raw = read_at(source, chunk.offset, chunk.length)?;
    let plain = match &chunk.key_material {
        Some(km_json) => {
            let km = decode_key_material(km_json)?;
            let dek = require_resolver(resolver)?.resolve_dek(&km)?;
            let aad = ModuleAad::column_chunk(footer.file_id, group as u16, ordinal as u16);
            crypto::decrypt_module_bytes(&dek, &raw, &aad)?
        }
        None => raw,
    };
    let num_rows = usize::try_from(rg.num_rows).map_err(|_| Error::Decoding("row count overflow".into()))?;
    decode_chunk(&plain, footer.schema.columns[ordinal].column_type, num_rows)
}

/// Reads and decrypts the projected chunks of one row group, and nothing else.
pub fn read_row_group<R: Read + Seek>(
    source: &mut R,
    footer: &FileFooter,
    group: usize,
    projection: &[&str],
    resolver: Option<&dyn KeyResolver>,
) -> Result<RowGroupData> {
    let ordinals = resolve_projection(footer, projection)?;
    let rg = footer
        .row_groups
        .get(group)
        .ok_or_else(|| Error::Projection(format!("row group {group} does not exist")))?;
    let columns = ordinals
        .iter()
        .map(|&i| read_chunk(source, footer, group, i, resolver))
        .collect::<Result<Vec<_>>>()?;
    Ok(RowGroupData {
        num_rows: rg.num_rows,
        columns,
    })
}

/// Reads the projected columns of every row group.
pub fn read_columns<R: Read + Seek>(
    source: &mut R,
    footer: &FileFooter,
    projection: &[&str],
    resolver: Option<&dyn KeyResolver>,
) -> Result<Vec<RowGroupData>> {
    resolve_projection(footer, projection)?;
    (0..footer.row_groups.len())
        .map(|g| read_row_group(source, footer, g, projection, resolver))
        .collect()
}

/// Opens a file for reading with [`read_footer`] / [`read_columns`].
pub fn open(path: &Path) -> Result<std::io::BufReader<File>> {
    Ok(std::io::BufReader::new(File::open(path)?))
}
