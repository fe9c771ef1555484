//! Columnar file layout: schemas, typed column vectors, PLAIN chunk encoding
//! and the `CCF1`/`CCFE` container with per-module encryption.

mod encoding;
mod file;
mod types;

pub use encoding::{decode_chunk, encode_chunk};
pub use file::open;
pub use file::{
    read_columns, read_footer, read_row_group, write_table, write_table_file, ChunkMeta, EncryptionConfig, FileFooter,
    RowGroupData, RowGroupMeta, CREATED_BY, MAGIC_ENCRYPTED, MAGIC_PLAIN,
};
pub use types::{date_to_iso, iso_to_date, ColumnData, ColumnType, ColumnVector, Field, Table, TableSchema, Value};
