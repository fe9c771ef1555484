//! Column-pruning queries over (possibly encrypted) files.
//!
//! [`scan`] reads and decrypts only the projected and predicate columns of
//! each row group. [`misuse_query`] builds the prescription anti-join on top
//! of it, and [`persist_result`] writes the answer back as a table file.

mod misuse;
mod predicate;
mod scan;

pub use misuse::{
    misuse_query, persist_result, read_result, result_schema, EmrFiles, MisuseQueryParams, MisuseRow, ResultSet,
    RESULT_TABLE,
};
pub use predicate::{BoundPredicate, CmpOp, Predicate};
pub use scan::{scan, Batch, Scan};
