use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use super::predicate::{BoundPredicate, Predicate};
use crate::error::{Error, Result};
use crate::format::{self, ColumnVector, FileFooter, TableSchema};
use crate::keytools::KeyResolver;

/// Filtered rows of one row group, restricted to the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub columns: Vec<String>,
    pub vectors: Vec<ColumnVector>,
    pub num_rows: usize,
}

impl Batch {
    pub fn column(&self, name: &str) -> Option<&ColumnVector> {
        self.columns.iter().position(|c| c == name).map(|i| &self.vectors[i])
    }
}

struct OpenFile {
    reader: BufReader<File>,
    footer: FileFooter,
    next_group: usize,
}

/// Streaming scan over files sharing one schema, yielding a batch per row group.
///
/// Only the projected and predicate columns are read and decrypted. After the
/// first error the iterator is exhausted.
pub struct Scan<'a> {
    files: std::vec::IntoIter<PathBuf>,
    projection: Vec<String>,
    /// Projection followed by predicate-only columns.
    read_columns: Vec<String>,
    predicate: Option<Predicate>,
    bound: Option<BoundPredicate>,
    resolver: Option<&'a dyn KeyResolver>,
    schema: Option<TableSchema>,
    current: Option<OpenFile>,
    failed: bool,
}

pub fn scan<'a>(
    files: &[PathBuf],
    projection: &[&str],
    predicate: Option<&Predicate>,
    resolver: Option<&'a dyn KeyResolver>,
) -> Scan<'a> {
    let projection: Vec<String> = projection.iter().map(|s| s.to_string()).collect();
    let mut read_columns = projection.clone();
    if let Some(p) = predicate {
        for c in p.columns() {
            if !read_columns.iter().any(|r| r == c) {
                read_columns.push(c.to_string());
            }
        }
    }
    Scan {
        files: Vec::from(files).into_iter(),
        projection,
        read_columns,
        predicate: predicate.cloned(),
        bound: None,
        resolver,
        schema: None,
        current: None,
        failed: false,
    }
}

impl Scan<'_> {
    /// Schema of the scanned files, known once the first file is open.
    pub fn schema(&self) -> Option<&TableSchema> {
        self.schema.as_ref()
    }

    fn open_next(&mut self) -> Result<bool> {
        let Some(path) = self.files.next() else {
            return Ok(false);
        };
        let mut reader = format::open(&path)?;
        let footer = format::read_footer(&mut reader, self.resolver)?;
        match &self.schema {
            Some(s) if s.columns != footer.schema.columns => {
                return Err(Error::Schema(format!(
                    "{} does not share the schema of the other scanned files",
                    path.display()
                )));
            }
            Some(_) => {}
            None => {
                if let Some(p) = &self.predicate {
                    p.validate(&footer.schema)?;
                    self.bound = Some(p.bind(&self.read_columns)?);
                }
                self.schema = Some(footer.schema.clone());
            }
        }
        self.current = Some(OpenFile {
            reader,
            footer,
            next_group: 0,
        });
        Ok(true)
    }

    fn next_batch(&mut self) -> Result<Option<Batch>> {
        loop {
            if let Some(file) = &mut self.current {
                if file.next_group < file.footer.row_groups.len() {
                    let group = file.next_group;
                    file.next_group += 1;
                    let names: Vec<&str> = self.read_columns.iter().map(String::as_str).collect();
                    let data = format::read_row_group(&mut file.reader, &file.footer, group, &names, self.resolver)?;
                    let num_rows = data.num_rows as usize;
                    let mut vectors = data.columns;
                    let num_rows = match &self.bound {
                        Some(bound) => {
                            let rows = bound.matching_rows(&vectors, num_rows);
                            vectors.truncate(self.projection.len());
                            if rows.len() < num_rows {
                                vectors = vectors.iter().map(|v| v.take(&rows)).collect();
                            }
                            rows.len()
                        }
                        None => num_rows,
                    };
                    vectors.truncate(self.projection.len());
                    return Ok(Some(Batch {
                        columns: self.projection.clone(),
                        vectors,
                        num_rows,
                    }));
                }
                self.current = None;
            }
            if !self.open_next()? {
                return Ok(None);
            }
        }
    }
}

impl Iterator for Scan<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.next_batch() {
            Ok(b) => b.map(Ok),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}
