use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ColumnType {
    Int64,
    Double,
    String,
    Bool,
    /// Days since the Unix epoch.
    Date,
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ColumnType::Int64 => "INT64",
            ColumnType::Double => "DOUBLE",
            ColumnType::String => "STRING",
            ColumnType::Bool => "BOOL",
            ColumnType::Date => "DATE",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    #[serde(rename = "type")]
    pub column_type: ColumnType,
    pub nullable: bool,
}

impl Field {
    pub fn new(name: impl Into<String>, column_type: ColumnType, nullable: bool) -> Self {
        Self {
            name: name.into(),
            column_type,
            nullable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TableSchema {
    pub table_name: String,
    pub columns: Vec<Field>,
}

impl TableSchema {
    pub fn new(table_name: impl Into<String>, columns: Vec<Field>) -> Result<Self> {
        let schema = Self {
            table_name: table_name.into(),
            columns,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Schema(format!("table '{}' has no columns", self.table_name)));
        }
        if self.columns.len() >= u16::MAX as usize {
            return Err(Error::Schema("too many columns".into()));
        }
        let mut seen = HashSet::new();
        for field in &self.columns {
            if field.name.is_empty() || field.name.len() > 255 {
                return Err(Error::Schema(format!(
                    "column name must be 1..=255 bytes, got {:?}",
                    field.name
                )));
            }
            if !seen.insert(field.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column '{}'", field.name)));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|f| f.name == name)
    }

    pub fn field(&self, name: &str) -> Option<&Field> {
        self.columns.iter().find(|f| f.name == name)
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|f| f.name.as_str())
    }
}

/// A single cell value. Used for literals and row-wise access; bulk data
/// lives in [`ColumnData`].
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Int64(i64),
    Double(f64),
    String(String),
    Bool(bool),
    Date(i64),
}

impl Value {
    pub fn column_type(&self) -> Option<ColumnType> {
        match self {
            Value::Null => None,
            Value::Int64(_) => Some(ColumnType::Int64),
            Value::Double(_) => Some(ColumnType::Double),
            Value::String(_) => Some(ColumnType::String),
            Value::Bool(_) => Some(ColumnType::Bool),
            Value::Date(_) => Some(ColumnType::Date),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::String(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::String(s)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int64(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Double(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

#[derive(Debug, Clone)]
pub enum ColumnData {
    Int64(Vec<i64>),
    Double(Vec<f64>),
    String(Vec<String>),
    Bool(Vec<bool>),
    Date(Vec<i64>),
}

impl ColumnData {
    pub fn empty(column_type: ColumnType) -> Self {
        Self::with_capacity(column_type, 0)
    }

    pub fn with_capacity(column_type: ColumnType, cap: usize) -> Self {
        match column_type {
            ColumnType::Int64 => ColumnData::Int64(Vec::with_capacity(cap)),
            ColumnType::Double => ColumnData::Double(Vec::with_capacity(cap)),
            ColumnType::String => ColumnData::String(Vec::with_capacity(cap)),
            ColumnType::Bool => ColumnData::Bool(Vec::with_capacity(cap)),
            ColumnType::Date => ColumnData::Date(Vec::with_capacity(cap)),
        }
    }

    pub fn column_type(&self) -> ColumnType {
        match self {
            ColumnData::Int64(_) => ColumnType::Int64,
            ColumnData::Double(_) => ColumnType::Double,
            ColumnData::String(_) => ColumnType::String,
            ColumnData::Bool(_) => ColumnType::Bool,
            ColumnData::Date(_) => ColumnType::Date,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ColumnData::Int64(v) | ColumnData::Date(v) => v.len(),
            ColumnData::Double(v) => v.len(),
            ColumnData::String(v) => v.len(),
            ColumnData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends `value`, or the type's zero value when `value` is null.
    fn push(&mut self, value: &Value) -> Result<()> {
        match (self, value) {
            (ColumnData::Int64(v), Value::Int64(x)) | (ColumnData::Date(v), Value::Date(x)) => v.push(*x),
            (ColumnData::Double(v), Value::Double(x)) => v.push(*x),
            (ColumnData::String(v), Value::String(x)) => v.push(x.clone()),
            (ColumnData::Bool(v), Value::Bool(x)) => v.push(*x),
            (data, Value::Null) => data.push_zero(),
            (data, other) => {
                return Err(Error::Schema(format!(
                    "value {other:?} does not match column type {}",
                    data.column_type()
                )))
            }
        }
        Ok(())
    }

    fn push_zero(&mut self) {
        match self {
            ColumnData::Int64(v) | ColumnData::Date(v) => v.push(0),
            ColumnData::Double(v) => v.push(0.0),
            ColumnData::String(v) => v.push(String::new()),
            ColumnData::Bool(v) => v.push(false),
        }
    }
}

/// Typed column values plus a validity bitmap (`true` = present).
///
/// Null slots hold the type's zero value; equality ignores them and compares
/// doubles bitwise.
#[derive(Debug, Clone)]
pub struct ColumnVector {
    data: ColumnData,
    validity: Vec<bool>,
}

impl ColumnVector {
    pub fn new(data: ColumnData, validity: Vec<bool>) -> Result<Self> {
        if data.len() != validity.len() {
            return Err(Error::Schema(format!(
                "column has {} values but {} validity bits",
                data.len(),
                validity.len()
            )));
        }
        Ok(Self { data, validity })
    }

    /// A vector with no nulls.
    pub fn dense(data: ColumnData) -> Self {
        let validity = vec![true; data.len()];
        Self { data, validity }
    }

    pub fn empty(column_type: ColumnType) -> Self {
        Self::dense(ColumnData::empty(column_type))
    }

    pub fn from_values(column_type: ColumnType, values: &[Value]) -> Result<Self> {
        let mut data = ColumnData::with_capacity(column_type, values.len());
        let mut validity = Vec::with_capacity(values.len());
        for value in values {
            data.push(value)?;
            validity.push(!matches!(value, Value::Null));
        }
        Ok(Self { data, validity })
    }

    pub fn int64(values: Vec<Option<i64>>) -> Self {
        let validity = values.iter().map(Option::is_some).collect();
        Self {
            data: ColumnData::Int64(values.into_iter().map(Option::unwrap_or_default).collect()),
            validity,
        }
    }

    pub fn date(values: Vec<Option<i64>>) -> Self {
        let validity = values.iter().map(Option::is_some).collect();
        Self {
            data: ColumnData::Date(values.into_iter().map(Option::unwrap_or_default).collect()),
            validity,
        }
    }

    pub fn double(values: Vec<Option<f64>>) -> Self {
        let validity = values.iter().map(Option::is_some).collect();
        Self {
            data: ColumnData::Double(values.into_iter().map(Option::unwrap_or_default).collect()),
            validity,
        }
    }

    pub fn bool(values: Vec<Option<bool>>) -> Self {
        let validity = values.iter().map(Option::is_some).collect();
        Self {
            data: ColumnData::Bool(values.into_iter().map(Option::unwrap_or_default).collect()),
            validity,
        }
    }

    pub fn string<S: Into<String>>(values: Vec<Option<S>>) -> Self {
        let validity = values.iter().map(Option::is_some).collect();
        Self {
            data: ColumnData::String(
                values
                    .into_iter()
                    .map(|v| v.map(Into::into).unwrap_or_default())
                    .collect(),
            ),
            validity,
        }
    }

    pub fn column_type(&self) -> ColumnType {
        self.data.column_type()
    }

    pub fn len(&self) -> usize {
        self.validity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.validity.is_empty()
    }

    pub fn data(&self) -> &ColumnData {
        &self.data
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    pub fn is_valid(&self, row: usize) -> bool {
        self.validity[row]
    }

    pub fn null_count(&self) -> usize {
        self.validity.iter().filter(|v| !**v).count()
    }

    pub fn value(&self, row: usize) -> Value {
        if !self.validity[row] {
            return Value::Null;
        }
        match &self.data {
            ColumnData::Int64(v) => Value::Int64(v[row]),
            ColumnData::Double(v) => Value::Double(v[row]),
            ColumnData::String(v) => Value::String(v[row].clone()),
            ColumnData::Bool(v) => Value::Bool(v[row]),
            ColumnData::Date(v) => Value::Date(v[row]),
        }
    }

    pub fn str_at(&self, row: usize) -> Option<&str> {
        match &self.data {
            ColumnData::String(v) if self.validity[row] => Some(v[row].as_str()),
            _ => None,
        }
    }

    /// Integer view for INT64 and DATE columns.
    pub fn i64_at(&self, row: usize) -> Option<i64> {
        match &self.data {
            ColumnData::Int64(v) | ColumnData::Date(v) if self.validity[row] => Some(v[row]),
            _ => None,
        }
    }

    /// Compares the cell at `row` with a literal of the same type. `None` when
    /// the cell is null, the types differ, or a NaN is involved.
    pub fn compare_at(&self, row: usize, literal: &Value) -> Option<Ordering> {
        if !self.validity[row] {
            return None;
        }
        match (&self.data, literal) {
            (ColumnData::Int64(v), Value::Int64(x)) | (ColumnData::Date(v), Value::Date(x)) => Some(v[row].cmp(x)),
            (ColumnData::Double(v), Value::Double(x)) => v[row].partial_cmp(x),
            (ColumnData::String(v), Value::String(x)) => Some(v[row].as_str().cmp(x.as_str())),
            (ColumnData::Bool(v), Value::Bool(x)) => Some(v[row].cmp(x)),
            _ => None,
        }
    }

    /// Gathers the given rows into a new vector.
    pub fn take(&self, rows: &[usize]) -> ColumnVector {
        let validity = rows.iter().map(|&r| self.validity[r]).collect();
        let data = match &self.data {
            ColumnData::Int64(v) => ColumnData::Int64(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Double(v) => ColumnData::Double(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::String(v) => ColumnData::String(rows.iter().map(|&r| v[r].clone()).collect()),
            ColumnData::Bool(v) => ColumnData::Bool(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Date(v) => ColumnData::Date(rows.iter().map(|&r| v[r]).collect()),
        };
        ColumnVector { data, validity }
    }

    /// Contiguous sub-range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> ColumnVector {
        let rows: Vec<usize> = (start..end).collect();
        self.take(&rows)
    }

    /// Appends `other`, which must have the same type.
    pub fn extend(&mut self, other: &ColumnVector) -> Result<()> {
        match (&mut self.data, &other.data) {
            (ColumnData::Int64(a), ColumnData::Int64(b)) | (ColumnData::Date(a), ColumnData::Date(b)) => {
                a.extend_from_slice(b)
            }
            (ColumnData::Double(a), ColumnData::Double(b)) => a.extend_from_slice(b),
            (ColumnData::String(a), ColumnData::String(b)) => a.extend_from_slice(b),
            (ColumnData::Bool(a), ColumnData::Bool(b)) => a.extend_from_slice(b),
            _ => {
                return Err(Error::Schema(format!(
                    "cannot append {} column to {} column",
                    other.column_type(),
                    self.column_type()
                )))
            }
        }
        self.validity.extend_from_slice(&other.validity);
        Ok(())
    }
}

impl PartialEq for ColumnVector {
    fn eq(&self, other: &Self) -> bool {
        if self.column_type() != other.column_type() || self.validity != other.validity {
            return false;
        }
        let valid = |i: usize| self.validity[i];
        match (&self.data, &other.data) {
            (ColumnData::Int64(a), ColumnData::Int64(b)) | (ColumnData::Date(a), ColumnData::Date(b)) => {
                (0..a.len()).all(|i| !valid(i) || a[i] == b[i])
            }
            (ColumnData::Double(a), ColumnData::Double(b)) => {
                (0..a.len()).all(|i| !valid(i) || a[i].to_bits() == b[i].to_bits())
            }
            (ColumnData::String(a), ColumnData::String(b)) => (0..a.len()).all(|i| !valid(i) || a[i] == b[i]),
            (ColumnData::Bool(a), ColumnData::Bool(b)) => (0..a.len()).all(|i| !valid(i) || a[i] == b[i]),
            _ => false,
        }
    }
}

/// An in-memory table: one vector per schema column, equal lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: TableSchema,
    pub columns: Vec<ColumnVector>,
}

impl Table {
    pub fn new(schema: TableSchema, columns: Vec<ColumnVector>) -> Result<Self> {
        schema.validate()?;
        check_row_group(&schema, &columns)?;
        Ok(Self { schema, columns })
    }

    pub fn empty(schema: TableSchema) -> Self {
        let columns = schema
            .columns
            .iter()
            .map(|f| ColumnVector::empty(f.column_type))
            .collect();
        Self { schema, columns }
    }

    pub fn num_rows(&self) -> usize {
        self.columns.first().map_or(0, ColumnVector::len)
    }

    pub fn column(&self, name: &str) -> Option<&ColumnVector> {
        self.schema.index_of(name).map(|i| &self.columns[i])
    }

    pub fn take(&self, rows: &[usize]) -> Table {
        Table {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.take(rows)).collect(),
        }
    }

    /// Splits rows into exactly `n` contiguous row groups whose sizes differ
    /// by at most one. Row groups may be empty when `n` exceeds the row count.
    pub fn split_row_groups(&self, n: usize) -> Vec<Vec<ColumnVector>> {
        let rows = self.num_rows();
        (0..n)
            .map(|g| {
                let start = rows * g / n;
                let end = rows * (g + 1) / n;
                self.columns.iter().map(|c| c.slice(start, end)).collect()
            })
            .collect()
    }

    /// Concatenates row groups back into a single table.
    pub fn from_row_groups(schema: TableSchema, row_groups: &[Vec<ColumnVector>]) -> Result<Table> {
        let mut table = Table::empty(schema);
        for group in row_groups {
            check_row_group(&table.schema, group)?;
            for (dst, src) in table.columns.iter_mut().zip(group) {
                dst.extend(src)?;
            }
        }
        Ok(table)
    }
}

/// Validates one row group against the schema and returns its row count.
pub(crate) fn check_row_group(schema: &TableSchema, group: &[ColumnVector]) -> Result<usize> {
    if group.len() != schema.columns.len() {
        return Err(Error::Schema(format!(
            "row group has {} columns, schema '{}' has {}",
            group.len(),
            schema.table_name,
            schema.columns.len()
        )));
    }
    let rows = group.first().map_or(0, ColumnVector::len);
    for (field, vector) in schema.columns.iter().zip(group) {
        if vector.column_type() != field.column_type {
            return Err(Error::Schema(format!(
                "column '{}' declared {} but vector is {}",
                field.name,
                field.column_type,
                vector.column_type()
            )));
        }
        if vector.len() != rows {
            return Err(Error::Schema(format!(
                "ragged row group: column '{}' has {} rows, expected {rows}",
                field.name,
                vector.len()
            )));
        }
        if !field.nullable && vector.null_count() > 0 {
            return Err(Error::Schema(format!("column '{}' is not nullable", field.name)));
        }
    }
    Ok(rows)
}


/// Formats days-since-epoch as `YYYY-MM-DD` (proleptic Gregorian).
pub fn date_to_iso(days: i64) -> String {
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = doy - (153 * mp + 2) / 5 + 1;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    let year = yoe + era * 400 + i64::from(month <= 2);
    format!("{year:04}-{month:02}-{day:02}")
}

/// Parses `YYYY-MM-DD` into days since the epoch.
pub fn iso_to_date(s: &str) -> Result<i64> {
    let bad = || Error::Decoding(format!("invalid date {s:?}, expected YYYY-MM-DD"));
    let mut parts = s.splitn(3, '-');
    let mut next = || parts.next().and_then(|p| p.parse::<i64>().ok()).ok_or_else(bad);
    let (year, month, day) = (next()?, next()?, next()?);
    if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return Err(bad());
    }
    let y = if month <= 2 { year - 1 } else { year };
    let era = y.div_euclid(400);
    let yoe = y.rem_euclid(400);
    let mp = (month + 9) % 12;
    let doy = (153 * mp + 2) / 5 + day - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    let days = era * 146_097 + doe - 719_468;
    if date_to_iso(days) != format!("{year:04}-{month:02}-{day:02}") {
        return Err(bad());
    }
    Ok(days)
}
