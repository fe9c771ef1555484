use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::format::{ColumnVector, TableSchema, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn holds(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
        }
    }
}

/// Boolean filter over a row.
///
/// A comparison or `IN` against a null cell is false; `Not` is plain boolean
/// negation of its operand.
#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Compare { column: String, op: CmpOp, value: Value },
    In { column: String, values: Vec<Value> },
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
    Not(Box<Predicate>),
}

impl Predicate {
    pub fn compare(column: impl Into<String>, op: CmpOp, value: impl Into<Value>) -> Self {
        Predicate::Compare {
            column: column.into(),
            op,
            value: value.into(),
        }
    }

    pub fn eq(column: impl Into<String>, value: impl Into<Value>) -> Self {
        Self::compare(column, CmpOp::Eq, value)
    }

    pub fn is_in<V: Into<Value>>(column: impl Into<String>, values: impl IntoIterator<Item = V>) -> Self {
        Predicate::In {
            column: column.into(),
            values: values.into_iter().map(Into::into).collect(),
        }
    }

    pub fn and(self, other: Predicate) -> Self {
        match self {
            Predicate::And(mut v) => {
                v.push(other);
                Predicate::And(v)
            }
            p => Predicate::And(vec![p, other]),
        }
    }

    pub fn or(self, other: Predicate) -> Self {
        match self {
            Predicate::Or(mut v) => {
                v.push(other);
                Predicate::Or(v)
            }
            p => Predicate::Or(vec![p, other]),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Self {
        Predicate::Not(Box::new(self))
    }

    /// Referenced columns, each once, in first-use order.
    pub fn columns(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_columns(&mut out);
        out
    }

    fn collect_columns<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Predicate::Compare { column, .. } | Predicate::In { column, .. } => {
                if !out.contains(&column.as_str()) {
                    out.push(column);
                }
            }
            Predicate::And(ps) | Predicate::Or(ps) => ps.iter().for_each(|p| p.collect_columns(out)),
            Predicate::Not(p) => p.collect_columns(out),
        }
    }

    /// Checks column existence and literal types against `schema`.
    pub fn validate(&self, schema: &TableSchema) -> Result<()> {
        let check = |column: &str, value: &Value| -> Result<()> {
            let field = schema
                .field(column)
                .ok_or_else(|| Error::Projection(format!("predicate references unknown column '{column}'")))?;
            match value.column_type() {
                Some(t) if t == field.column_type => Ok(()),
                _ => Err(Error::Schema(format!(
                    "literal {value:?} is not comparable with {} column '{column}'",
                    field.column_type
                ))),
            }
        };
        match self {
            Predicate::Compare { column, value, .. } => check(column, value),
            Predicate::In { column, values } => {
                if values.is_empty() {
                    // Still validate the column.
                    schema
                        .field(column)
                        .map(|_| ())
                        .ok_or_else(|| Error::Projection(format!("predicate references unknown column '{column}'")))
                } else {
                    values.iter().try_for_each(|v| check(column, v))
                }
            }
            Predicate::And(ps) | Predicate::Or(ps) => ps.iter().try_for_each(|p| p.validate(schema)),
            Predicate::Not(p) => p.validate(schema),
        }
    }

    /// Resolves column names to positions in `columns`.
    pub fn bind(&self, columns: &[String]) -> Result<BoundPredicate> {
        let index = |name: &str| {
            columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Projection(format!("column '{name}' not available to predicate")))
        };
        Ok(match self {
            Predicate::Compare { column, op, value } => BoundPredicate::Compare {
                index: index(column)?,
                op: *op,
                value: value.clone(),
            },
            Predicate::In { column, values } => BoundPredicate::In {
                index: index(column)?,
                values: values.clone(),
            },
            Predicate::And(ps) => BoundPredicate::And(ps.iter().map(|p| p.bind(columns)).collect::<Result<_>>()?),
            Predicate::Or(ps) => BoundPredicate::Or(ps.iter().map(|p| p.bind(columns)).collect::<Result<_>>()?),
            Predicate::Not(p) => BoundPredicate::Not(Box::new(p.bind(columns)?)),
        })
    }
}

#[derive(Debug, Clone)]
pub enum BoundPredicate {
    Compare { index: usize, op: CmpOp, value: Value },
    In { index: usize, values: Vec<Value> },
    And(Vec<BoundPredicate>),
    Or(Vec<BoundPredicate>),
    Not(Box<BoundPredicate>),
}

impl BoundPredicate {
    pub fn evaluate(&self, columns: &[ColumnVector], row: usize) -> bool {
        match self {
            BoundPredicate::Compare { index, op, value } => {
                columns[*index].compare_at(row, value).is_some_and(|ord| op.holds(ord))
            }
            BoundPredicate::In { index, values } => values
                .iter()
                .any(|v| columns[*index].compare_at(row, v) == Some(Ordering::Equal)),
            BoundPredicate::And(ps) => ps.iter().all(|p| p.evaluate(columns, row)),
            BoundPredicate::Or(ps) => ps.iter().any(|p| p.evaluate(columns, row)),
            BoundPredicate::Not(p) => !p.evaluate(columns, row),
        }
    }

    pub fn matching_rows(&self, columns: &[ColumnVector], num_rows: usize) -> Vec<usize> {
        (0..num_rows).filter(|&r| self.evaluate(columns, r)).collect()
    }
}
