use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use super::predicate::Predicate;
use super::scan::{scan, Batch};
use crate::emrgen::{self, CONDITIONS, ENCOUNTERS, PATIENTS, PRESCRIPTIONS};
use crate::error::{Error, Result};
use crate::format::{
    self, date_to_iso, ColumnData, ColumnType, ColumnVector, EncryptionConfig, Field, FileFooter, TableSchema, Value,
};
use crate::keytools::KeyResolver;

pub const RESULT_TABLE: &str = "result";

/// Input files of the four EMR tables.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EmrFiles {
    pub patients: Vec<PathBuf>,
    pub encounters: Vec<PathBuf>,
    pub conditions: Vec<PathBuf>,
    pub prescriptions: Vec<PathBuf>,
}

impl EmrFiles {
    /// Finds `<dir>/<table>/*.ccf` for every table; each table needs at least one file.
    pub fn discover(dir: &Path) -> Result<Self> {
        let find = |table: &str| -> Result<Vec<PathBuf>> {
            let files = emrgen::table_files(dir, table)?;
            if files.is_empty() {
                return Err(Error::Data(format!(
                    "no input files for table '{table}' under {}",
                    dir.display()
                )));
            }
            Ok(files)
        };
        Ok(Self {
            patients: find(PATIENTS)?,
            encounters: find(ENCOUNTERS)?,
            conditions: find(CONDITIONS)?,
            prescriptions: find(PRESCRIPTIONS)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MisuseQueryParams {
    pub drug: String,
    pub excluded_conditions: BTreeSet<String>,
    /// Days past the encounter end that still count as "during" it.
    pub window_extension_days: i64,
}

impl Default for MisuseQueryParams {
    fn default() -> Self {
        Self {
            drug: "Amoxicillin".into(),
            excluded_conditions: emrgen::default_misuse_exclusions().into_iter().collect(),
            window_extension_days: 2,
        }
    }
}

impl MisuseQueryParams {
    pub fn validate(&self) -> Result<()> {
        if self.drug.is_empty() {
            return Err(Error::Config("drug must not be empty".into()));
        }
        if self.window_extension_days < 0 {
            return Err(Error::Config(format!(
                "window extension must be >= 0, got {}",
                self.window_extension_days
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MisuseRow {
    pub patient_id: String,
    pub encounter_id: String,
    pub encounter_start: i64,
    pub drug: String,
}

/// Query answer, sorted by (patient_id, encounter_id) and unique per
/// (patient_id, encounter_id, drug).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResultSet {
    pub rows: Vec<MisuseRow>,
}

pub fn result_schema() -> TableSchema {
    TableSchema::new(
        RESULT_TABLE,
        vec![
            Field::new("patient_id", ColumnType::String, false),
            Field::new("encounter_id", ColumnType::String, false),
            Field::new("encounter_start", ColumnType::Date, false),
            Field::new("drug", ColumnType::String, false),
        ],
    )
    .expect("static schema")
}

impl ResultSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn normalize(&mut self) {
        self.rows.sort();
        self.rows
            .dedup_by(|a, b| a.patient_id == b.patient_id && a.encounter_id == b.encounter_id && a.drug == b.drug);
    }

    pub fn to_columns(&self) -> Vec<ColumnVector> {
        let strings = |f: fn(&MisuseRow) -> &String| {
            ColumnVector::dense(ColumnData::String(self.rows.iter().map(|r| f(r).clone()).collect()))
        };
        vec![
            strings(|r| &r.patient_id),
            strings(|r| &r.encounter_id),
            ColumnVector::dense(ColumnData::Date(self.rows.iter().map(|r| r.encounter_start).collect())),
            strings(|r| &r.drug),
        ]
    }

    /// Writes the rows as CSV with a header; dates as ISO-8601.
    pub fn export_csv<W: std::io::Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let csv_err = |e: csv::Error| Error::Encoding(e.to_string());
        w.write_record(["patient_id", "encounter_id", "encounter_start", "drug"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([&r.patient_id, &r.encounter_id, &date_to_iso(r.encounter_start), &r.drug])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn collect(batches: impl Iterator<Item = Result<Batch>>) -> Result<Vec<Batch>> {
    batches.collect()
}

fn required_str<'a>(v: &'a ColumnVector, row: usize, what: &str) -> Result<&'a str> {
    v.str_at(row)
        .ok_or_else(|| Error::Data(format!("null {what} in row {row}")))
}

fn required_i64(v: &ColumnVector, row: usize, what: &str) -> Result<i64> {
    v.i64_at(row)
        .ok_or_else(|| Error::Data(format!("null {what} in row {row}")))
}

fn year_of(days: i64) -> i64 {
    let iso = date_to_iso(days);
    let (year, _) = iso.split_at(iso.len() - 6);
    year.parse().expect("formatted year")
}

struct Encounter {
    patient_id: String,
    start: i64,
    end: i64,
}

/// Prescriptions of `params.drug` with no excluded condition recorded for the
/// same patient inside `[encounter start, encounter end + extension]`.
///
/// Conditions from any encounter of the patient count. Every matching
/// prescription must resolve to an encounter of the same patient, and that
/// patient must exist and be born no later than the encounter year; otherwise
/// the data is inconsistent and a `Data` error is returned.
pub fn misuse_query(
    files: &EmrFiles,
    params: &MisuseQueryParams,
    resolver: Option<&dyn KeyResolver>,
) -> Result<ResultSet> {
    params.validate()?;

    let drug_filter = Predicate::eq("drug", params.drug.as_str());
    let prescriptions = collect(scan(
        &files.prescriptions,
        &["patient_id", "encounter_id"],
        Some(&drug_filter),
        resolver,
    ))?;

    let mut encounters: HashMap<String, Encounter> = HashMap::new();
    for b in collect(scan(
        &files.encounters,
        &["encounter_id", "patient_id", "start_date", "end_date"],
        None,
        resolver,
    ))? {
        let (ids, pids, starts, ends) = (&b.vectors[0], &b.vectors[1], &b.vectors[2], &b.vectors[3]);
        for r in 0..b.num_rows {
            encounters.insert(
                required_str(ids, r, "encounter_id")?.to_string(),
                Encounter {
                    patient_id: required_str(pids, r, "patient_id")?.to_string(),
                    start: required_i64(starts, r, "start_date")?,
                    end: required_i64(ends, r, "end_date")?,
                },
            );
        }
    }

    let exclusion = Predicate::is_in("description", params.excluded_conditions.iter().map(String::as_str));
    let mut onsets: HashMap<String, Vec<i64>> = HashMap::new();
    for b in collect(scan(
        &files.conditions,
        &["patient_id", "onset_date"],
        Some(&exclusion),
        resolver,
    ))? {
        for r in 0..b.num_rows {
            onsets
                .entry(required_str(&b.vectors[0], r, "patient_id")?.to_string())
                .or_default()
                .push(required_i64(&b.vectors[1], r, "onset_date")?);
        }
    }

    let mut birth_years: HashMap<String, i64> = HashMap::new();
    for b in collect(scan(&files.patients, &["patient_id", "birth_year"], None, resolver))? {
        for r in 0..b.num_rows {
            birth_years.insert(
                required_str(&b.vectors[0], r, "patient_id")?.to_string(),
                required_i64(&b.vectors[1], r, "birth_year")?,
            );
        }
    }

    let mut result = ResultSet::default();
    for b in &prescriptions {
        for r in 0..b.num_rows {
            let pid = required_str(&b.vectors[0], r, "patient_id")?;
            let eid = required_str(&b.vectors[1], r, "encounter_id")?;
            let enc = encounters
                .get(eid)
                .ok_or_else(|| Error::Data(format!("prescription references unknown encounter '{eid}'")))?;
            if enc.patient_id != pid {
                return Err(Error::Data(format!(
                    "encounter '{eid}' belongs to '{}', not '{pid}'",
                    enc.patient_id
                )));
            }
            let born = *birth_years
                .get(pid)
                .ok_or_else(|| Error::Data(format!("prescription references unknown patient '{pid}'")))?;
            if year_of(enc.start) < born {
                return Err(Error::Data(format!("encounter '{eid}' predates the birth of '{pid}'")));
            }
            let window_end = enc.end + params.window_extension_days;
            let diagnosed = onsets
                .get(pid)
                .is_some_and(|days| days.iter().any(|&d| d >= enc.start && d <= window_end));
            if !diagnosed {
                result.rows.push(MisuseRow {
                    patient_id: pid.to_string(),
                    encounter_id: eid.to_string(),
                    encounter_start: enc.start,
                    drug: params.drug.clone(),
                });
            }
        }
    }
    result.normalize();
    Ok(result)
}

/// Writes the result as a single-row-group table file, encrypted if `enc` is set.
pub fn persist_result(result: &ResultSet, enc: Option<&EncryptionConfig>, path: &Path) -> Result<FileFooter> {
    format::write_table_file(&result_schema(), &[result.to_columns()], enc, path)
}

pub fn read_result(path: &Path, resolver: Option<&dyn KeyResolver>) -> Result<ResultSet> {
    let schema = result_schema();
    let names: Vec<&str> = schema.column_names().collect();
    let mut rows = Vec::new();
    for b in scan(&[path.to_path_buf()], &names, None, resolver) {
        let b = b?;
        for r in 0..b.num_rows {
            let s = |i: usize| match b.vectors[i].value(r) {
                Value::String(s) => Ok(s),
                other => Err(Error::Schema(format!("unexpected cell {other:?} in result file"))),
            };
            rows.push(MisuseRow {
                patient_id: s(0)?,
                encounter_id: s(1)?,
                encounter_start: required_i64(&b.vectors[2], r, "encounter_start")?,
                drug: s(3)?,
            });
        }
    }
    Ok(ResultSet { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emrgen::{conditions_schema, encounters_schema, patients_schema, prescriptions_schema};
    use crate::format::{write_table_file, Table};

    fn s(v: &[&str]) -> ColumnVector {
        ColumnVector::dense(ColumnData::String(v.iter().map(|x| x.to_string()).collect()))
    }
    fn d(v: &[i64]) -> ColumnVector {
        ColumnVector::dense(ColumnData::Date(v.to_vec()))
    }

    fn write(dir: &Path, table: Table) {
        let path = emrgen::part_path(dir, &table.schema.table_name, 0);
        write_table_file(&table.schema, &table.split_row_groups(2), None, &path).unwrap();
    }

    /// One patient, one encounter on days 100..=103, Amoxicillin prescribed,
    /// and an Otitis media onset on `onset`.
    fn fixture(onset: i64, rx_encounter: &str) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            Table::new(
                patients_schema(),
                vec![
                    s(&["P1"]),
                    ColumnVector::dense(ColumnData::Int64(vec![1950])),
                    s(&["F"]),
                ],
            )
            .unwrap(),
        );
        write(
            dir.path(),
            Table::new(encounters_schema(), vec![s(&["E1"]), s(&["P1"]), d(&[100]), d(&[103])]).unwrap(),
        );
        write(
            dir.path(),
            Table::new(
                conditions_schema(),
                vec![s(&["C1"]), s(&["P1"]), s(&["E0"]), d(&[onset]), s(&["Otitis media"])],
            )
            .unwrap(),
        );
        write(
            dir.path(),
            Table::new(
                prescriptions_schema(),
                vec![
                    s(&["R1", "R2"]),
                    s(&["P1", "P1"]),
                    s(&[rx_encounter, rx_encounter]),
                    d(&[100, 101]),
                    s(&["Amoxicillin", "Amoxicillin"]),
                ],
            )
            .unwrap(),
        );
        dir
    }

    fn run(onset: i64, k: i64) -> usize {
        let dir = fixture(onset, "E1");
        let files = EmrFiles::discover(dir.path()).unwrap();
        let params = MisuseQueryParams {
            window_extension_days: k,
            ..Default::default()
        };
        misuse_query(&files, &params, None).unwrap().len()
    }

    #[test]
    fn window_boundaries_are_inclusive() {
        assert_eq!(run(99, 2), 1);
        assert_eq!(run(100, 2), 0);
        assert_eq!(run(105, 2), 0);
        assert_eq!(run(106, 2), 1);
        assert_eq!(run(103, 0), 0);
        assert_eq!(run(104, 0), 1);
    }

    #[test]
    fn duplicate_prescriptions_collapse() {
        let dir = fixture(0, "E1");
        let files = EmrFiles::discover(dir.path()).unwrap();
        let rs = misuse_query(&files, &MisuseQueryParams::default(), None).unwrap();
        assert_eq!(
            rs.rows,
            vec![MisuseRow {
                patient_id: "P1".into(),
                encounter_id: "E1".into(),
                encounter_start: 100,
                drug: "Amoxicillin".into()
            }]
        );
    }

    #[test]
    fn dangling_encounter_is_a_data_error() {
        let dir = fixture(0, "E9");
        let files = EmrFiles::discover(dir.path()).unwrap();
        let err = misuse_query(&files, &MisuseQueryParams::default(), None).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn params_validation() {
        let mut p = MisuseQueryParams::default();
        assert_eq!(p.excluded_conditions.len(), 4);
        p.window_extension_days = -1;
        assert!(p.validate().is_err());
        p = MisuseQueryParams {
            drug: String::new(),
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn discover_needs_every_table() {
        let dir = tempfile::tempdir().unwrap();
        let err = EmrFiles::discover(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no input files"), "{err}");
    }

    #[test]
    fn result_round_trip_including_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ccf");
        for rs in [
            ResultSet::default(),
            ResultSet {
                rows: vec![MisuseRow {
                    patient_id: "P1".into(),
                    encounter_id: "E2".into(),
                    encounter_start: 17_900,
                    drug: "Amoxicillin".into(),
                }],
            },
        ] {
            let footer = persist_result(&rs, None, &path).unwrap();
            assert_eq!(footer.row_groups.len(), 1);
            assert_eq!(read_result(&path, None).unwrap(), rs);
        }
    }

    #[test]
    fn year_of_dates() {
        assert_eq!(year_of(0), 1970);
        assert_eq!(year_of(17_897), 2019);
        assert_eq!(year_of(-1), 1969);
    }
}
