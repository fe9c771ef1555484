//! Seeded synthetic medical records: patients, encounters, conditions and
//! prescriptions.
//!
//! Randomness comes from ChaCha8 seeded with `GenConfig::seed`, and draws
//! happen in a fixed order, so a config always yields identical tables.
//! Condition and drug catalogs live in `data/catalog.json`; per-table
//! sensitive columns live in `data/sensitive_columns.json`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::format::{
    write_table_file, ColumnData, ColumnType, ColumnVector, EncryptionConfig, Field, FileFooter, Table, TableSchema,
    Value,
};
use crate::keytools::{KeyManager, WrapMode};

pub const PATIENTS: &str = "patients";
pub const ENCOUNTERS: &str = "encounters";
pub const CONDITIONS: &str = "conditions";
pub const PRESCRIPTIONS: &str = "prescriptions";
pub const TABLE_NAMES: [&str; 4] = [PATIENTS, ENCOUNTERS, CONDITIONS, PRESCRIPTIONS];

/// 2019-01-01 in days since the Unix epoch; encounters start within two years of it.
const BASE_DATE: i64 = 17_897;
const DATE_SPAN_DAYS: i64 = 730;
const MAX_ENCOUNTER_DAYS: i64 = 6;
const LATE_ONSET_DAYS: i64 = 30;

#[derive(Debug, Deserialize)]
struct Weighted {
    name: String,
    weight: f64,
}

#[derive(Debug, Deserialize)]
struct Catalog {
    conditions: Vec<Weighted>,
    drugs: Vec<Weighted>,
    misuse_exclusions: Vec<String>,
}

fn catalog() -> &'static Catalog {
    static CATALOG: OnceLock<Catalog> = OnceLock::new();
    CATALOG.get_or_init(|| {
        serde_json::from_str(include_str!("../data/catalog.json")).expect("bundled catalog.json is valid")
    })
}

fn sensitive_map() -> &'static BTreeMap<String, Vec<String>> {
    static MAP: OnceLock<BTreeMap<String, Vec<String>>> = OnceLock::new();
    MAP.get_or_init(|| {
        serde_json::from_str(include_str!("../data/sensitive_columns.json"))
            .expect("bundled sensitive_columns.json is valid")
    })
}

pub fn condition_catalog() -> impl Iterator<Item = (&'static str, f64)> {
    catalog().conditions.iter().map(|w| (w.name.as_str(), w.weight))
}

pub fn drug_catalog() -> impl Iterator<Item = (&'static str, f64)> {
    catalog().drugs.iter().map(|w| (w.name.as_str(), w.weight))
}

/// Diagnoses that justify an Amoxicillin prescription.
pub fn default_misuse_exclusions() -> Vec<String> {
    catalog().misuse_exclusions.clone()
}

/// Columns of `table` protected by the `<table>.sensitive` master key.
pub fn sensitive_columns(table: &str) -> &'static [String] {
    sensitive_map().get(table).map_or(&[], Vec::as_slice)
}

/// Master key ids for a table: `(sensitive, other, footer)`.
pub fn master_key_ids(table: &str) -> [String; 3] {
    [
        format!("{table}.sensitive"),
        format!("{table}.other"),
        format!("{table}.footer"),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub patients: u32,
    pub seed: u64,
    /// Condition name -> weight multiplier (default 1.0).
    pub bias: BTreeMap<String, f64>,
    pub batch_days: Option<u32>,
}

impl GenConfig {
    pub fn new(patients: u32, seed: u64) -> Self {
        Self {
            patients,
            seed,
            bias: BTreeMap::new(),
            batch_days: None,
        }
    }

    pub fn with_bias(mut self, condition: &str, multiplier: f64) -> Self {
        self.bias.insert(condition.to_string(), multiplier);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, weight) in &self.bias {
            if !condition_catalog().any(|(c, _)| c == name) {
                return Err(Error::Config(format!("bias names unknown condition {name:?}")));
            }
            if !(weight.is_finite() && *weight > 0.0) {
                return Err(Error::Config(format!("bias weight for {name:?} must be > 0")));
            }
        }
        if self.batch_days == Some(0) {
            return Err(Error::Config("batch_days must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmrTables {
    pub patients: Table,
    pub encounters: Table,
    pub conditions: Table,
    pub prescriptions: Table,
}

impl EmrTables {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Table)> {
        [
            (PATIENTS, &self.patients),
            (ENCOUNTERS, &self.encounters),
            (CONDITIONS, &self.conditions),
            (PRESCRIPTIONS, &self.prescriptions),
        ]
        .into_iter()
    }

    pub fn get(&self, name: &str) -> Option<&Table> {
        self.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn total_rows(&self) -> usize {
        self.iter().map(|(_, t)| t.num_rows()).sum()
    }
}

fn string_field(name: &str) -> Field {
    Field::new(name, ColumnType::String, false)
}

fn date_field(name: &str) -> Field {
    Field::new(name, ColumnType::Date, false)
}

pub fn patients_schema() -> TableSchema {
    TableSchema::new(
        PATIENTS,
        vec![
            string_field("patient_id"),
            Field::new("birth_year", ColumnType::Int64, false),
            string_field("gender"),
        ],
    )
    .expect("static schema")
}

pub fn encounters_schema() -> TableSchema {
    TableSchema::new(
        ENCOUNTERS,
        vec![
            string_field("encounter_id"),
            string_field("patient_id"),
            date_field("start_date"),
            date_field("end_date"),
        ],
    )
    .expect("static schema")
}

pub fn conditions_schema() -> TableSchema {
    TableSchema::new(
        CONDITIONS,
        vec![
            string_field("condition_id"),
            string_field("patient_id"),
            string_field("encounter_id"),
            date_field("onset_date"),
            string_field("description"),
        ],
    )
    .expect("static schema")
}

pub fn prescriptions_schema() -> TableSchema {
    TableSchema::new(
        PRESCRIPTIONS,
        vec![
            string_field("prescription_id"),
            string_field("patient_id"),
            string_field("encounter_id"),
            date_field("start_date"),
            string_field("drug"),
        ],
    )
    .expect("static schema")
}

pub fn schema_for(table: &str) -> Option<TableSchema> {
    match table {
        PATIENTS => Some(patients_schema()),
        ENCOUNTERS => Some(encounters_schema()),
        CONDITIONS => Some(conditions_schema()),
        PRESCRIPTIONS => Some(prescriptions_schema()),
        _ => None,
    }
}

fn strings(v: Vec<String>) -> ColumnVector {
    ColumnVector::dense(ColumnData::String(v))
}

fn dates(v: Vec<i64>) -> ColumnVector {
    ColumnVector::dense(ColumnData::Date(v))
}

/// Generates the four tables for `config`.
pub fn generate(config: &GenConfig) -> Result<EmrTables> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let cond_names: Vec<&str> = condition_catalog().map(|(n, _)| n).collect();
    let cond_weights: Vec<f64> = condition_catalog()
        .map(|(n, w)| w * config.bias.get(n).copied().unwrap_or(1.0))
        .collect();
    let cond_dist = WeightedIndex::new(&cond_weights).map_err(|e| Error::Config(e.to_string()))?;
    let drug_names: Vec<&str> = drug_catalog().map(|(n, _)| n).collect();
    let drug_dist = WeightedIndex::new(drug_catalog().map(|(_, w)| w)).map_err(|e| Error::Config(e.to_string()))?;

    let mut p_id = Vec::new();
    let mut p_birth = Vec::new();
    let mut p_gender = Vec::new();
    let (mut e_id, mut e_patient, mut e_start, mut e_end) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut c_id, mut c_patient, mut c_enc, mut c_onset, mut c_desc) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut r_id, mut r_patient, mut r_enc, mut r_start, mut r_drug) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());

    for p in 0..config.patients {
        let patient_id = format!("P{p:07}");
        p_birth.push(rng.gen_range(1925i64..=2018));
        p_gender.push(if rng.gen_bool(0.5) { "F" } else { "M" }.to_string());

        let encounters = rng.gen_range(1u32..=5);
        for _ in 0..encounters {
            let encounter_id = format!("E{:08}", e_id.len());
            let start = BASE_DATE + rng.gen_range(0..DATE_SPAN_DAYS);
            let end = start + rng.gen_range(0..=MAX_ENCOUNTER_DAYS);

            let conditions = rng.gen_range(0u32..=3);
            for _ in 0..conditions {
                let onset = if rng.gen_bool(0.75) {
                    rng.gen_range(start..=end)
                } else {
                    end + rng.gen_range(1..=LATE_ONSET_DAYS)
                };
                c_id.push(format!("C{:08}", c_id.len()));
                c_patient.push(patient_id.clone());
                c_enc.push(encounter_id.clone());
                c_onset.push(onset);
                c_desc.push(cond_names[cond_dist.sample(&mut rng)].to_string());
            }

            let prescriptions = rng.gen_range(0u32..=2);
            for _ in 0..prescriptions {
                r_id.push(format!("R{:08}", r_id.len()));
                r_patient.push(patient_id.clone());
                r_enc.push(encounter_id.clone());
                r_start.push(rng.gen_range(start..=end));
                r_drug.push(drug_names[drug_dist.sample(&mut rng)].to_string());
            }

            e_id.push(encounter_id);
            e_patient.push(patient_id.clone());
            e_start.push(start);
            e_end.push(end);
        }
        p_id.push(patient_id);
    }

    Ok(EmrTables {
        patients: Table::new(
            patients_schema(),
            vec![
                strings(p_id),
                ColumnVector::dense(ColumnData::Int64(p_birth)),
                strings(p_gender),
            ],
        )?,
        encounters: Table::new(
            encounters_schema(),
            vec![strings(e_id), strings(e_patient), dates(e_start), dates(e_end)],
        )?,
        conditions: Table::new(
            conditions_schema(),
            vec![
                strings(c_id),
                strings(c_patient),
                strings(c_enc),
                dates(c_onset),
                strings(c_desc),
            ],
        )?,
        prescriptions: Table::new(
            prescriptions_schema(),
            vec![
                strings(r_id),
                strings(r_patient),
                strings(r_enc),
                dates(r_start),
                strings(r_drug),
            ],
        )?,
    })
}

/// Wrap mode plus key manager; yields the three-key config for any table.
#[derive(Clone)]
pub struct TableEncryption {
    pub mode: WrapMode,
    pub keys: Arc<KeyManager>,
}

impl TableEncryption {
    pub fn config_for(&self, table: &str) -> EncryptionConfig {
        let [sensitive, other, footer] = master_key_ids(table);
        EncryptionConfig {
            footer_key: footer,
            column_keys: sensitive_columns(table)
                .iter()
                .map(|c| (c.clone(), sensitive.clone()))
                .collect(),
            default_column_key: Some(other),
            mode: self.mode,
            keys: self.keys.clone(),
        }
    }
}

#[derive(Clone)]
pub struct WriteOptions {
    /// Row groups per file. Every file gets exactly this many, some possibly empty.
    pub row_groups: usize,
    pub encryption: Option<TableEncryption>,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self {
            row_groups: 4,
            encryption: None,
        }
    }
}

pub const FILE_EXTENSION: &str = "ccf";

pub fn part_path(out_dir: &Path, table: &str, part: usize) -> PathBuf {
    out_dir.join(table).join(format!("part-{part:05}.{FILE_EXTENSION}"))
}

/// Data files of `table` under `dir`, in part order.
pub fn table_files(dir: &Path, table: &str) -> Result<Vec<PathBuf>> {
    let table_dir = dir.join(table);
    if !table_dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&table_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == FILE_EXTENSION))
        .collect();
    files.sort();
    Ok(files)
}

/// Batch index of every row of every table, keyed by encounter start date.
fn batch_assignment(tables: &EmrTables, batches: usize) -> BTreeMap<&'static str, Vec<usize>> {
    let enc = &tables.encounters;
    let ids = enc.column("encounter_id").expect("schema");
    let patients = enc.column("patient_id").expect("schema");
    let starts = enc.column("start_date").expect("schema");
    let n = enc.num_rows();

    let (lo, hi) = (0..n)
        .filter_map(|i| starts.i64_at(i))
        .fold((i64::MAX, i64::MIN), |(lo, hi), s| (lo.min(s), hi.max(s)));
    let span = if n == 0 { 1 } else { (hi - lo + 1) as u128 };
    let bucket = |start: i64| ((start - lo) as u128 * batches as u128 / span) as usize;

    let mut by_encounter = HashMap::with_capacity(n);
    let mut first_by_patient: HashMap<&str, i64> = HashMap::new();
    for i in 0..n {
        let start = starts.i64_at(i).expect("non-null");
        by_encounter.insert(ids.str_at(i).expect("non-null"), bucket(start));
        let pid = patients.str_at(i).expect("non-null");
        first_by_patient
            .entry(pid)
            .and_modify(|s| *s = (*s).min(start))
            .or_insert(start);
    }

    let via_encounter = |t: &Table| -> Vec<usize> {
        let col = t.column("encounter_id").expect("schema");
        (0..t.num_rows())
            .map(|i| col.str_at(i).and_then(|e| by_encounter.get(e).copied()).unwrap_or(0))
            .collect()
    };
    let pcol = tables.patients.column("patient_id").expect("schema");
    let patient_batches = (0..tables.patients.num_rows())
        .map(|i| {
            pcol.str_at(i)
                .and_then(|p| first_by_patient.get(p).copied())
                .map_or(0, bucket)
        })
        .collect();

    BTreeMap::from([
        (PATIENTS, patient_batches),
        (ENCOUNTERS, via_encounter(enc)),
        (CONDITIONS, via_encounter(&tables.conditions)),
        (PRESCRIPTIONS, via_encounter(&tables.prescriptions)),
    ])
}

/// Splits each table into per-day upload batches by encounter start date and
/// writes one file per (table, batch) under `out_dir/<table>/`.
pub fn write_batches(
    tables: &EmrTables,
    config: &GenConfig,
    opts: &WriteOptions,
    out_dir: &Path,
) -> Result<Vec<(PathBuf, FileFooter)>> {
    config.validate()?;
    let batches = config.batch_days.unwrap_or(1) as usize;
    let assignment = batch_assignment(tables, batches);
    let mut written = Vec::new();
    for (name, table) in tables.iter() {
        let enc = opts.encryption.as_ref().map(|e| e.config_for(name));
        for part in 0..batches {
            let rows: Vec<usize> = assignment[name]
                .iter()
                .enumerate()
                .filter(|(_, b)| **b == part)
                .map(|(i, _)| i)
                .collect();
            let batch = if batches == 1 { table.clone() } else { table.take(&rows) };
            let path = part_path(out_dir, name, part);
            let footer = write_table_file(
                &batch.schema,
                &batch.split_row_groups(opts.row_groups),
                enc.as_ref(),
                &path,
            )?;
            written.push((path, footer));
        }
    }
    Ok(written)
}

/// Writes each table as a single file.
pub fn write_tables(tables: &EmrTables, opts: &WriteOptions, out_dir: &Path) -> Result<Vec<(PathBuf, FileFooter)>> {
    write_batches(tables, &GenConfig::new(0, 0), opts, out_dir)
}

/// Renders a cell for CSV output: dates as ISO-8601, nulls as empty.
pub fn render_value(value: &Value) -> String {
    match value {
        Value::Null => String::new(),
        Value::Int64(v) => v.to_string(),
        Value::Double(v) => v.to_string(),
        Value::String(s) => s.clone(),
        Value::Bool(b) => b.to_string(),
        Value::Date(d) => crate::format::date_to_iso(*d),
    }
}

/// RFC-4180 CSV with a header row.
pub fn export_csv<W: Write>(table: &Table, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(table.schema.column_names()).map_err(csv_err)?;
    for row in 0..table.num_rows() {
        w.write_record(table.columns.iter().map(|c| render_value(&c.value(row))))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
