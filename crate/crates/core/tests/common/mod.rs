#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use ccf_core::bench::required_master_keys;
use ccf_core::emrgen::{self, EmrTables, TableEncryption, WriteOptions};
use ccf_core::format::{ColumnData, ColumnType, ColumnVector, Field, Table, TableSchema};
use ccf_core::keytools::{KekCache, KeyManager, WrapMode};
use ccf_core::kms::{InMemoryKms, KeyStore, KmsClient};
use ccf_core::query::{MisuseQueryParams, MisuseRow};
use proptest::prelude::*;

pub const ADMIN: &str = "admin-token";
pub const READER: &str = "reader-token";

/// Key store holding every master key the pipeline uses, readable by `READER`.
pub fn key_store() -> Arc<KeyStore> {
    let store = Arc::new(KeyStore::new(ADMIN));
    for id in required_master_keys() {
        store.create_master_key(ADMIN, &id, [READER]).unwrap();
    }
    store
}

pub fn reader_client(store: &Arc<KeyStore>) -> Arc<dyn KmsClient> {
    Arc::new(InMemoryKms::new(store.clone(), READER))
}

pub fn key_manager(kms: Arc<dyn KmsClient>, ttl: Duration) -> Arc<KeyManager> {
    Arc::new(KeyManager::new(kms, Arc::new(KekCache::new(ttl))))
}

/// Writes all four tables as one file each with `row_groups` groups.
pub fn write_dataset(tables: &EmrTables, dir: &Path, mode: Option<WrapMode>, store: &Arc<KeyStore>, row_groups: usize) {
    let encryption = mode.map(|mode| TableEncryption {
        mode,
        keys: key_manager(reader_client(store), Duration::from_secs(600)),
    });
    emrgen::write_tables(tables, &WriteOptions { row_groups, encryption }, dir).unwrap();
}

fn strings(t: &Table, c: &str) -> Vec<String> {
    let v = t.column(c).unwrap();
    (0..t.num_rows()).map(|i| v.str_at(i).unwrap().to_string()).collect()
}

fn ints(t: &Table, c: &str) -> Vec<i64> {
    let v = t.column(c).unwrap();
    (0..t.num_rows()).map(|i| v.i64_at(i).unwrap()).collect()
}

/// Nested-loop evaluation of the misuse query straight from the definition:
/// a prescription of the drug counts unless the same patient has an excluded
/// condition with onset inside [encounter start, encounter end + k].
pub fn oracle_misuse(tables: &EmrTables, params: &MisuseQueryParams) -> BTreeSet<MisuseRow> {
    let rx = &tables.prescriptions;
    let (rx_pid, rx_eid, rx_drug) = (
        strings(rx, "patient_id"),
        strings(rx, "encounter_id"),
        strings(rx, "drug"),
    );
    let enc = &tables.encounters;
    let (e_id, e_start, e_end) = (
        strings(enc, "encounter_id"),
        ints(enc, "start_date"),
        ints(enc, "end_date"),
    );
    let cond = &tables.conditions;
    let (c_pid, c_desc, c_onset) = (
        strings(cond, "patient_id"),
        strings(cond, "description"),
        ints(cond, "onset_date"),
    );

    let mut out = BTreeSet::new();
    for i in 0..rx.num_rows() {
        if rx_drug[i] != params.drug {
            continue;
        }
        let e = (0..enc.num_rows())
            .find(|&j| e_id[j] == rx_eid[i])
            .expect("encounter exists");
        let lo = e_start[e];
        let hi = e_end[e] + params.window_extension_days;
        let mut excluded = false;
        for c in 0..cond.num_rows() {
            if c_pid[c] == rx_pid[i]
                && params.excluded_conditions.contains(&c_desc[c])
                && lo <= c_onset[c]
                && c_onset[c] <= hi
            {
                excluded = true;
                break;
            }
        }
        if !excluded {
            out.insert(MisuseRow {
                patient_id: rx_pid[i].clone(),
                encounter_id: rx_eid[i].clone(),
                encounter_start: lo,
                drug: rx_drug[i].clone(),
            });
        }
    }
    out
}

fn column_strategy(column_type: ColumnType, nullable: bool, rows: usize) -> BoxedStrategy<ColumnVector> {
    let validity = if nullable {
        proptest::collection::vec(proptest::bool::weighted(0.8), rows).boxed()
    } else {
        Just(vec![true; rows]).boxed()
    };
    let data: BoxedStrategy<ColumnData> = match column_type {
        ColumnType::Int64 => proptest::collection::vec(any::<i64>(), rows)
            .prop_map(ColumnData::Int64)
            .boxed(),
        ColumnType::Date => proptest::collection::vec(-100_000i64..100_000, rows)
            .prop_map(ColumnData::Date)
            .boxed(),
        ColumnType::Double => proptest::collection::vec(any::<f64>(), rows)
            .prop_map(ColumnData::Double)
            .boxed(),
        ColumnType::Bool => proptest::collection::vec(any::<bool>(), rows)
            .prop_map(ColumnData::Bool)
            .boxed(),
        ColumnType::String => proptest::collection::vec(".{0,12}", rows)
            .prop_map(ColumnData::String)
            .boxed(),
    };
    (data, validity)
        .prop_map(|(data, validity)| ColumnVector::new(data, validity).unwrap())
        .boxed()
}

/// Tables covering every column type, with nulls, and `max_rows` rows at most.
pub fn arb_table(max_rows: usize) -> impl Strategy<Value = Table> {
    let types = [
        ColumnType::Int64,
        ColumnType::Double,
        ColumnType::String,
        ColumnType::Bool,
        ColumnType::Date,
    ];
    let columns = proptest::collection::vec((proptest::sample::select(types.to_vec()), any::<bool>()), 1..7);
    (columns, 0..=max_rows).prop_flat_map(|(cols, rows)| {
        let fields: Vec<Field> = cols
            .iter()
            .enumerate()
            .map(|(i, (t, nullable))| Field::new(format!("c{i}"), *t, *nullable))
            .collect();
        let vectors: Vec<BoxedStrategy<ColumnVector>> = cols
            .iter()
            .map(|(t, nullable)| column_strategy(*t, *nullable, rows))
            .collect();
        vectors.prop_map(move |vectors| Table::new(TableSchema::new("t", fields.clone()).unwrap(), vectors).unwrap())
    })
}

pub fn random_table_config(keys: Arc<KeyManager>, mode: WrapMode) -> ccf_core::format::EncryptionConfig {
    ccf_core::format::EncryptionConfig {
        footer_key: "t.footer".into(),
        column_keys: [("c0".to_string(), "t.sensitive".to_string())].into(),
        default_column_key: Some("t.other".into()),
        mode,
        keys,
    }
}

/// Store with the `t.*` keys used by [`random_table_config`].
pub fn random_table_store() -> Arc<KeyStore> {
    let store = Arc::new(KeyStore::new(ADMIN));
    for id in ["t.sensitive", "t.other", "t.footer"] {
        store.create_master_key(ADMIN, id, [READER]).unwrap();
    }
    store
}
