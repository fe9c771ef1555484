mod common;

use std::collections::HashSet;
use std::io::Cursor;
use std::sync::Arc;
use std::time::Duration;

use ccf_core::format::{read_footer, write_table, ColumnType, ColumnVector, Field, TableSchema};
use ccf_core::keytools::{decode_key_material, KeyResolver, WrapMode};
use ccf_core::kms::InstrumentedKms;
use common::*;

fn schema(columns: usize) -> TableSchema {
    TableSchema::new(
        "t",
        (0..columns)
            .map(|i| Field::new(format!("c{i}"), ColumnType::Int64, false))
            .collect(),
    )
    .unwrap()
}

fn groups(columns: usize, groups: usize) -> Vec<Vec<ColumnVector>> {
    (0..groups)
        .map(|g| {
            (0..columns)
                .map(|c| ColumnVector::int64(vec![Some((g * 10 + c) as i64); 5]))
                .collect()
        })
        .collect()
}

/// F files x C columns x G groups under 3 master keys: Single needs one
/// wrap per chunk and footer, Double one per master key.
#[test]
fn write_call_count_law() {
    let (files, columns, row_groups) = (3, 4, 5);
    for mode in [WrapMode::Single, WrapMode::Double] {
        let store = random_table_store();
        let kms = Arc::new(InstrumentedKms::counting(reader_client(&store)));
        let keys = key_manager(kms.clone(), Duration::from_secs(600));
        let cfg = random_table_config(keys.clone(), mode);
        let mut readers = Vec::new();
        for _ in 0..files {
            let mut buf = Vec::new();
            write_table(&schema(columns), &groups(columns, row_groups), Some(&cfg), &mut buf).unwrap();
            readers.push(buf);
        }
        let wraps = kms.stats().wrap_calls as usize;
        match mode {
            WrapMode::Single => assert_eq!(wraps, files * columns * row_groups + files),
            WrapMode::Double => assert_eq!(wraps, 3),
        }

        // Reading everything back with a cold cache follows the same law.
        let rkms = Arc::new(InstrumentedKms::counting(reader_client(&store)));
        let reader = key_manager(rkms.clone(), Duration::from_secs(600));
        let names: Vec<String> = (0..columns).map(|i| format!("c{i}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        for buf in readers {
            let mut cur = Cursor::new(buf);
            let footer = read_footer(&mut cur, Some(reader.as_ref() as &dyn KeyResolver)).unwrap();
            ccf_core::format::read_columns(&mut cur, &footer, &names, Some(reader.as_ref() as &dyn KeyResolver))
                .unwrap();
        }
        let unwraps = rkms.stats().unwrap_calls as usize;
        match mode {
            WrapMode::Single => assert_eq!(unwraps, files * columns * row_groups + files),
            WrapMode::Double => assert_eq!(unwraps, 3),
        }
    }
}

#[test]
fn every_chunk_has_its_own_dek() {
    for mode in [WrapMode::Single, WrapMode::Double] {
        let store = random_table_store();
        let keys = key_manager(reader_client(&store), Duration::from_secs(600));
        let cfg = random_table_config(keys.clone(), mode);
        let mut buf = Vec::new();
        write_table(&schema(6), &groups(6, 6), Some(&cfg), &mut buf).unwrap();
        let footer = read_footer(&mut Cursor::new(buf), Some(keys.as_ref() as &dyn KeyResolver)).unwrap();
        let mut seen = HashSet::new();
        for chunk in footer.encrypted_columns() {
            let km = decode_key_material(chunk.key_material.as_deref().unwrap()).unwrap();
            assert_eq!(km.is_double_wrapped(), mode == WrapMode::Double);
            let dek = keys.resolve_dek(&km).unwrap();
            assert!(seen.insert(*dek.as_bytes()), "repeated DEK");
        }
        assert_eq!(seen.len(), 36);
    }
}

/// Repeated access to one master key over several TTL windows costs at most
/// one KMS call per window, plus one.
#[test]
fn ttl_bounds_kms_calls() {
    let store = random_table_store();
    let kms = Arc::new(InstrumentedKms::counting(reader_client(&store)));
    let ttl = Duration::from_millis(150);
    let keys = key_manager(kms.clone(), ttl);
    let cfg = random_table_config(keys, WrapMode::Double);
    let start = std::time::Instant::now();
    while start.elapsed() < Duration::from_millis(500) {
        let mut buf = Vec::new();
        write_table(&schema(1), &groups(1, 1), Some(&cfg), &mut buf).unwrap();
    }
    let windows = (start.elapsed().as_secs_f64() / ttl.as_secs_f64()).ceil() as u64;
    // Two master keys (column and footer) are in use.
    assert!(kms.stats().wrap_calls <= 2 * (windows + 1), "{:?}", kms.stats());
}
