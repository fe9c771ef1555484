//! PLAIN chunk encoding.
//!
//! A chunk is the validity bitmap (`ceil(n/8)` bytes, LSB-first, 1 = present)
//! followed by the values: INT64/DATE and DOUBLE as 8 little-endian bytes,
//! BOOL as one byte (0/1), STRING as a u32-LE length plus UTF-8 bytes. Null
//! slots are encoded as the type's zero value.

use super::types::{ColumnData, ColumnType, ColumnVector};
use crate::error::{Error, Result};

pub fn encode_chunk(vector: &ColumnVector) -> Result<Vec<u8>> {
    let n = vector.len();
    let validity = vector.validity();
    let mut out = vec![0u8; n.div_ceil(8)];
    for (i, _) in validity.iter().enumerate().filter(|(_, v)| **v) {
        out[i / 8] |= 1 << (i % 8);
    }

    match vector.data() {
        ColumnData::Int64(v) | ColumnData::Date(v) => {
            out.reserve(n * 8);
            for (x, &valid) in v.iter().zip(validity) {
                out.extend_from_slice(&if valid { *x } else { 0 }.to_le_bytes());
            }
        }
        ColumnData::Double(v) => {
            out.reserve(n * 8);
            for (x, &valid) in v.iter().zip(validity) {
                out.extend_from_slice(&if valid { *x } else { 0.0 }.to_le_bytes());
            }
        }
        ColumnData::Bool(v) => {
            out.extend(v.iter().zip(validity).map(|(x, &valid)| u8::from(valid && *x)));
        }
        ColumnData::String(v) => {
            for (s, &valid) in v.iter().zip(validity) {
                let bytes = if valid { s.as_bytes() } else { &[] };
                let len = u32::try_from(bytes.len()).map_err(|_| {
                    Error::Encoding(format!("string of {} bytes exceeds u32 length prefix", bytes.len()))
                })?;
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(bytes);
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| {
                Error::Decoding(format!(
                    "truncated chunk: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64_le(&mut self) -> Result<[u8; 8]> {
        Ok(self.take(8)?.try_into().expect("8 bytes"))
    }
}

pub fn decode_chunk(bytes: &[u8], column_type: ColumnType, num_rows: usize) -> Result<ColumnVector> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let bitmap = cur.take(num_rows.div_ceil(8))?;
    let validity: Vec<bool> = (0..num_rows).map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0).collect();

    let data = match column_type {
        ColumnType::Int64 | ColumnType::Date => {
            let mut v = Vec::with_capacity(num_rows);
            for _ in 0..num_rows {
                v.push(i64::from_le_bytes(cur.u64_le()?));
            }
            if column_type == ColumnType::Int64 {
                ColumnData::Int64(v)
            } else {
                ColumnData::Date(v)
            }
        }
        ColumnType::Double => {
            let mut v = Vec::with_capacity(num_rows);
            for _ in 0..num_rows {
                v.push(f64::from_le_bytes(cur.u64_le()?));
            }
            ColumnData::Double(v)
        }
        ColumnType::Bool => {
            let raw = cur.take(num_rows)?;
            let mut v = Vec::with_capacity(num_rows);
            for &b in raw {
                match b {
                    0 => v.push(false),
                    1 => v.push(true),
                    other => return Err(Error::Decoding(format!("invalid BOOL byte {other:#04x}"))),
                }
            }
            ColumnData::Bool(v)
        }
        ColumnType::String => {
            let mut v = Vec::with_capacity(num_rows);
            for _ in 0..num_rows {
                let len = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
                let raw = cur.take(len)?;
                let s = std::str::from_utf8(raw)
                    .map_err(|e| Error::Decoding(format!("invalid UTF-8 in STRING value: {e}")))?;
                v.push(s.to_owned());
            }
            ColumnData::String(v)
        }
    };

    if cur.pos != bytes.len() {
        return Err(Error::Decoding(format!(
            "{} trailing bytes after {num_rows} rows",
            bytes.len() - cur.pos
        )));
    }
    ColumnVector::new(data, validity)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn int64_with_null() {
        let v = ColumnVector::int64(vec![Some(1), None, Some(3)]);
        let bytes = encode_chunk(&v).unwrap();
        let mut expected = vec![0x05];
        expected.extend_from_slice(&1i64.to_le_bytes());
        expected.extend_from_slice(&[0; 8]);
        expected.extend_from_slice(&3i64.to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), 25);
    }

    #[test]
    fn empty_vector_encodes_to_nothing() {
        for ty in [ColumnType::Int64, ColumnType::String, ColumnType::Bool] {
            let v = ColumnVector::empty(ty);
            let bytes = encode_chunk(&v).unwrap();
            assert!(bytes.is_empty());
            assert_eq!(decode_chunk(&bytes, ty, 0).unwrap(), v);
        }
    }

    #[test]
    fn string_layout() {
        let v = ColumnVector::string(vec![Some("ab")]);
        assert_eq!(encode_chunk(&v).unwrap(), vec![0x01, 2, 0, 0, 0, 0x61, 0x62]);
    }

    #[test]
    fn null_placeholder_is_zero_on_the_wire() {
        let v = ColumnVector::new(ColumnData::String(vec!["secret".into()]), vec![false]).unwrap();
        assert_eq!(encode_chunk(&v).unwrap(), vec![0x00, 0, 0, 0, 0]);
        let b = ColumnVector::new(ColumnData::Bool(vec![true]), vec![false]).unwrap();
        assert_eq!(encode_chunk(&b).unwrap(), vec![0x00, 0x00]);
    }

    #[test]
    fn thousand_row_int64_round_trip() {
        let v = ColumnVector::int64((0..1000i64).map(|i| (i % 7 != 0).then_some(i * 1_000_003)).collect());
        let bytes = encode_chunk(&v).unwrap();
        assert_eq!(decode_chunk(&bytes, ColumnType::Int64, 1000).unwrap(), v);
        assert!(matches!(
            decode_chunk(&bytes[..bytes.len() - 1], ColumnType::Int64, 1000),
            Err(Error::Decoding(_))
        ));
    }

    #[test]
    fn decode_errors() {
        let v = ColumnVector::string(vec![Some(""), Some("x"), None, Some("")]);
        let bytes = encode_chunk(&v).unwrap();
        assert_eq!(decode_chunk(&bytes, ColumnType::String, 4).unwrap(), v);

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            decode_chunk(&trailing, ColumnType::String, 4),
            Err(Error::Decoding(_))
        ));

        let bad_utf8 = vec![0x01, 1, 0, 0, 0, 0xFF];
        assert!(matches!(
            decode_chunk(&bad_utf8, ColumnType::String, 1),
            Err(Error::Decoding(_))
        ));

        let bad_bool = vec![0x01, 0x02];
        assert!(matches!(
            decode_chunk(&bad_bool, ColumnType::Bool, 1),
            Err(Error::Decoding(_))
        ));

        let huge_len = vec![0x01, 0xFF, 0xFF, 0xFF, 0xFF];
        assert!(matches!(
            decode_chunk(&huge_len, ColumnType::String, 1),
            Err(Error::Decoding(_))
        ));
    }

    fn arb_vector() -> impl Strategy<Value = ColumnVector> {
        let n = 0usize..200;
        prop_oneof![
            proptest::collection::vec(proptest::option::of(any::<i64>()), n.clone()).prop_map(ColumnVector::int64),
            proptest::collection::vec(proptest::option::of(any::<i64>()), n.clone()).prop_map(ColumnVector::date),
            proptest::collection::vec(proptest::option::of(any::<f64>()), n.clone()).prop_map(ColumnVector::double),
            proptest::collection::vec(proptest::option::of(any::<bool>()), n.clone()).prop_map(ColumnVector::bool),
            proptest::collection::vec(proptest::option::of(".{0,12}"), n).prop_map(ColumnVector::string),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(v in arb_vector()) {
            let bytes = encode_chunk(&v).unwrap();
            let back = decode_chunk(&bytes, v.column_type(), v.len()).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
