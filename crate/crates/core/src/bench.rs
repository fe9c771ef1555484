//! Desk-scale benchmark: misuse query plus result persistence over plaintext,
//! single-wrapped and double-wrapped copies of the same generated data.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::emrgen::{self, GenConfig, TableEncryption, WriteOptions, TABLE_NAMES};
use crate::error::{Error, Result};
use crate::keytools::{KekCache, KeyManager, KeyResolver, WrapMode};
use crate::kms::{InMemoryKms, InstrumentedKms, KeyStore, KmsClient, LatencyModel};
use crate::query::{self, EmrFiles, MisuseQueryParams, RESULT_TABLE};

pub const CSV_HEADER: &str = "mode,patients,rtt_ms,run,elapsed_ms,kms_wrap_calls,kms_unwrap_calls,overhead_pct";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Plain,
    Single,
    Double,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::Plain, BenchMode::Single, BenchMode::Double];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Plain => "plain",
            BenchMode::Single => "single",
            BenchMode::Double => "double",
        }
    }

    fn wrap_mode(self) -> Option<WrapMode> {
        match self {
            BenchMode::Plain => None,
            BenchMode::Single => Some(WrapMode::Single),
            BenchMode::Double => Some(WrapMode::Double),
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(BenchMode::Plain),
            "single" => Ok(BenchMode::Single),
            "double" => Ok(BenchMode::Double),
            other => Err(Error::Config(format!(
                "unknown mode '{other}', expected plain, single or double"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub patient_sizes: Vec<u32>,
    pub modes: Vec<BenchMode>,
    /// Injected per-call KMS round trip.
    pub rtt: Duration,
    pub repetitions: u32,
    pub kek_ttl: Duration,
    pub row_groups: usize,
    pub seed: u64,
    /// Where datasets and outputs go; a temporary directory when unset.
    pub work_dir: Option<PathBuf>,
    pub out_csv: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            patient_sizes: vec![1000],
            modes: BenchMode::ALL.to_vec(),
            rtt: Duration::from_millis(50),
            repetitions: 3,
            kek_ttl: crate::keytools::DEFAULT_TTL,
            row_groups: 4,
            seed: 42,
            work_dir: None,
            out_csv: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.patient_sizes.is_empty() {
            return Err(Error::Config("at least one patient size is required".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("at least one mode is required".into()));
        }
        let mut modes = self.modes.clone();
        modes.sort();
        modes.dedup();
        if modes.len() != self.modes.len() {
            return Err(Error::Config("modes must not repeat".into()));
        }
        if self.row_groups == 0 {
            return Err(Error::Config("row groups must be >= 1".into()));
        }
        Ok(())
    }
}

/// One measured run; the CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mode: BenchMode,
    pub patients: u32,
    pub rtt_ms: u64,
    pub run: u32,
    pub elapsed_ms: f64,
    pub kms_wrap_calls: u64,
    pub kms_unwrap_calls: u64,
    /// Cell mean versus plain cell mean, in percent. Empty for plain runs and
    /// when no plain cell was measured.
    pub overhead_pct: Option<f64>,
}

/// Per-run facts that are not part of the CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDetail {
    pub injected_latency: Duration,
    pub result_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchFailure {
    pub mode: BenchMode,
    pub patients: u32,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    /// Aligned with `records`.
    pub details: Vec<RunDetail>,
    pub failures: Vec<BenchFailure>,
}

impl BenchReport {
    /// Mean elapsed time per (patients, mode).
    pub fn cell_means(&self) -> BTreeMap<(u32, BenchMode), f64> {
        let mut sums: BTreeMap<(u32, BenchMode), (f64, u32)> = BTreeMap::new();
        for r in &self.records {
            let e = sums.entry((r.patients, r.mode)).or_default();
            e.0 += r.elapsed_ms;
            e.1 += 1;
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / f64::from(n))).collect()
    }
}

/// Serial key-retrieval bound for double wrapping: one KMS round trip per
/// master key of every table read and written.
pub fn cost_upper_bound(n_read_tables: u32, n_keys_per_table: u32, n_write_tables: u32, rtt: Duration) -> Duration {
    rtt * (n_read_tables * n_keys_per_table + n_write_tables * n_keys_per_table)
}

/// Master keys the query pipeline touches: three per input table and three for the result.
pub fn required_master_keys() -> Vec<String> {
    TABLE_NAMES
        .iter()
        .chain([RESULT_TABLE].iter())
        .flat_map(|t| emrgen::master_key_ids(t))
        .collect()
}

const BENCH_ADMIN: &str = "bench-admin";
const BENCH_TOKEN: &str = "bench-reader";

struct Harness {
    config: BenchConfig,
    store: Arc<KeyStore>,
    work_dir: PathBuf,
}

impl Harness {
    fn dataset_dir(&self, patients: u32, mode: BenchMode) -> PathBuf {
        self.work_dir.join(format!("data-{patients}")).join(mode.as_str())
    }

    fn client(&self) -> Arc<dyn KmsClient> {
        Arc::new(InMemoryKms::new(self.store.clone(), BENCH_TOKEN))
    }

    fn prepare(&self, patients: u32) -> Result<()> {
        let tables = emrgen::generate(&GenConfig::new(patients, self.config.seed))?;
        for &mode in &self.config.modes {
            let dir = self.dataset_dir(patients, mode);
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            let encryption = mode.wrap_mode().map(|m| TableEncryption {
                mode: m,
                keys: Arc::new(KeyManager::with_ttl(self.client(), self.config.kek_ttl)),
            });
            let opts = WriteOptions {
                row_groups: self.config.row_groups,
                encryption,
            };
            emrgen::write_tables(&tables, &opts, &dir)?;
        }
        Ok(())
    }

    /// Query plus persist with a cold cache and fresh counters.
    fn measure(&self, patients: u32, mode: BenchMode, run: u32) -> Result<(BenchRecord, RunDetail)> {
        let kms = Arc::new(InstrumentedKms::new(
            self.client(),
            LatencyModel::fixed(self.config.rtt),
        ));
        let keys = Arc::new(KeyManager::new(
            kms.clone(),
            Arc::new(KekCache::new(self.config.kek_ttl)),
        ));
        let out = self
            .work_dir
            .join("out")
            .join(format!("{patients}-{mode}-{run}.{}", emrgen::FILE_EXTENSION));
        let encryption = mode.wrap_mode().map(|m| TableEncryption {
            mode: m,
            keys: keys.clone(),
        });
        let resolver = encryption.as_ref().map(|_| keys.as_ref() as &dyn KeyResolver);

        let start = Instant::now();
        let files = EmrFiles::discover(&self.dataset_dir(patients, mode))?;
        let result = query::misuse_query(&files, &MisuseQueryParams::default(), resolver)?;
        let enc = encryption.as_ref().map(|e| e.config_for(RESULT_TABLE));
        query::persist_result(&result, enc.as_ref(), &out)?;
        let elapsed = start.elapsed();

        let stats = kms.stats();
        Ok((
            BenchRecord {
                mode,
                patients,
                rtt_ms: self.config.rtt.as_millis() as u64,
                run,
                elapsed_ms: elapsed.as_secs_f64() * 1e3,
                kms_wrap_calls: stats.wrap_calls,
                kms_unwrap_calls: stats.unwrap_calls,
                overhead_pct: None,
            },
            RunDetail {
                injected_latency: stats.total_injected_latency,
                result_rows: result.len(),
            },
        ))
    }
}

/// Runs every (size, mode) cell: one discarded warm-up, then `repetitions`
/// measured runs interleaved across modes. A failing cell is recorded and
/// skipped; the rest of the experiment continues.
pub fn run_experiment(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let temp;
    let work_dir = match &config.work_dir {
        Some(d) => d.clone(),
        None => {
            temp = tempfile::tempdir()?;
            temp.path().to_path_buf()
        }
    };
    fs::create_dir_all(work_dir.join("out"))?;

    let store = Arc::new(KeyStore::new(BENCH_ADMIN));
    for id in required_master_keys() {
        store.create_master_key(BENCH_ADMIN, &id, [BENCH_TOKEN])?;
    }
    let harness = Harness {
        config: config.clone(),
        store,
        work_dir,
    };

    let mut report = BenchReport::default();
    let mut measured: Vec<(BenchRecord, RunDetail)> = Vec::new();
    for &patients in &config.patient_sizes {
        harness.prepare(patients)?;
        let mut failed: Vec<BenchMode> = Vec::new();
        let mut fail = |mode: BenchMode, e: Error, failed: &mut Vec<BenchMode>| {
            failed.push(mode);
            report.failures.push(BenchFailure {
                mode,
                patients,
                error: e.to_string(),
            });
        };
        for &mode in &config.modes {
            if let Err(e) = harness.measure(patients, mode, 0) {
                fail(mode, e, &mut failed);
            }
        }
        for run in 0..config.repetitions {
            for &mode in &config.modes {
                if failed.contains(&mode) {
                    continue;
                }
                match harness.measure(patients, mode, run) {
                    Ok(m) => measured.push(m),
                    Err(e) => fail(mode, e, &mut failed),
                }
            }
        }
        measured.retain(|(r, _)| r.patients != patients || !failed.contains(&r.mode));
    }

    measured.sort_by_key(|(r, _)| (r.patients, r.mode, r.run));
    let (records, details): (Vec<_>, Vec<_>) = measured.into_iter().unzip();
    report.records = records;
    report.details = details;
    let means = report.cell_means();
    for r in report.records.iter_mut().filter(|r| r.mode != BenchMode::Plain) {
        r.overhead_pct = means
            .get(&(r.patients, BenchMode::Plain))
            .zip(means.get(&(r.patients, r.mode)))
            .map(|(plain, mean)| (mean - plain) / plain * 100.0);
    }

    if let Some(path) = &config.out_csv {
        emit_csv(&report.records, path)?;
    }
    Ok(report)
}

pub fn write_csv<W: Write>(records: &[BenchRecord], sink: W) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Encoding(e.to_string());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
    w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_csv(records, fs::File::create(path)?)
}

pub fn read_csv<R: Read>(source: R) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_reader(source);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Decoding(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Decoding(format!("unexpected header {header:?}")));
    }
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::Decoding(e.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Largest tolerated |overhead| of an encrypted mode when the KMS is local.
pub const LOCAL_OVERHEAD_LIMIT_PCT: f64 = 15.0;

/// Bound law for every double-mode run, and the ordering law per size
/// (strict single > double > plain when rtt >= 50ms, bounded overhead when rtt = 0).
pub fn check_invariants(report: &BenchReport, config: &BenchConfig) -> Vec<InvariantCheck> {
    let mut checks = Vec::new();
    let bound = cost_upper_bound(TABLE_NAMES.len() as u32, 3, 1, config.rtt);
    for (r, d) in report.records.iter().zip(&report.details) {
        if r.mode == BenchMode::Double {
            checks.push(InvariantCheck {
                name: format!("bound/{}/run{}", r.patients, r.run),
                passed: d.injected_latency <= bound,
                detail: format!(
                    "injected {} ms <= bound {} ms",
                    d.injected_latency.as_millis(),
                    bound.as_millis()
                ),
            });
        }
    }

    let means = report.cell_means();
    let rtt_ms = config.rtt.as_millis();
    for &patients in &config.patient_sizes {
        let mean = |m| means.get(&(patients, m)).copied();
        if rtt_ms >= 50 {
            if let (Some(p), Some(s), Some(d)) =
                (mean(BenchMode::Plain), mean(BenchMode::Single), mean(BenchMode::Double))
            {
                checks.push(InvariantCheck {
                    name: format!("ordering/{patients}"),
                    passed: s > d && d > p,
                    detail: format!("single {s:.1} ms > double {d:.1} ms > plain {p:.1} ms"),
                });
            }
        } else if rtt_ms == 0 {
            let Some(p) = mean(BenchMode::Plain) else { continue };
            for m in [BenchMode::Single, BenchMode::Double] {
                if let Some(x) = mean(m) {
                    let pct = (x - p) / p * 100.0;
                    checks.push(InvariantCheck {
                        name: format!("local-overhead/{patients}/{m}"),
                        passed: pct.abs() <= LOCAL_OVERHEAD_LIMIT_PCT,
                        detail: format!("|{pct:.1}%| <= {LOCAL_OVERHEAD_LIMIT_PCT}%"),
                    });
                }
            }
        }
    }
    for f in &report.failures {
        checks.push(InvariantCheck {
            name: format!("cell/{}/{}", f.patients, f.mode),
            passed: false,
            detail: f.error.clone(),
        });
    }
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_formula() {
        let ms = Duration::from_millis;
        assert_eq!(cost_upper_bound(4, 3, 1, ms(470)), ms(7050));
        assert_eq!(cost_upper_bound(0, 3, 0, ms(470)), Duration::ZERO);
        assert_eq!(cost_upper_bound(4, 3, 1, ms(50)), ms(750));
    }

    #[test]
    fn csv_round_trip() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().trim_end(), CSV_HEADER);
        assert!(read_csv(buf.as_slice()).unwrap().is_empty());

        let records = vec![
            BenchRecord {
                mode: BenchMode::Plain,
                patients: 1000,
                rtt_ms: 50,
                run: 0,
                elapsed_ms: 12.345678,
                kms_wrap_calls: 0,
                kms_unwrap_calls: 0,
                overhead_pct: Some(0.1),
            },
            BenchRecord {
                mode: BenchMode::Double,
                patients: 1000,
                rtt_ms: 50,
                run: 2,
                elapsed_ms: 801.5,
                kms_wrap_calls: 3,
                kms_unwrap_calls: 12,
                overhead_pct: None,
            },
        ];
        let mut buf = Vec::new();
        write_csv(&records, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn config_validation() {
        assert!(BenchConfig::default().validate().is_ok());
        let bad = BenchConfig {
            repetitions: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = BenchConfig {
            modes: vec![BenchMode::Plain, BenchMode::Plain],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("double".parse::<BenchMode>().unwrap(), BenchMode::Double);
        assert!("triple".parse::<BenchMode>().is_err());
    }

    #[test]
    fn small_experiment_counts() {
        let config = BenchConfig {
            patient_sizes: vec![100],
            rtt: Duration::ZERO,
            repetitions: 2,
            ..Default::default()
        };
        let report = run_experiment(&config).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert_eq!(report.records.len(), 6);
        for r in &report.records {
            match r.mode {
                BenchMode::Plain => assert_eq!((r.kms_wrap_calls, r.kms_unwrap_calls), (0, 0)),
                BenchMode::Double => assert_eq!((r.kms_wrap_calls, r.kms_unwrap_calls), (3, 12)),
                BenchMode::Single => assert!(r.kms_unwrap_calls > 12),
            }
            assert_eq!(r.overhead_pct.is_some(), r.mode != BenchMode::Plain);
        }
        let rows: Vec<usize> = report.details.iter().map(|d| d.result_rows).collect();
        assert!(rows.windows(2).all(|w| w[0] == w[1]));
    }
}
