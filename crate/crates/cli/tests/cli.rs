use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

const BIN: &str = env!("CARGO_BIN_EXE_ccf");
const ADMIN: &str = "cli-admin";
const READER: &str = "cli-reader";

fn ccf(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("CCF_KMS_TOKEN")
        .env_remove("CCF_KMS_ADMIN_TOKEN")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn csv_rows(out: &Output) -> Vec<Vec<String>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(out.stdout.as_slice())
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for table in std::fs::read_dir(dir).unwrap() {
        let table = table.unwrap().path();
        if table.is_dir() {
            for f in std::fs::read_dir(&table).unwrap() {
                out.push(f.unwrap().path());
            }
        }
    }
    out.sort();
    out
}

/// `ccf kms serve` on an ephemeral port, killed on drop.
struct Server {
    child: Child,
    url: String,
}

impl Server {
    fn start() -> Self {
        let mut child = Command::new(BIN)
            .args(["kms", "serve", "--port", "0", "--admin-token", ADMIN])
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
        assert_eq!(lines.next().unwrap().unwrap(), "url");
        let url = lines.next().unwrap().unwrap();
        Server { child, url }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn gen_writes_four_tables_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = ccf(&[
            "gen",
            "--patients",
            "100",
            "--seed",
            "1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let rows = csv_rows(&o);
        assert_eq!(rows[0], vec!["table", "rows"]);
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[1], vec!["patients", "100"]);
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert_eq!(fa.len(), 4);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ccf(&["gen", "--patients", "10", "--out", out, "--encrypt"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--kms"));
    assert_eq!(
        code(&ccf(&["gen", "--patients", "10", "--out", out, "--bias", "Sepsis"])),
        2
    );
    assert_eq!(code(&ccf(&["bench", "--modes", "triple"])), 2);
    assert_eq!(code(&ccf(&["bench", "--reps", "0"])), 2);
    assert_eq!(code(&ccf(&["query", "--data", out, "--out", "r.ccf", "--drug", ""])), 2);
    // --kms without a token.
    assert_eq!(code(&ccf(&["read", "x.ccf", "--kms", "http://127.0.0.1:1"])), 2);
}

#[test]
fn read_and_query_plaintext() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(
        code(&ccf(&[
            "gen",
            "--patients",
            "300",
            "--seed",
            "4",
            "--out",
            data.to_str().unwrap()
        ])),
        0
    );

    let file = data.join("prescriptions").join("part-00000.ccf");
    let o = ccf(&["read", file.to_str().unwrap(), "--columns", "patient_id,drug"]);
    assert_eq!(code(&o), 0);
    let rows = csv_rows(&o);
    assert_eq!(rows[0], vec!["patient_id", "drug"]);
    assert!(rows.len() > 300);

    let count = |k: &str| -> u64 {
        let out = dir.path().join(format!("r{k}.ccf"));
        let o = ccf(&[
            "query",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--window-days",
            k,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let rows = csv_rows(&o);
        assert_eq!(rows[0], vec!["rows", "elapsed_ms"]);
        assert!(out.exists());
        rows[1][0].parse().unwrap()
    };
    assert!(count("0") >= count("2"));

    let o = ccf(&[
        "query",
        "--data",
        dir.path().join("empty").to_str().unwrap(),
        "--out",
        "x.ccf",
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no input files"));
}

#[test]
fn bench_csv_and_check() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("b.csv");
    let o = ccf(&[
        "bench",
        "--sizes",
        "200",
        "--modes",
        "plain",
        "--rtt-ms",
        "0",
        "--reps",
        "1",
        "--csv",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "mode,patients,rtt_ms,run,elapsed_ms,kms_wrap_calls,kms_unwrap_calls,overhead_pct"
    );
    let row = lines.next().unwrap();
    assert!(row.starts_with("plain,200,0,0,") && row.ends_with(",0,0,"), "{row}");

    let o = ccf(&[
        "bench",
        "--sizes",
        "100",
        "--modes",
        "single,double",
        "--rtt-ms",
        "5",
        "--reps",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&o);
    assert!(rows[1..]
        .iter()
        .any(|r| r[0] == "double" && r[5] == "3" && r[6] == "12"));
}

#[test]
fn kms_end_to_end() {
    let server = Server::start();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("enc");
    let url = server.url.as_str();

    let keygen = |id: &str| {
        ccf(&[
            "kms",
            "keygen",
            "--kms",
            url,
            "--key-id",
            id,
            "--allow",
            READER,
            "--admin-token",
            ADMIN,
        ])
    };
    for table in ["patients", "encounters", "conditions", "prescriptions", "result"] {
        for kind in ["sensitive", "other", "footer"] {
            assert_eq!(code(&keygen(&format!("{table}.{kind}"))), 0);
        }
    }
    assert_eq!(code(&keygen("patients.footer")), 1);

    let o = ccf(&[
        "gen",
        "--patients",
        "150",
        "--out",
        data.to_str().unwrap(),
        "--encrypt",
        "--mode",
        "double",
        "--kms",
        url,
        "--token",
        READER,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let file = data.join("conditions").join("part-00000.ccf");
    let read = |token: &str| {
        ccf(&[
            "read",
            file.to_str().unwrap(),
            "--columns",
            "description",
            "--kms",
            url,
            "--token",
            token,
        ])
    };
    assert_eq!(code(&read(READER)), 0);
    assert_eq!(code(&read("stranger")), 3);
    // Encrypted file without keys.
    assert_eq!(code(&ccf(&["read", file.to_str().unwrap()])), 2);

    let mut bytes = std::fs::read(&file).unwrap();
    bytes[20] ^= 0x40;
    let tampered = dir.path().join("tampered.ccf");
    std::fs::write(&tampered, bytes).unwrap();
    let o = ccf(&["read", tampered.to_str().unwrap(), "--kms", url, "--token", READER]);
    assert_eq!(code(&o), 4);
    assert!(o.stdout.is_empty());
    assert!(!o.stderr.is_empty());

    let result = dir.path().join("result.ccf");
    let query = || {
        ccf(&[
            "query",
            "--data",
            data.to_str().unwrap(),
            "--out",
            result.to_str().unwrap(),
            "--kms",
            url,
            "--token",
            READER,
            "--ttl",
            "1",
        ])
    };
    let o = query();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = ccf(&["read", result.to_str().unwrap(), "--kms", url, "--token", READER]);
    assert_eq!(code(&r), 0);
    assert_eq!(
        csv_rows(&r).len() as u64 - 1,
        csv_rows(&o)[1][0].parse::<u64>().unwrap()
    );

    let o = ccf(&[
        "kms",
        "revoke",
        "--kms",
        url,
        "--key-id",
        "prescriptions.sensitive",
        "--token",
        READER,
        "--admin-token",
        ADMIN,
    ]);
    assert_eq!(code(&o), 0);
    std::thread::sleep(Duration::from_millis(1100));
    assert_eq!(code(&query()), 3);
}

#[test]
fn gen_creates_missing_keys_with_admin_token() {
    let server = Server::start();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("enc");
    let o = Command::new(BIN)
        .args([
            "gen",
            "--patients",
            "40",
            "--out",
            data.to_str().unwrap(),
            "--encrypt",
            "--mode",
            "single",
            "--kms",
        ])
        .arg(&server.url)
        .env("CCF_KMS_TOKEN", READER)
        .env("CCF_KMS_ADMIN_TOKEN", ADMIN)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files_under(&data).len(), 4);
    let file = data.join("patients").join("part-00000.ccf");
    let o = Command::new(BIN)
        .args(["read", file.to_str().unwrap(), "--kms", &server.url])
        .env("CCF_KMS_TOKEN", READER)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 41);
}
