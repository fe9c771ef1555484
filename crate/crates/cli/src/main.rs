//! `ccf`: generate EMR datasets, read and query encrypted files, benchmark,
//! and run or administer the HTTP KMS.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 access denied,
//! 4 integrity failure, 5 benchmark check failure.

use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ccf_core::bench::{self, BenchConfig, BenchMode};
use ccf_core::emrgen::{self, GenConfig, TableEncryption, WriteOptions};
use ccf_core::format;
use ccf_core::keytools::{KeyManager, KeyResolver, WrapMode};
use ccf_core::kms::{self, HttpKmsClient, KeyStore, KmsClient};
use ccf_core::query::{self, EmrFiles, MisuseQueryParams, RESULT_TABLE};
use ccf_core::Error;
use clap::{Args, Parser, Subcommand};

const ADMIN_TOKEN_ENV: &str = "CCF_KMS_ADMIN_TOKEN";

#[derive(Parser)]
#[command(name = "ccf", version, about = "Columnar encryption toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic EMR dataset.
    Gen(GenArgs),
    /// Print projected columns of one file as CSV.
    Read(ReadArgs),
    /// Run the drug misuse query and persist its result.
    Query(QueryArgs),
    /// Benchmark the query over plaintext, single- and double-wrapped data.
    Bench(BenchArgs),
    /// Run or administer the HTTP KMS.
    Kms {
        #[command(subcommand)]
        command: KmsCommand,
    },
}

#[derive(Args)]
struct KmsAccess {
    /// KMS base URL, e.g. http://127.0.0.1:8200.
    #[arg(long)]
    kms: Option<String>,
    #[arg(long, env = kms::TOKEN_ENV, hide_env_values = true)]
    token: Option<String>,
    /// KEK cache lifetime in seconds.
    #[arg(long, default_value_t = 600)]
    ttl: u64,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    patients: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Condition weight multipliers, e.g. "Otitis media=2,Sinusitis=0.5".
    #[arg(long)]
    bias: Option<String>,
    /// Split output into this many daily upload batches.
    #[arg(long)]
    batch_days: Option<u32>,
    #[arg(long, default_value_t = 4)]
    row_groups: usize,
    #[arg(long, requires = "kms")]
    encrypt: bool,
    #[arg(long, default_value = "double", requires = "encrypt")]
    mode: WrapMode,
    /// Creates any missing master keys when given.
    #[arg(long, env = ADMIN_TOKEN_ENV, hide_env_values = true)]
    admin_token: Option<String>,
    #[command(flatten)]
    access: KmsAccess,
}

#[derive(Args)]
struct ReadArgs {
    file: PathBuf,
    /// Comma-separated projection; all columns when omitted.
    #[arg(long)]
    columns: Option<String>,
    #[command(flatten)]
    access: KmsAccess,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "Amoxicillin")]
    drug: String,
    /// Semicolon-separated excluded conditions.
    #[arg(long)]
    exclude: Option<String>,
    #[arg(long, default_value_t = 2)]
    window_days: i64,
    #[arg(long)]
    out: PathBuf,
    /// Wrap mode for the persisted result when --kms is given.
    #[arg(long, default_value = "double")]
    mode: WrapMode,
    /// Writes the result unencrypted even with --kms.
    #[arg(long)]
    plain_result: bool,
    #[arg(long, env = ADMIN_TOKEN_ENV, hide_env_values = true)]
    admin_token: Option<String>,
    #[command(flatten)]
    access: KmsAccess,
}

#[derive(Args)]
struct BenchArgs {
    /// Patient counts, e.g. "1k,5k".
    #[arg(long, default_value = "1k")]
    sizes: String,
    #[arg(long, default_value = "plain,single,double")]
    modes: String,
    #[arg(long, default_value_t = 50)]
    rtt_ms: u64,
    #[arg(long, default_value_t = 3)]
    reps: u32,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Enforce the bound and ordering laws; exit 5 on violation.
    #[arg(long)]
    check: bool,
    #[arg(long, default_value_t = 600)]
    ttl: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    row_groups: usize,
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum KmsCommand {
    /// Serve the KMS over HTTP until interrupted. Prints the base URL.
    Serve {
        #[arg(long, default_value_t = 8200)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: std::net::IpAddr,
        #[arg(long, env = ADMIN_TOKEN_ENV, hide_env_values = true)]
        admin_token: String,
    },
    /// Create a master key.
    Keygen {
        #[arg(long)]
        kms: String,
        #[arg(long)]
        key_id: String,
        /// Comma-separated client tokens allowed to use the key.
        #[arg(long)]
        allow: String,
        #[arg(long, env = ADMIN_TOKEN_ENV, hide_env_values = true)]
        admin_token: String,
    },
    /// Remove a client token from a key's access list.
    Revoke {
        #[arg(long)]
        kms: String,
        #[arg(long)]
        key_id: String,
        #[arg(long)]
        token: String,
        #[arg(long, env = ADMIN_TOKEN_ENV, hide_env_values = true)]
        admin_token: String,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Core(Error::Encoding(e.to_string()))
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) => 5,
            Failure::Core(e) => match e {
                Error::AccessDenied(_) | Error::Unauthorized => 3,
                Error::Integrity(_)
                | Error::MalformedBlob(_)
                | Error::MalformedKeyMaterial(_)
                | Error::NotAColumnarFile(_)
                | Error::Decoding(_) => 4,
                Error::Config(_) | Error::Projection(_) => 2,
                _ => 1,
            },
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Read(a) => cmd_read(a),
        Command::Query(a) => cmd_query(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Kms { command } => cmd_kms(command),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Check(m) => eprintln!("check failed: {m}"),
                Failure::Core(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn split_list(s: &str, sep: char) -> Vec<String> {
    s.split(sep)
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(str::to_string)
        .collect()
}

impl KmsAccess {
    /// A key manager when --kms is set.
    fn key_manager(&self) -> Result<Option<(Arc<KeyManager>, String, String)>, Failure> {
        let Some(url) = &self.kms else { return Ok(None) };
        let token = self
            .token
            .clone()
            .ok_or_else(|| Failure::Usage(format!("--kms needs --token or {}", kms::TOKEN_ENV)))?;
        let client: Arc<dyn KmsClient> = Arc::new(HttpKmsClient::new(url.clone(), token.clone())?);
        let keys = KeyManager::with_ttl(client, Duration::from_secs(self.ttl));
        Ok(Some((Arc::new(keys), url.clone(), token)))
    }
}

/// Creates the three master keys of each table that do not exist yet.
fn ensure_keys(url: &str, admin_token: &str, reader: &str, tables: &[&str]) -> CmdResult {
    let admin = HttpKmsClient::new(url, admin_token)?;
    for table in tables {
        for id in emrgen::master_key_ids(table) {
            match admin.create_master_key(admin_token, &id, &[reader.to_string()]) {
                Ok(()) | Err(Error::DuplicateKey(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(())
}

fn parse_bias(spec: &str, config: &mut GenConfig) -> CmdResult {
    for item in split_list(spec, ',') {
        let (name, weight) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("bias entry '{item}' is not name=weight")))?;
        let weight: f64 = weight
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("bias weight '{weight}' is not a number")))?;
        config.bias.insert(name.trim().to_string(), weight);
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let mut config = GenConfig::new(a.patients, a.seed);
    if let Some(b) = &a.bias {
        parse_bias(b, &mut config)?;
    }
    config.batch_days = a.batch_days;
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if a.row_groups == 0 {
        return Err(Failure::Usage("--row-groups must be >= 1".into()));
    }

    let mut opts = WriteOptions {
        row_groups: a.row_groups,
        encryption: None,
    };
    if a.encrypt {
        let (keys, url, token) = a.access.key_manager()?.expect("--encrypt requires --kms");
        if let Some(admin) = &a.admin_token {
            ensure_keys(&url, admin, &token, &emrgen::TABLE_NAMES)?;
        }
        opts.encryption = Some(TableEncryption { mode: a.mode, keys });
    }

    let tables = emrgen::generate(&config)?;
    emrgen::write_batches(&tables, &config, &opts, &a.out)?;

    let mut out = csv::Writer::from_writer(io::stdout().lock());
    out.write_record(["table", "rows"])?;
    for (name, table) in tables.iter() {
        out.write_record([name, &table.num_rows().to_string()])?;
    }
    out.flush()?;
    Ok(())
}

fn resolver_of(keys: &Option<(Arc<KeyManager>, String, String)>) -> Option<&dyn KeyResolver> {
    keys.as_ref().map(|(k, _, _)| k.as_ref() as &dyn KeyResolver)
}

fn cmd_read(a: ReadArgs) -> CmdResult {
    let keys = a.access.key_manager()?;
    let resolver = resolver_of(&keys);
    let mut source = format::open(&a.file)?;
    let footer = format::read_footer(&mut source, resolver)?;
    let names: Vec<String> = match &a.columns {
        Some(c) => split_list(c, ','),
        None => footer.schema.column_names().map(str::to_string).collect(),
    };
    let projection: Vec<&str> = names.iter().map(String::as_str).collect();
    // Decrypt everything before printing so a failure emits no partial CSV.
    let groups = format::read_columns(&mut source, &footer, &projection, resolver)?;

    let mut out = csv::Writer::from_writer(io::stdout().lock());
    out.write_record(&projection)?;
    for g in &groups {
        for r in 0..g.num_rows as usize {
            out.write_record(g.columns.iter().map(|c| emrgen::render_value(&c.value(r))))?;
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_query(a: QueryArgs) -> CmdResult {
    let params = MisuseQueryParams {
        drug: a.drug.clone(),
        excluded_conditions: match &a.exclude {
            Some(e) => split_list(e, ';').into_iter().collect(),
            None => MisuseQueryParams::default().excluded_conditions,
        },
        window_extension_days: a.window_days,
    };
    params.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let keys = a.access.key_manager()?;
    if let (Some((_, url, token)), Some(admin)) = (&keys, &a.admin_token) {
        ensure_keys(url, admin, token, &[RESULT_TABLE])?;
    }

    let start = Instant::now();
    let files = EmrFiles::discover(&a.data)?;
    let result = query::misuse_query(&files, &params, resolver_of(&keys))?;
    let enc = match (&keys, a.plain_result) {
        (Some((k, _, _)), false) => Some(
            TableEncryption {
                mode: a.mode,
                keys: k.clone(),
            }
            .config_for(RESULT_TABLE),
        ),
        _ => None,
    };
    query::persist_result(&result, enc.as_ref(), &a.out)?;
    let elapsed = start.elapsed();

    let mut out = csv::Writer::from_writer(io::stdout().lock());
    out.write_record(["rows", "elapsed_ms"])?;
    out.write_record([result.len().to_string(), format!("{:.3}", elapsed.as_secs_f64() * 1e3)])?;
    out.flush()?;
    Ok(())
}

fn parse_size(s: &str) -> Result<u32, Failure> {
    let bad = || Failure::Usage(format!("invalid size '{s}'"));
    let (digits, scale) = match s.strip_suffix(['k', 'K']) {
        Some(d) => (d, 1000),
        None => (s, 1),
    };
    digits
        .parse::<u32>()
        .ok()
        .and_then(|n| n.checked_mul(scale))
        .ok_or_else(bad)
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let config = BenchConfig {
        patient_sizes: split_list(&a.sizes, ',')
            .iter()
            .map(|s| parse_size(s))
            .collect::<Result<_, _>>()?,
        modes: split_list(&a.modes, ',')
            .iter()
            .map(|m| m.parse::<BenchMode>())
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::Usage(e.to_string()))?,
        rtt: Duration::from_millis(a.rtt_ms),
        repetitions: a.reps,
        kek_ttl: Duration::from_secs(a.ttl),
        row_groups: a.row_groups,
        seed: a.seed,
        work_dir: a.work_dir.clone(),
        out_csv: a.csv.clone(),
    };
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let report = bench::run_experiment(&config)?;
    for f in &report.failures {
        eprintln!("cell {} patients / {} failed: {}", f.patients, f.mode, f.error);
    }
    if a.csv.is_none() {
        bench::write_csv(&report.records, io::stdout().lock())?;
    }

    if a.check {
        let checks = bench::check_invariants(&report, &config);
        let mut failed = Vec::new();
        for c in &checks {
            eprintln!("[{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
            if !c.passed {
                failed.push(c.name.clone());
            }
        }
        if !failed.is_empty() {
            return Err(Failure::Check(failed.join(", ")));
        }
    }
    Ok(())
}

fn cmd_kms(command: KmsCommand) -> CmdResult {
    match command {
        KmsCommand::Serve {
            port,
            bind,
            admin_token,
        } => {
            let server = kms::serve_http(Arc::new(KeyStore::new(admin_token)), SocketAddr::new(bind, port))?;
            let mut out = io::stdout().lock();
            writeln!(out, "url")?;
            writeln!(out, "{}", server.base_url())?;
            out.flush()?;
            drop(out);
            server.wait()?;
        }
        KmsCommand::Keygen {
            kms,
            key_id,
            allow,
            admin_token,
        } => {
            HttpKmsClient::new(kms, admin_token.clone())?.create_master_key(
                &admin_token,
                &key_id,
                &split_list(&allow, ','),
            )?;
        }
        KmsCommand::Revoke {
            kms,
            key_id,
            token,
            admin_token,
        } => {
            HttpKmsClient::new(kms, admin_token.clone())?.revoke_access(&admin_token, &key_id, &token)?;
        }
    }
    Ok(())
}
