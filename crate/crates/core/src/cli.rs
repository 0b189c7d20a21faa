//! Operator command line. All output is line-oriented and tab-separated.
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::db::{Microdb, Options, DATA_DIR_ENV};
use crate::error::{Error, Result};
use crate::eventbus::{SubscriptionFilter, TxnKind};
use crate::harness::{run_scenario, ScenarioReport};
use crate::pattern::Pattern;
use crate::registry::Manifest;
use crate::security::{Principal, Role, SecretKey, TierKind};
use crate::store::ColumnStoreConfig;
use crate::sync::{serve, TcpTransport};

pub const CONFIG_ENV: &str = "MICRODB_CONFIG";

/// Settings read from the `MICRODB_CONFIG` JSON file. Flags and
/// environment variables take precedence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    pub data_dir: Option<PathBuf>,
    pub replica_id: Option<String>,
    pub tier: Option<TierKind>,
    pub listen: Option<String>,
    /// `link_id → host:port` for TCP sync rounds.
    pub peers: BTreeMap<String, String>,
    pub token_file: Option<PathBuf>,
    /// `issuer → hex key` accepted when verifying tokens.
    pub trusted: BTreeMap<String, String>,
    pub owner_key: Option<String>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "microdb", version, about = "Tier-local microdatabase")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Root data directory (env MICRODB_DATA_DIR).
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub replica: Option<String>,
    #[arg(long, global = true)]
    pub tier: Option<TierKind>,
    /// Signed token identifying the caller; without it the owner acts.
    #[arg(long, global = true)]
    pub token: Option<PathBuf>,
    /// JSON config file (env MICRODB_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer sync rounds and run ingest polls and scheduled links.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Validate a manifest file and append it to the registry log.
    Publish { file: PathBuf },
    /// Apply a logged manifest version.
    Deploy { manifest_id: String, version: u64 },
    /// Print the registry log.
    RegistryLog,
    /// Browse the information model.
    Browse {
        #[arg(default_value = "/")]
        path: String,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        tag: Option<String>,
    },
    /// Print events as they are committed while serving.
    Tail {
        /// Store name or `prefix*` pattern.
        #[arg(default_value = "*")]
        store: String,
        /// Comma-separated transaction kinds, e.g. `create,update`.
        #[arg(long, value_delimiter = ',')]
        txn: Vec<TxnKind>,
        #[arg(long)]
        listen: Option<String>,
        /// Exit after this many events.
        #[arg(long)]
        max: Option<usize>,
    },
    /// Print ingest bindings and their counters.
    IngestStatus,
    #[command(subcommand)]
    Sync(SyncCommand),
    #[command(subcommand)]
    Sim(SimCommand),
    #[command(subcommand)]
    Admin(AdminCommand),
}

#[derive(Debug, Subcommand)]
pub enum SyncCommand {
    /// Run one round on a link over TCP.
    Run {
        link: String,
        /// Peer address; defaults to the link's configured address.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Print configured links and acknowledged watermarks.
    Status,
}

#[derive(Debug, Subcommand)]
pub enum SimCommand {
    /// Run a scenario file and write its report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; defaults to `<scenario stem>.report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a report file.
    Report { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum AdminCommand {
    CreateStore {
        name: String,
        #[arg(long)]
        mutable: bool,
        #[arg(long)]
        value_type: Option<String>,
        #[arg(long)]
        encrypted: bool,
        #[arg(long)]
        retention: Option<u64>,
    },
    DropStore {
        name: String,
    },
    /// Define a role from a JSON file: `{"name": .., "grants": [..]}`.
    DefineRole {
        file: PathBuf,
    },
    Provision {
        subject: String,
        role: String,
    },
}

/// Parse `argv` and run. Returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            1
        }
    }
}

struct Resolved {
    data_dir: Option<PathBuf>,
    replica: String,
    tier: TierKind,
    token: Option<PathBuf>,
    config: CliConfig,
}

fn resolve(g: &GlobalArgs) -> Result<Resolved> {
    let cfg_path = g
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let config = match cfg_path {
        Some(p) => CliConfig::load(&p)?,
        None => CliConfig::default(),
    };
    if g.data_dir.is_some() {
        // An explicit flag outranks the environment, which `Microdb::open`
        // would otherwise apply.
        std::env::remove_var(DATA_DIR_ENV);
    }
    let data_dir = g
        .data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .or_else(|| config.data_dir.clone());
    let replica = g
        .replica
        .clone()
        .or_else(|| config.replica_id.clone())
        .unwrap_or_else(|| "local".into());
    if replica.is_empty() {
        return Err(Error::InvalidConfig("replica id is empty".into()));
    }
    let tier = g.tier.or(config.tier).unwrap_or(TierKind::Local);
    let token = g.token.clone().or_else(|| config.token_file.clone());
    Ok(Resolved {
        data_dir,
        replica,
        tier,
        token,
        config,
    })
}

fn open(r: &Resolved) -> Result<(Arc<Microdb>, Principal)> {
    let dir = r.data_dir.clone().ok_or_else(|| {
        Error::InvalidConfig(format!(
            "no data directory: pass --data-dir or set {DATA_DIR_ENV}"
        ))
    })?;
    let mut opts = Options::new(r.replica.clone(), r.tier).data_dir(dir);
    for (issuer, hex) in &r.config.trusted {
        opts = opts.trust(issuer.clone(), SecretKey::from_hex(hex)?);
    }
    if let Some(k) = &r.config.owner_key {
        opts = opts.owner_key(SecretKey::from_hex(k)?);
    }
    let db = Microdb::open(opts)?;
    let principal = match &r.token {
        Some(path) => db.authenticate(std::fs::read_to_string(path)?.trim().as_bytes())?,
        None => db.owner(),
    };
    Ok((Arc::new(db), principal))
}

fn run(cli: Cli) -> Result<i32> {
    let out = &mut std::io::stdout().lock();
    match cli.command {
        Command::Sim(SimCommand::Run {
            scenario,
            seed,
            out: path,
        }) => {
            let report = run_scenario(&scenario, seed)?;
            let path = path.unwrap_or_else(|| {
                let stem = scenario
                    .file_stem()
                    .map_or("scenario".into(), |s| s.to_string_lossy().into_owned());
                PathBuf::from(format!("{stem}.report.json"))
            });
            std::fs::write(&path, report.to_json())?;
            print_report(out, &report)?;
            writeln!(out, "report\t{}", path.display())?;
            return Ok(if report.passed { 0 } else { 1 });
        }
        Command::Sim(SimCommand::Report { file }) => {
            let report = ScenarioReport::from_json(&std::fs::read_to_string(&file)?)?;
            print_report(out, &report)?;
            return Ok(if report.passed { 0 } else { 1 });
        }
        _ => {}
    }

    let r = resolve(&cli.global)?;
    let (db, who) = open(&r)?;
    match cli.command {
        Command::Serve { listen } => {
            let addr = listen.or_else(|| r.config.listen.clone());
            serve_loop(&db, addr, &r.config.peers, None, |_| Ok(()))?;
        }
        Command::Publish { file } => {
            let m = Manifest::from_json(&std::fs::read_to_string(&file)?)?;
            let pos = db.publish_manifest(&m, &who)?;
            writeln!(
                out,
                "published\t{}\t{}\t{}\t{}",
                m.manifest_id, m.version, pos.origin, pos.seq
            )?;
        }
        Command::Deploy {
            manifest_id,
            version,
        } => {
            let report = db.deploy(&manifest_id, version, &who)?;
            for item in &report.created {
                writeln!(out, "created\t{item}")?;
            }
            for item in &report.updated {
                writeln!(out, "updated\t{item}")?;
            }
            for item in &report.skipped {
                writeln!(out, "skipped\t{item}")?;
            }
            report.check()?;
        }
        Command::RegistryLog => {
            for e in db.registry_log() {
                let m = &e.manifest;
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    e.position.origin, e.position.seq, m.manifest_id, m.version, m.publisher
                )?;
            }
        }
        Command::Browse { path, model, tag } => {
            for node in db.browse(model.as_deref(), &path, tag.as_deref())? {
                writeln!(out, "{node}")?;
            }
        }
        Command::Tail {
            store,
            txn,
            listen,
            max,
        } => {
            let sub = db.subscribe(
                SubscriptionFilter::store(Pattern::from(store.as_str())).txns(txn),
                &who,
            )?;
            let mut seen = 0usize;
            serve_loop(&db, listen, &r.config.peers, max, |out_count| {
                let mut stdout = std::io::stdout().lock();
                for ev in sub.drain() {
                    let key = ev.key.map(|k| k.to_string()).unwrap_or_default();
                    writeln!(
                        stdout,
                        "{}\t{}\t{}\t{}\t{}",
                        ev.event_seq, ev.txn, ev.store, key, ev.actor
                    )?;
                    seen += 1;
                    if max.is_some_and(|m| seen >= m) {
                        *out_count = seen;
                        return Ok(());
                    }
                }
                *out_count = seen;
                Ok(())
            })?;
        }
        Command::IngestStatus => {
            for s in db.ingest_status() {
                let c = s.counters;
                writeln!(
                    out,
                    "{}\t{}\tappended={}\tdropped={}\tduplicate={}\tunreachable={}\tlast_seen={}",
                    s.binding.source_id,
                    s.binding.store,
                    c.appended,
                    c.dropped,
                    c.duplicate,
                    c.unreachable,
                    s.last_seen.map_or("-".into(), |t| t.to_string())
                )?;
            }
        }
        Command::Sync(SyncCommand::Run { link, addr }) => {
            let cfg = db.link_config(&link)?;
            let addr = addr
                .or_else(|| r.config.peers.get(&link).cloned())
                .or(cfg.peer_addr)
                .ok_or_else(|| Error::InvalidConfig(format!("no peer address for link {link}")))?;
            let mut t = TcpTransport::connect(addr.as_str())?;
            let report = db.sync_round(&link, &mut t)?;
            for (store, n) in &report.sent {
                writeln!(out, "sent\t{store}\t{n}")?;
            }
            for (store, n) in &report.received {
                writeln!(out, "received\t{store}\t{n}")?;
            }
            writeln!(out, "conflicts\t{}", report.conflicts)?;
            for w in &report.warnings {
                writeln!(
                    out,
                    "warning\t{}",
                    serde_json::to_string(w).unwrap_or_default()
                )?;
            }
        }
        Command::Sync(SyncCommand::Status) => {
            for l in db.link_status() {
                let c = &l.config;
                let stores: Vec<&str> = c.filter.stores.iter().map(Pattern::as_str).collect();
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\trounds={}",
                    c.link_id,
                    c.peer_id,
                    c.peer_tier,
                    stores.join(","),
                    l.rounds
                )?;
                for w in &l.acked {
                    writeln!(
                        out,
                        "{}\tacked\t{}\t{}\t{}",
                        c.link_id, w.store, w.origin, w.seq
                    )?;
                }
            }
        }
        Command::Admin(cmd) => {
            match cmd {
                AdminCommand::CreateStore {
                    name,
                    mutable,
                    value_type,
                    encrypted,
                    retention,
                } => {
                    let mut cfg = ColumnStoreConfig::new(name.clone());
                    if mutable {
                        cfg = cfg.mutable();
                    }
                    if let Some(t) = value_type {
                        cfg = cfg.value_type(t);
                    }
                    if encrypted {
                        cfg = cfg.encrypted();
                    }
                    if let Some(n) = retention {
                        cfg = cfg.retention(n);
                    }
                    db.create_store(cfg, &who)?;
                    writeln!(out, "created\tstore\t{name}")?;
                }
                AdminCommand::DropStore { name } => {
                    db.drop_store(&name, &who)?;
                    writeln!(out, "dropped\tstore\t{name}")?;
                }
                AdminCommand::DefineRole { file } => {
                    let role: Role = serde_json::from_str(&std::fs::read_to_string(&file)?)
                        .map_err(|e| Error::Parse {
                            line: e.line(),
                            message: e.to_string(),
                        })?;
                    let name = role.name.clone();
                    db.define_role(role, &who)?;
                    writeln!(out, "defined\trole\t{name}")?;
                }
                AdminCommand::Provision { subject, role } => {
                    db.provision(&subject, &role, &who)?;
                    writeln!(out, "provisioned\t{subject}\t{role}")?;
                }
            }
        }
        Command::Sim(_) => unreachable!("handled before opening an instance"),
    }
    db.sync_to_disk()?;
    Ok(0)
}

fn print_report(out: &mut impl Write, report: &ScenarioReport) -> Result<()> {
    for a in &report.assertions {
        let verdict = if a.passed { "pass" } else { "fail" };
        writeln!(
            out,
            "{verdict}\t{}\t{}\t{}\t{}",
            a.step, a.at, a.action, a.detail
        )?;
    }
    for w in &report.warnings {
        writeln!(out, "warning\t{w}")?;
    }
    let c = &report.counters;
    writeln!(
        out,
        "counters\trounds={}\trounds_down={}\tsent={}\treceived={}\tconflicts={}",
        c.rounds, c.rounds_down, c.records_sent, c.records_received, c.conflicts
    )?;
    writeln!(
        out,
        "result\t{}\t{}",
        report.name,
        if report.passed { "pass" } else { "fail" }
    )?;
    Ok(())
}

/// Serve sync rounds (when listening), poll ingest sources and run
/// scheduled links until `on_tick` reports `limit` items handled.
fn serve_loop(
    db: &Arc<Microdb>,
    listen: Option<String>,
    peers: &BTreeMap<String, String>,
    limit: Option<usize>,
    mut on_tick: impl FnMut(&mut usize) -> Result<()>,
) -> Result<()> {
    let stop = Arc::new(AtomicBool::new(false));
    if let Some(addr) = listen {
        let listener = TcpListener::bind(&addr)?;
        log::info!("listening on {}", listener.local_addr()?);
        let (db, stop) = (db.clone(), stop.clone());
        std::thread::spawn(move || {
            if let Err(e) = serve(db, listener, stop) {
                log::error!("listener stopped: {e}");
            }
        });
    }
    let mut due: BTreeMap<String, i64> = BTreeMap::new();
    loop {
        let now = db.now();
        db.poll_tick(now);
        for l in db.link_status() {
            let Some(period) = l.config.period_ms else {
                continue;
            };
            let next = due.entry(l.config.link_id.clone()).or_insert(now);
            if *next > now {
                continue;
            }
            *next = now + period as i64 * 1_000_000;
            let Some(addr) = peers
                .get(&l.config.link_id)
                .cloned()
                .or(l.config.peer_addr.clone())
            else {
                continue;
            };
            match TcpTransport::connect(addr.as_str())
                .and_then(|mut t| db.sync_round(&l.config.link_id, &mut t))
            {
                Ok(r) => log::info!(
                    "link {}: sent {} received {}",
                    l.config.link_id,
                    r.records_sent(),
                    r.records_received()
                ),
                Err(e) => log::warn!("link {}: {e}", l.config.link_id),
            }
        }
        let mut handled = 0;
        on_tick(&mut handled)?;
        if limit.is_some_and(|m| handled >= m) {
            stop.store(true, std::sync::atomic::Ordering::SeqCst);
            return Ok(());
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}
