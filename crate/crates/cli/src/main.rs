//! `ckptsync`: every cluster role, the offline checkpoint tools and the
//! experiment drivers behind one binary.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a runtime error.
//! Every flag can also be set through a `CKPTSYNC_<FLAG>` variable.

mod blobs;
mod roles;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ckptsync::bench::{self, FailoverConfig, OverheadMode, WorkloadSpec};
use ckptsync::heap::HeapConfig;
use ckptsync::kvapp::{ClientOptions, KvClient, Route};
use ckptsync::managers::Mode;

#[derive(Parser, Debug)]
#[command(name = "ckptsync", version, about = "Incremental checkpointing with primary/backup failover")]
pub struct Cli {
    /// Directory for everything this invocation writes.
    #[arg(long, global = true, env = "CKPTSYNC_DATA_DIR", default_value = ".")]
    pub data_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the blob store over the data directory.
    Store {
        #[arg(long, env = "CKPTSYNC_LISTEN", default_value = "127.0.0.1:7100")]
        listen: SocketAddr,
    },
    /// Run the configuration service.
    Confsvc {
        #[arg(long, env = "CKPTSYNC_LISTEN", default_value = "127.0.0.1:7200")]
        listen: SocketAddr,
        #[arg(long, env = "CKPTSYNC_HEARTBEAT_INTERVAL_MS", default_value_t = 100)]
        heartbeat_interval_ms: u64,
        #[arg(long, env = "CKPTSYNC_MISS_THRESHOLD", default_value_t = 3)]
        miss_threshold: u32,
    },
    /// Run the KV store as primary.
    Primary(NodeArgs),
    /// Run a backup that takes over when the primary fails.
    Backup(NodeArgs),
    /// Issue one KV request.
    KvClient {
        #[command(flatten)]
        target: Target,
        #[command(subcommand)]
        op: KvOp,
    },
    /// Run a workload or an experiment.
    Bench(BenchArgs),
    /// Fold checkpoints, oldest first, into one full checkpoint.
    Merge {
        #[arg(required = true)]
        names: Vec<String>,
        /// Output name; defaults to compact-<seq>.
        #[arg(long)]
        out: Option<String>,
    },
    /// Print a checkpoint's metadata and CRC status.
    Inspect { name: String },
    /// Restore into a throwaway heap and print the live-page hash.
    RestoreDryrun {
        /// Chain to fold; the newest chain in the data directory if empty.
        names: Vec<String>,
    },
    /// Ask the current primary to terminate abruptly.
    KillPrimary {
        #[arg(long, env = "CKPTSYNC_CONFSVC")]
        confsvc: SocketAddr,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Async,
    Sync,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Async => Mode::Async,
            ModeArg::Sync => Mode::Sync,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct NodeArgs {
    #[arg(long, env = "CKPTSYNC_NODE_ID")]
    pub node_id: String,
    /// Address the KV server listens on. A backup uses it only if the
    /// primary's port cannot be reclaimed.
    #[arg(long, env = "CKPTSYNC_LISTEN", default_value = "127.0.0.1:7300")]
    pub listen: SocketAddr,
    #[arg(long, env = "CKPTSYNC_STORE")]
    pub store: SocketAddr,
    #[arg(long, env = "CKPTSYNC_CONFSVC")]
    pub confsvc: SocketAddr,
    #[arg(long, env = "CKPTSYNC_CHECKPOINT_INTERVAL_MS", default_value_t = 200)]
    pub checkpoint_interval_ms: u64,
    #[arg(long, value_enum, env = "CKPTSYNC_MODE", default_value = "async")]
    pub mode: ModeArg,
    #[arg(long, env = "CKPTSYNC_HEARTBEAT_INTERVAL_MS", default_value_t = 100)]
    pub heartbeat_interval_ms: u64,
    /// Dump every mapped page at every checkpoint.
    #[arg(long, env = "CKPTSYNC_FULL_DUMP")]
    pub full_dump: bool,
    /// Keep a duplicate-request table in the heap.
    #[arg(long, env = "CKPTSYNC_DEDUP")]
    pub dedup: bool,
    /// Backup only: compact the stored chain every this many ms.
    #[arg(long, env = "CKPTSYNC_COMPACT_EVERY_MS")]
    pub compact_every_ms: Option<u64>,
}

#[derive(Args, Debug, Clone, Copy)]
#[group(required = true, multiple = false)]
pub struct Target {
    /// Find the primary through the configuration service.
    #[arg(long, env = "CKPTSYNC_CONFSVC")]
    pub confsvc: Option<SocketAddr>,
    /// Talk to this KV server directly.
    #[arg(long, env = "CKPTSYNC_SERVER")]
    pub server: Option<SocketAddr>,
}

impl Target {
    fn route(&self) -> Route {
        match (self.confsvc, self.server) {
            (Some(c), _) => Route::Conf(c),
            (None, Some(s)) => Route::Direct(s),
            (None, None) => unreachable!("clap requires one target"),
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum KvOp {
    Get { key: String },
    Put { key: String, value: String },
    Delete { key: String },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    /// Preload and run one workload against a running cluster.
    Workload,
    /// Compare checkpointing modes on fresh in-process servers.
    Overhead,
    /// Kill an in-process primary and time the recovery.
    Failover,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum, env = "CKPTSYNC_EXPERIMENT", default_value = "workload")]
    pub experiment: Experiment,
    #[arg(long, env = "CKPTSYNC_WORKLOAD", default_value = "A")]
    pub workload: String,
    #[arg(long, env = "CKPTSYNC_OPS")]
    pub ops: Option<u64>,
    #[arg(long, env = "CKPTSYNC_KEYS")]
    pub keys: Option<u64>,
    #[arg(long, env = "CKPTSYNC_VALUE_SIZE")]
    pub value_size: Option<usize>,
    #[arg(long, env = "CKPTSYNC_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, env = "CKPTSYNC_SEED", default_value_t = 1)]
    pub seed: u64,
    /// Stop each run after this many seconds.
    #[arg(long, env = "CKPTSYNC_DURATION_S")]
    pub duration_s: Option<f64>,
    #[arg(long, env = "CKPTSYNC_CHECKPOINT_INTERVAL_MS", default_value_t = 200)]
    pub checkpoint_interval_ms: u64,
    /// Overhead experiment: modes to compare.
    #[arg(long, env = "CKPTSYNC_MODES", value_delimiter = ',', default_value = "off,incremental,full_dump,sync")]
    pub modes: Vec<String>,
    #[arg(long, env = "CKPTSYNC_RUNS", default_value_t = 1)]
    pub runs: usize,
    /// Overhead experiment: alternate the load between modes in this many
    /// slices per run (full_dump always runs alone).
    #[arg(long, env = "CKPTSYNC_SLICES", default_value_t = 1)]
    pub slices: usize,
    /// Failover experiment: replication mode.
    #[arg(long, value_enum, env = "CKPTSYNC_MODE", default_value = "async")]
    pub mode: ModeArg,
    /// Record file, relative to the data directory.
    #[arg(long, env = "CKPTSYNC_TSV", default_value = "bench.tsv")]
    pub tsv: PathBuf,
    #[command(flatten)]
    pub target: OptTarget,
}

#[derive(Args, Debug, Clone, Copy)]
#[group(required = false, multiple = false)]
pub struct OptTarget {
    #[arg(long, env = "CKPTSYNC_CONFSVC")]
    pub confsvc: Option<SocketAddr>,
    #[arg(long, env = "CKPTSYNC_SERVER")]
    pub server: Option<SocketAddr>,
}

fn workload_spec(a: &BenchArgs) -> Result<WorkloadSpec> {
    let mut spec = WorkloadSpec::by_name(&a.workload).with_context(|| format!("unknown workload {:?}", a.workload))?;
    if let Some(v) = a.ops {
        spec.op_count = v;
    }
    if let Some(v) = a.keys {
        spec.key_count = v;
    }
    if let Some(v) = a.value_size {
        spec.value_size = v;
    }
    if let Some(v) = a.threads {
        spec.worker_threads = v;
    }
    spec.seed = a.seed;
    spec.duration = a.duration_s.map(Duration::from_secs_f64);
    Ok(spec)
}

fn inside_data_dir(data_dir: &std::path::Path, rel: &std::path::Path) -> Result<PathBuf> {
    if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        bail!("{} must be a relative path inside the data directory", rel.display());
    }
    Ok(data_dir.join(rel))
}

fn run_bench(data_dir: &std::path::Path, a: &BenchArgs) -> Result<()> {
    std::fs::create_dir_all(data_dir)?;
    let spec = workload_spec(a)?;
    let interval = Duration::from_millis(a.checkpoint_interval_ms);
    let tsv_path = inside_data_dir(data_dir, &a.tsv)?;
    match a.experiment {
        Experiment::Workload => {
            let route = match (a.target.confsvc, a.target.server) {
                (Some(c), _) => Route::Conf(c),
                (None, Some(s)) => Route::Direct(s),
                (None, None) => bail!("the workload experiment needs --confsvc or --server"),
            };
            bench::preload(&spec, route)?;
            let mut r = bench::run_workload(&spec, route)?;
            r.mode = "external".into();
            print!("{}", bench::checkpoint_table(&r));
            std::fs::write(&tsv_path, bench::to_tsv(&[(0, &r)]))?;
        }
        Experiment::Overhead => {
            let modes = a
                .modes
                .iter()
                .map(|m| OverheadMode::parse(m).with_context(|| format!("unknown mode {m:?}")))
                .collect::<Result<Vec<_>>>()?;
            let heap: HeapConfig = ckptsync::kvapp::default_kv_heap();
            let report = bench::run_overhead_experiment(&spec, &modes, a.runs.max(1), a.slices, interval, heap, data_dir)?;
            let base = modes.iter().position(|m| *m == OverheadMode::Off);
            println!("{:<12} {:>12} {:>10}", "mode", "ops/s", "overhead");
            for (i, m) in modes.iter().enumerate() {
                let pct = base.map_or("-".to_string(), |b| format!("{:.2}%", report.overhead_pct(i, b)));
                println!("{:<12} {:>12.0} {:>10}", m.name(), report.mean_throughput(i), pct);
            }
            for row in &report.runs {
                for r in row {
                    print!("{}", bench::checkpoint_table(r));
                }
            }
            let rows: Vec<(usize, &bench::RunReport)> = report
                .runs
                .iter()
                .enumerate()
                .flat_map(|(i, row)| row.iter().map(move |r| (i, r)))
                .collect();
            std::fs::write(&tsv_path, bench::to_tsv(&rows))?;
        }
        Experiment::Failover => {
            let cfg = FailoverConfig {
                mode: a.mode.into(),
                keys: a.keys.unwrap_or(1000),
                value_size: a.value_size.unwrap_or(1000),
                checkpoint_interval: interval,
                data_dir: Some(data_dir.to_path_buf()),
                seed: a.seed,
                ..Default::default()
            };
            let r = bench::run_failover_experiment(&cfg)?;
            let ms = |d: Duration| d.as_secs_f64() * 1000.0;
            println!("recovery_ms: {:.1}", ms(r.recovery));
            println!("  detect_ms: {:.1}", ms(r.detect));
            println!("  fetch_ms: {:.1}", ms(r.fetch));
            println!("  merge_ms: {:.1}", ms(r.merge));
            println!("  restore_ms: {:.1}", ms(r.restore));
            println!("  redirect_ms: {:.1}", ms(r.redirect));
            println!("chain_len: {}", r.chain_len);
            println!("restored_seq: {}", r.restored_seq);
            println!("lost_writes: {}", r.lost_writes);
            println!("hash_at_checkpoint_boundary: {}", r.hash_at_boundary);
            return Ok(());
        }
    }
    println!("records written to {}", tsv_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let data_dir = cli.data_dir;
    match cli.command {
        Command::Store { listen } => roles::store(&data_dir, listen),
        Command::Confsvc {
            listen,
            heartbeat_interval_ms,
            miss_threshold,
        } => roles::confsvc(listen, Duration::from_millis(heartbeat_interval_ms), miss_threshold),
        Command::Primary(a) => roles::primary(&a),
        Command::Backup(a) => roles::backup(&a),
        Command::KvClient { target, op } => {
            let mut c = KvClient::new(target.route(), std::process::id() as u64, ClientOptions::default());
            match op {
                KvOp::Get { key } => match c.get(key.as_bytes())? {
                    Some(v) => println!("{}", String::from_utf8_lossy(&v)),
                    None => println!("(not found)"),
                },
                KvOp::Put { key, value } => {
                    c.put(key.as_bytes(), value.as_bytes())?;
                    println!("OK");
                }
                KvOp::Delete { key } => {
                    c.delete(key.as_bytes())?;
                    println!("OK");
                }
            }
            Ok(())
        }
        Command::Bench(a) => run_bench(&data_dir, &a),
        Command::Merge { names, out } => {
            let store = blobs::open_store(&data_dir)?;
            print!("{}", blobs::merge(&store, &names, out.as_deref())?);
            Ok(())
        }
        Command::Inspect { name } => {
            let store = blobs::open_store(&data_dir)?;
            let (text, ok) = blobs::inspect(&store, &name)?;
            print!("{text}");
            if !ok {
                bail!("{name} failed verification");
            }
            Ok(())
        }
        Command::RestoreDryrun { names } => {
            let store = blobs::open_store(&data_dir)?;
            print!("{}", blobs::restore_dryrun(&store, &names)?);
            Ok(())
        }
        Command::KillPrimary { confsvc } => {
            let addr = KvClient::new(Route::Conf(confsvc), 0, ClientOptions::default()).kill_primary()?;
            println!("sent kill to {addr}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
