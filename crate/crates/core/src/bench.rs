//! YCSB-style workloads and the experiment drivers.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::confsvc::{self, ConfConfig};
use crate::engine::DumpPolicy;
use crate::heap::HeapConfig;
use crate::kvapp::node::{default_kv_heap, KvBackupNode, KvNode, NodeConfig, Observer};
use crate::kvapp::server::{serve, KvApp};
use crate::kvapp::{ClientOptions, KvClient, KvError, Route};
use crate::managers::{BackupConfig, CheckpointStat, Mode};
use crate::storesvc::{self, BlobStore, DirStore, MemStore, StoreClient};
use crate::heap::ManagedHeap;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("error rate {errors}/{ops} exceeds 1%")]
    ErrorRate { errors: u64, ops: u64 },
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("backup never promoted within {0:?}")]
    NoPromotion(Duration),
    #[error("verification failed: {0}")]
    Verify(String),
}

fn setup<E: std::fmt::Display>(e: E) -> BenchError {
    BenchError::Setup(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mix {
    pub update: u8,
    pub get: u8,
    pub delete: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Update,
    Get,
    Delete,
}

impl Mix {
    pub fn new(update: u8, get: u8, delete: u8) -> Self {
        assert_eq!(update as u32 + get as u32 + delete as u32, 100, "mix must sum to 100");
        Mix { update, get, delete }
    }

    pub fn pick(&self, roll: u8) -> OpKind {
        if roll < self.update {
            OpKind::Update
        } else if roll < self.update + self.get {
            OpKind::Get
        } else {
            OpKind::Delete
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub name: String,
    pub op_count: u64,
    pub key_count: u64,
    pub value_size: usize,
    pub mix: Mix,
    pub worker_threads: usize,
    pub seed: u64,
    /// Stop early once this much time has passed.
    pub duration: Option<Duration>,
}

impl WorkloadSpec {
    fn desk(name: &str, mix: Mix) -> Self {
        WorkloadSpec {
            name: name.into(),
            op_count: 100_000,
            key_count: 1000,
            value_size: 1000,
            mix,
            worker_threads: 20,
            seed: 1,
            duration: None,
        }
    }

    /// 50% updates, 50% gets.
    pub fn a() -> Self {
        Self::desk("A", Mix::new(50, 50, 0))
    }

    /// 5% updates, 95% gets.
    pub fn b() -> Self {
        Self::desk("B", Mix::new(5, 95, 0))
    }

    /// Update-dominated with deletes: 70% updates, 15% deletes, 15% gets.
    pub fn c() -> Self {
        Self::desk("C", Mix::new(70, 15, 15))
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "A" => Some(Self::a()),
            "B" => Some(Self::b()),
            "C" => Some(Self::c()),
            _ => None,
        }
    }
}

pub fn key_of(i: u64) -> Vec<u8> {
    format!("user{i:08}").into_bytes()
}

/// The operation stream of one worker. Reproducible from (seed, worker).
pub struct OpStream {
    rng: ChaCha8Rng,
    mix: Mix,
    key_count: u64,
    value_size: usize,
}

impl OpStream {
    pub fn new(spec: &WorkloadSpec, worker: usize) -> Self {
        OpStream {
            rng: ChaCha8Rng::seed_from_u64(spec.seed ^ (worker as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            mix: spec.mix,
            key_count: spec.key_count,
            value_size: spec.value_size,
        }
    }

    pub fn next_op(&mut self, value: &mut Vec<u8>) -> (OpKind, u64) {
        let kind = self.mix.pick(self.rng.gen_range(0..100));
        let key = self.rng.gen_range(0..self.key_count);
        if kind == OpKind::Update {
            value.resize(self.value_size, 0);
            self.rng.fill_bytes(value);
        }
        (kind, key)
    }
}

/// One completed operation: start offset from the run start and latency.
#[derive(Debug, Clone, Copy)]
pub struct OpSample {
    pub start_us: u32,
    pub latency_us: u32,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub workload: String,
    pub mode: String,
    pub ops: u64,
    pub errors: u64,
    pub updates: u64,
    pub gets: u64,
    pub deletes: u64,
    pub elapsed: Duration,
    pub samples: Vec<OpSample>,
    pub checkpoints: Vec<CheckpointStat>,
}

impl RunReport {
    pub fn throughput(&self) -> f64 {
        self.ops as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }

    /// Latency percentile over samples started within `[from, to)`.
    pub fn latency_percentile(&self, p: f64, from: Duration, to: Duration) -> Option<Duration> {
        let (from, to) = (from.as_micros() as u32, to.as_micros() as u32);
        let mut lat: Vec<u32> = self
            .samples
            .iter()
            .filter(|s| s.start_us >= from && s.start_us < to)
            .map(|s| s.latency_us)
            .collect();
        if lat.is_empty() {
            return None;
        }
        lat.sort_unstable();
        let rank = ((p / 100.0) * lat.len() as f64).ceil().max(1.0) as usize - 1;
        Some(Duration::from_micros(lat[rank.min(lat.len() - 1)] as u64))
    }

    /// Checkpoints after the bootstrap full dump.
    pub fn steady_checkpoints(&self) -> &[CheckpointStat] {
        self.checkpoints.get(1..).unwrap_or(&[])
    }
}

#[derive(Default)]
struct WorkerTally {
    ops: u64,
    errors: u64,
    updates: u64,
    gets: u64,
    deletes: u64,
    samples: Vec<OpSample>,
}

/// Put every key once so reads hit.
pub fn preload(spec: &WorkloadSpec, route: Route) -> Result<(), BenchError> {
    let workers = spec.worker_threads.clamp(1, 8) as u64;
    let handles: Vec<_> = (0..workers)
        .map(|w| {
            let spec = spec.clone();
            thread::spawn(move || -> Result<(), KvError> {
                let mut client = KvClient::new(route, 1_000_000 + w, ClientOptions::default());
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(w));
                let mut value = vec![0u8; spec.value_size];
                for k in (w..spec.key_count).step_by(workers as usize) {
                    rng.fill_bytes(&mut value);
                    client.put(&key_of(k), &value)?;
                }
                Ok(())
            })
        })
        .collect();
    for h in handles {
        h.join().map_err(|_| setup("preload worker panicked"))?.map_err(setup)?;
    }
    Ok(())
}

/// Issue the workload from `worker_threads` concurrent clients.
pub fn run_workload(spec: &WorkloadSpec, route: Route) -> Result<RunReport, BenchError> {
    let workers = spec.worker_threads.max(1);
    let start = Instant::now();
    let deadline = spec.duration.map(|d| start + d);
    let handles: Vec<_> = (0..workers)
        .map(|w| {
            let spec = spec.clone();
            let quota = spec.op_count / workers as u64 + u64::from((w as u64) < spec.op_count % workers as u64);
            thread::spawn(move || {
                let mut client = KvClient::new(route, w as u64 + 1, ClientOptions::default());
                let mut ops = OpStream::new(&spec, w);
                let mut tally = WorkerTally {
                    samples: Vec::with_capacity(quota.min(1 << 16) as usize),
                    ..Default::default()
                };
                let mut value = Vec::new();
                for _ in 0..quota {
                    let t0 = Instant::now();
                    if deadline.is_some_and(|d| t0 >= d) {
                        break;
                    }
                    let (kind, k) = ops.next_op(&mut value);
                    let key = key_of(k);
                    let r = match kind {
                        OpKind::Update => {
                            tally.updates += 1;
                            client.put(&key, &value)
                        }
                        OpKind::Get => {
                            tally.gets += 1;
                            client.get(&key).map(|_| ())
                        }
                        OpKind::Delete => {
                            tally.deletes += 1;
                            client.delete(&key)
                        }
                    };
                    tally.ops += 1;
                    if r.is_err() {
                        tally.errors += 1;
                    }
                    tally.samples.push(OpSample {
                        start_us: (t0 - start).as_micros() as u32,
                        latency_us: t0.elapsed().as_micros() as u32,
                    });
                }
                tally
            })
        })
        .collect();
    let mut report = RunReport {
        workload: spec.name.clone(),
        ..Default::default()
    };
    for h in handles {
        let t = h.join().map_err(|_| setup("worker panicked"))?;
        report.ops += t.ops;
        report.errors += t.errors;
        report.updates += t.updates;
        report.gets += t.gets;
        report.deletes += t.deletes;
        report.samples.extend(t.samples);
    }
    report.elapsed = start.elapsed();
    if report.errors * 100 > report.ops {
        return Err(BenchError::ErrorRate {
            errors: report.errors,
            ops: report.ops,
        });
    }
    Ok(report)
}

/// Checkpointing configuration compared by the overhead experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverheadMode {
    Off,
    Incremental,
    FullDump,
    Sync,
}

impl OverheadMode {
    pub const ALL: [OverheadMode; 4] = [
        OverheadMode::Off,
        OverheadMode::Incremental,
        OverheadMode::FullDump,
        OverheadMode::Sync,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OverheadMode::Off => "off",
            OverheadMode::Incremental => "incremental",
            OverheadMode::FullDump => "full_dump",
            OverheadMode::Sync => "sync",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// An idle server in this mode does no more than take empty checkpoints.
    /// A full dump copies and uploads the whole heap even when idle.
    pub fn idles_cheaply(self) -> bool {
        self != OverheadMode::FullDump
    }
}

/// A primary running one overhead mode on a fresh heap.
pub enum ModeServer {
    Off(crate::kvapp::KvServer),
    Managed(KvNode),
}

impl ModeServer {
    pub fn addr(&self) -> SocketAddr {
        match self {
            ModeServer::Off(s) => s.addr(),
            ModeServer::Managed(n) => n.addr(),
        }
    }

    pub fn checkpoints(&self) -> Vec<CheckpointStat> {
        match self {
            ModeServer::Off(_) => Vec::new(),
            ModeServer::Managed(n) => n.manager().stats(),
        }
    }

    pub fn node(&self) -> Option<&KvNode> {
        match self {
            ModeServer::Managed(n) => Some(n),
            ModeServer::Off(_) => None,
        }
    }

    pub fn stop(&mut self) {
        match self {
            ModeServer::Off(s) => s.shutdown(),
            ModeServer::Managed(n) => n.stop(),
        }
    }
}

/// Start a standalone primary in `mode`. No configuration service.
pub fn start_mode_server(
    mode: OverheadMode,
    heap: HeapConfig,
    interval: Duration,
    store: Arc<dyn BlobStore>,
    observer: Option<Observer>,
) -> Result<ModeServer, BenchError> {
    let listener = TcpListener::bind("127.0.0.1:0").map_err(setup)?;
    if mode == OverheadMode::Off {
        let heap = Arc::new(ManagedHeap::new(heap).map_err(setup)?);
        let app = Arc::new(KvApp::create(heap, false).map_err(setup)?);
        let server = serve(listener, app).map_err(setup)?;
        server.set_serving(true);
        return Ok(ModeServer::Off(server));
    }
    let mut cfg = NodeConfig::new("bench");
    cfg.heap = heap;
    cfg.primary.interval = interval;
    cfg.primary.mode = if mode == OverheadMode::Sync { Mode::Sync } else { Mode::Async };
    cfg.policy = if mode == OverheadMode::FullDump {
        DumpPolicy::FullEveryTime
    } else {
        DumpPolicy::Incremental
    };
    let node = KvNode::start_primary(&cfg, listener, store, None, observer, None).map_err(setup)?;
    Ok(ModeServer::Managed(node))
}

/// A preloaded primary in one mode, with its own store directory.
struct PreparedMode {
    mode: OverheadMode,
    server: ModeServer,
    dir: PathBuf,
    /// Checkpoints taken up to the end of the preload.
    skip: usize,
}

impl PreparedMode {
    fn new(
        spec: &WorkloadSpec,
        mode: OverheadMode,
        interval: Duration,
        heap: HeapConfig,
        data_dir: &Path,
    ) -> Result<Self, BenchError> {
        let dir = data_dir.join(format!("store-{}-{}", mode.name(), std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let store: Arc<dyn BlobStore> = Arc::new(DirStore::open(&dir).map_err(setup)?);
        let server = start_mode_server(mode, heap, interval, store, None)?;
        let mut prepared = PreparedMode {
            mode,
            server,
            dir,
            skip: 0,
        };
        preload(spec, prepared.route())?;
        prepared.skip = prepared.server.checkpoints().len();
        Ok(prepared)
    }

    fn route(&self) -> Route {
        Route::Direct(self.server.addr())
    }

    /// Stop the server and label `report` with the checkpoints taken after
    /// the preload, keeping the bootstrap full dump first.
    fn finish(mut self, mut report: RunReport) -> RunReport {
        let mut checkpoints = self.server.checkpoints();
        self.server.stop();
        let _ = std::fs::remove_dir_all(&self.dir);
        if !checkpoints.is_empty() {
            let first = checkpoints.remove(0);
            checkpoints.drain(..self.skip.saturating_sub(1).min(checkpoints.len()));
            checkpoints.insert(0, first);
        }
        report.mode = self.mode.name().into();
        report.checkpoints = checkpoints;
        report
    }
}

/// Preload and run `spec` against a fresh primary in `mode`, storing
/// checkpoints in a fresh directory under `data_dir`.
pub fn run_mode(
    spec: &WorkloadSpec,
    mode: OverheadMode,
    interval: Duration,
    heap: HeapConfig,
    data_dir: &Path,
) -> Result<RunReport, BenchError> {
    let prepared = PreparedMode::new(spec, mode, interval, heap, data_dir)?;
    let report = run_workload(spec, prepared.route());
    Ok(prepared.finish(report?))
}

impl RunReport {
    /// Append a later measurement slice of the same mode.
    fn absorb(&mut self, slice: RunReport) {
        let shift = self.elapsed.as_micros() as u32;
        self.ops += slice.ops;
        self.errors += slice.errors;
        self.updates += slice.updates;
        self.gets += slice.gets;
        self.deletes += slice.deletes;
        self.elapsed += slice.elapsed;
        self.samples.extend(slice.samples.into_iter().map(|s| OpSample {
            start_us: s.start_us + shift,
            ..s
        }));
    }
}

/// Run `spec` against fresh primaries in every mode at once, alternating
/// the load between them in `slices` rounds with rotating order, so slow
/// drift in the host affects every mode alike. Idle servers keep their
/// checkpoint timers, which only suits modes whose idle checkpoints are
/// empty (see [`OverheadMode::idles_cheaply`]).
pub fn run_interleaved(
    spec: &WorkloadSpec,
    modes: &[OverheadMode],
    slices: usize,
    interval: Duration,
    heap: HeapConfig,
    data_dir: &Path,
) -> Result<Vec<RunReport>, BenchError> {
    let slices = slices.max(1);
    let prepared = modes
        .iter()
        .map(|&m| PreparedMode::new(spec, m, interval, heap, data_dir))
        .collect::<Result<Vec<_>, _>>()?;
    let mut slice_spec = spec.clone();
    slice_spec.op_count = spec.op_count / slices as u64;
    slice_spec.duration = spec.duration.map(|d| d / slices as u32);
    let mut reports: Vec<Option<RunReport>> = vec![None; modes.len()];
    for s in 0..slices {
        for k in 0..modes.len() {
            let m = (s + k) % modes.len();
            slice_spec.seed = spec.seed.wrapping_add((s * modes.len() + m) as u64 * 7919);
            let r = run_workload(&slice_spec, prepared[m].route())?;
            match &mut reports[m] {
                Some(acc) => acc.absorb(r),
                slot => *slot = Some(r),
            }
        }
    }
    Ok(prepared
        .into_iter()
        .zip(reports)
        .map(|(p, r)| p.finish(r.unwrap_or_default()))
        .collect())
}

#[derive(Debug, Clone)]
pub struct OverheadReport {
    /// `runs[r][m]` is run `r` of `modes[m]`.
    pub modes: Vec<OverheadMode>,
    pub runs: Vec<Vec<RunReport>>,
}

impl OverheadReport {
    pub fn mean_throughput(&self, m: usize) -> f64 {
        self.runs.iter().map(|r| r[m].throughput()).sum::<f64>() / self.runs.len().max(1) as f64
    }

    /// Mean throughput loss of mode `m` relative to mode `base`, in percent.
    pub fn overhead_pct(&self, m: usize, base: usize) -> f64 {
        let b = self.mean_throughput(base);
        (b - self.mean_throughput(m)) / b * 100.0
    }
}

/// Run every mode `runs` times. With `slices > 1`, modes that idle cheaply
/// share each run through [`run_interleaved`]; the others run alone after
/// them with the same budget.
pub fn run_overhead_experiment(
    spec: &WorkloadSpec,
    modes: &[OverheadMode],
    runs: usize,
    slices: usize,
    interval: Duration,
    heap: HeapConfig,
    data_dir: &Path,
) -> Result<OverheadReport, BenchError> {
    let mut all = Vec::with_capacity(runs);
    for r in 0..runs {
        let mut s = spec.clone();
        s.seed = spec.seed.wrapping_add(r as u64);
        let mut row: Vec<Option<RunReport>> = vec![None; modes.len()];
        let shared: Vec<usize> = (0..modes.len())
            .filter(|&i| slices > 1 && modes[i].idles_cheaply())
            .collect();
        if !shared.is_empty() {
            let picked: Vec<OverheadMode> = shared.iter().map(|&i| modes[i]).collect();
            for (i, rep) in shared.iter().zip(run_interleaved(&s, &picked, slices, interval, heap, data_dir)?) {
                row[*i] = Some(rep);
            }
        }
        for (i, &m) in modes.iter().enumerate() {
            if row[i].is_none() {
                row[i] = Some(run_mode(&s, m, interval, heap, data_dir)?);
            }
        }
        all.push(row.into_iter().map(Option::unwrap).collect());
    }
    Ok(OverheadReport {
        modes: modes.to_vec(),
        runs: all,
    })
}

/// One-sided sign test: probability of at least `wins` successes in `n`
/// fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    for k in wins..=n {
        p += binomial(n, k) / 2f64.powi(n as i32);
    }
    p
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone)]
pub struct FailoverConfig {
    pub mode: Mode,
    pub keys: u64,
    pub value_size: usize,
    pub heartbeat_interval: Duration,
    pub miss_threshold: u32,
    pub checkpoint_interval: Duration,
    pub heap: HeapConfig,
    /// Stored on disk under this directory, or in memory if `None`.
    pub data_dir: Option<PathBuf>,
    pub promotion_timeout: Duration,
    pub seed: u64,
}

impl Default for FailoverConfig {
    fn default() -> Self {
        FailoverConfig {
            mode: Mode::Async,
            keys: 1000,
            value_size: 1000,
            heartbeat_interval: Duration::from_millis(100),
            miss_threshold: 3,
            checkpoint_interval: Duration::from_millis(200),
            heap: default_kv_heap(),
            data_dir: None,
            promotion_timeout: Duration::from_secs(30),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FailoverReport {
    pub mode: Mode,
    /// Kill to the first complete read of every key.
    pub recovery: Duration,
    pub detect: Duration,
    pub fetch: Duration,
    pub merge: Duration,
    pub restore: Duration,
    /// Application start, view change and client redirection.
    pub redirect: Duration,
    pub chain_len: usize,
    pub restored_seq: u64,
    /// Keys whose value differs from the last acknowledged write.
    pub lost_writes: usize,
    /// Restored heap hash is one recorded at a checkpoint.
    pub hash_at_boundary: bool,
}

impl FailoverReport {
    pub fn components_sum(&self) -> Duration {
        self.detect + self.fetch + self.merge + self.restore + self.redirect
    }
}

/// Load a cluster, kill the primary, and time the recovery.
pub fn run_failover_experiment(cfg: &FailoverConfig) -> Result<FailoverReport, BenchError> {
    let bind = || TcpListener::bind("127.0.0.1:0").map_err(setup);
    let conf = confsvc::serve(
        bind()?,
        ConfConfig {
            heartbeat_interval: cfg.heartbeat_interval,
            miss_threshold: cfg.miss_threshold,
        },
    )
    .map_err(setup)?;
    let store = match &cfg.data_dir {
        Some(d) => {
            let dir = d.join(format!("failover-store-{}", std::process::id()));
            let _ = std::fs::remove_dir_all(&dir);
            storesvc::serve(bind()?, DirStore::open(&dir).map_err(setup)?)
        }
        None => storesvc::serve(bind()?, MemStore::new()),
    }
    .map_err(setup)?;

    let hashes: Arc<Mutex<HashSet<u64>>> = Arc::new(Mutex::new(HashSet::new()));
    let observer: Observer = {
        let hashes = hashes.clone();
        Box::new(move |w, _seq| {
            hashes.lock().insert(w.live_page_hash());
        })
    };
    let mut node_cfg = NodeConfig::new("primary");
    node_cfg.heap = cfg.heap;
    node_cfg.primary.mode = cfg.mode;
    node_cfg.primary.interval = cfg.checkpoint_interval;
    node_cfg.primary.heartbeat_interval = cfg.heartbeat_interval;
    let mut primary = KvNode::start_primary(
        &node_cfg,
        bind()?,
        Arc::new(StoreClient::new(store.addr())),
        Some(conf.addr()),
        Some(observer),
        None,
    )
    .map_err(setup)?;
    let mut backup_cfg = node_cfg.clone();
    backup_cfg.primary.node_id = "backup".into();
    let mut bcfg = BackupConfig::new("backup");
    bcfg.heartbeat_interval = cfg.heartbeat_interval;
    let mut backup = KvBackupNode::start(
        backup_cfg,
        bcfg,
        "127.0.0.1:0".parse().unwrap(),
        Arc::new(StoreClient::new(store.addr())),
        conf.addr(),
        None,
    )
    .map_err(setup)?;

    let mut client = KvClient::new(Route::Conf(conf.addr()), 42, ClientOptions::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shadow = BTreeMap::new();
    for k in 0..cfg.keys {
        let mut v = vec![0u8; cfg.value_size];
        rng.fill_bytes(&mut v);
        client.put(&key_of(k), &v).map_err(setup)?;
        shadow.insert(k, v);
    }
    // let the periodic agent run while the primary is idle
    if cfg.mode == Mode::Async {
        thread::sleep(cfg.checkpoint_interval * 2);
    }

    let killed = Instant::now();
    primary.kill();
    let mut lost_writes = 0;
    for k in 0..cfg.keys {
        let got = client.get(&key_of(k)).map_err(setup)?;
        if got.as_deref() != Some(shadow[&k].as_slice()) {
            lost_writes += 1;
        }
    }
    let done = Instant::now();
    let recovery = done - killed;
    let report = backup
        .wait_promoted(cfg.promotion_timeout)
        .ok_or(BenchError::NoPromotion(cfg.promotion_timeout))?
        .map_err(BenchError::Verify)?;

    let restored_hash = {
        let node = backup.node();
        let guard = node.lock();
        let n = guard.as_ref().ok_or_else(|| BenchError::Verify("no promoted node".into()))?;
        n.app().heap().mutate(|h| h.live_page_hash())
    };
    let hash_at_boundary = hashes.lock().contains(&restored_hash);
    backup.shutdown();
    if let Some(d) = &cfg.data_dir {
        let _ = std::fs::remove_dir_all(d.join(format!("failover-store-{}", std::process::id())));
    }

    let t = &report.timings;
    let detect = report.noticed_at.saturating_duration_since(killed);
    let recovered_at = report.noticed_at + t.fetch + t.merge + t.restore;
    Ok(FailoverReport {
        mode: cfg.mode,
        recovery,
        detect,
        fetch: t.fetch,
        merge: t.merge,
        restore: t.restore,
        redirect: done.saturating_duration_since(recovered_at),
        chain_len: report.chain_len,
        restored_seq: report.restored_seq,
        lost_writes,
        hash_at_boundary,
    })
}

pub const TSV_HEADER: &str =
    "record\tworkload\tmode\trun\tseq\tckpt_kind\tinitial_pages\tafter_pass1\tafter_pass2\tbytes\tpause_us\tops\telapsed_ms\tops_per_sec";

/// Tab-separated records: one `run` row per run and one `checkpoint` row
/// per checkpoint, under [`TSV_HEADER`].
pub fn to_tsv(runs: &[(usize, &RunReport)]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for (run, r) in runs {
        let _ = writeln!(
            out,
            "run\t{}\t{}\t{run}\t\t\t\t\t\t\t\t{}\t{}\t{:.1}",
            r.workload,
            r.mode,
            r.ops,
            r.elapsed.as_millis(),
            r.throughput()
        );
        for c in &r.checkpoints {
            let _ = writeln!(
                out,
                "checkpoint\t{}\t{}\t{run}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t\t\t",
                r.workload,
                r.mode,
                c.seq,
                c.kind,
                c.selection.0,
                c.selection.1,
                c.selection.2,
                c.total_bytes(),
                c.pause.as_micros()
            );
        }
    }
    out
}

/// Plain-text summary of checkpoint selections and sizes for one run.
pub fn checkpoint_table(r: &RunReport) -> String {
    let steady = r.steady_checkpoints();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "workload {} mode {}: {} ops in {:.2}s = {:.0} ops/s ({} errors)",
        r.workload,
        r.mode,
        r.ops,
        r.elapsed.as_secs_f64(),
        r.throughput(),
        r.errors
    );
    if steady.is_empty() {
        return out;
    }
    let n = steady.len() as f64;
    let mean = |f: &dyn Fn(&CheckpointStat) -> f64| steady.iter().map(f).sum::<f64>() / n;
    let _ = writeln!(out, "{:>12} {:>12} {:>12} {:>12} {:>10}", "checkpoints", "initial", "after_pass1", "after_pass2", "size_kb");
    let _ = writeln!(
        out,
        "{:>12} {:>12.2} {:>12.2} {:>12.2} {:>10.2}",
        steady.len(),
        mean(&|c| c.selection.0 as f64),
        mean(&|c| c.selection.1 as f64),
        mean(&|c| c.selection.2 as f64),
        mean(&|c| c.total_bytes() as f64 / 1024.0)
    );
    out
}
