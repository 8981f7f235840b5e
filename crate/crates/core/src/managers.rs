//! Primary and backup manager roles.
//!
//! The primary runs the checkpoint agent, an uploader that replicates each
//! checkpoint after the world has restarted, and a heartbeat sender. The
//! backup heartbeats, compacts the stored chain on request, and on promotion
//! reassembles the newest complete checkpoint.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{error, info, warn};
use parking_lot::Mutex;
use thiserror::Error;

use crate::confsvc::{ConfClient, Directive, Heartbeat, Role};
use crate::engine::{run_periodic, Checkpointer, DumpPolicy, EngineError, PeriodicHandle, TakenCheckpoint};
use crate::heap::HeapConfig;
use crate::imgfmt::{
    decode_core_unverified, encoded_core_len, read_named, write_checkpoint, write_named, Checkpoint,
    CheckpointIoError, CheckpointKind,
};
use crate::restore::{compact, restore, ReopenOptions, RestoreError, ResumeContext};
use crate::storesvc::{BlobFamily, BlobName, BlobStore, BlobSuffix, StoreError};

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error("replication failed: {0}")]
    ReplicationFailed(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Restore(#[from] RestoreError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no complete checkpoint in storage")]
    NoCheckpoint,
    #[error("configuration service: {0}")]
    Conf(String),
    #[error("manager stopped")]
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Periodic checkpoints replicated in the background.
    Async,
    /// One checkpoint per expose call; the caller waits for storage.
    Sync,
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(50),
        }
    }
}

pub const DEFAULT_CHECKPOINT_INTERVAL: Duration = Duration::from_millis(200);

#[derive(Debug, Clone)]
pub struct PrimaryConfig {
    pub node_id: String,
    /// Address clients are redirected to.
    pub app_addr: String,
    pub interval: Duration,
    pub mode: Mode,
    pub heartbeat_interval: Duration,
    pub retry: RetryPolicy,
    /// Checkpoints waiting for the uploader before the agent blocks.
    pub queue_depth: usize,
    /// Register as primary on start. A promoted backup has already been
    /// named primary and skips this.
    pub register: bool,
}

impl PrimaryConfig {
    pub fn new(node_id: impl Into<String>, app_addr: impl Into<String>) -> Self {
        PrimaryConfig {
            node_id: node_id.into(),
            app_addr: app_addr.into(),
            interval: DEFAULT_CHECKPOINT_INTERVAL,
            mode: Mode::Async,
            heartbeat_interval: crate::confsvc::DEFAULT_HEARTBEAT_INTERVAL,
            retry: RetryPolicy::default(),
            queue_depth: 2,
            register: true,
        }
    }
}

/// Per-checkpoint measurements.
#[derive(Debug, Clone)]
pub struct CheckpointStat {
    pub seq: u64,
    pub kind: CheckpointKind,
    pub selection: (u64, usize, usize),
    pub pause: Duration,
    pub core_bytes: usize,
    pub mem_bytes: usize,
    pub upload: Option<Duration>,
}

impl CheckpointStat {
    fn of(t: &TakenCheckpoint) -> Self {
        CheckpointStat {
            seq: t.checkpoint.core.seq,
            kind: t.checkpoint.core.kind,
            selection: t.selection.counts(),
            pause: t.pause,
            core_bytes: encoded_core_len(&t.checkpoint.core),
            mem_bytes: t.checkpoint.mem.0.len(),
            upload: None,
        }
    }

    pub fn total_bytes(&self) -> usize {
        self.core_bytes + self.mem_bytes
    }
}

/// Callbacks from a primary manager to its application.
#[derive(Default, Clone)]
pub struct PrimaryEvents {
    /// The configuration service named another primary.
    pub on_deposed: Option<Arc<dyn Fn() + Send + Sync>>,
    /// Replication failed beyond the retry budget.
    pub on_fatal: Option<Arc<dyn Fn(&str) + Send + Sync>>,
}

static HEARTBEAT_SEQ: AtomicU64 = AtomicU64::new(0);

fn next_heartbeat_seq() -> u64 {
    HEARTBEAT_SEQ.fetch_add(1, Ordering::SeqCst) + 1
}

struct Shared {
    store: Arc<dyn BlobStore>,
    retry: RetryPolicy,
    /// Cleared on kill, deposition or fatal error; no store write follows.
    alive: AtomicBool,
    failed: AtomicBool,
    replicated: AtomicU64,
    stats: Mutex<Vec<CheckpointStat>>,
    events: PrimaryEvents,
}

impl Shared {
    fn upload(&self, t: &TakenCheckpoint) -> Result<(), ManagerError> {
        let started = Instant::now();
        let mut backoff = self.retry.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.retry.attempts.max(1) {
            if !self.alive.load(Ordering::SeqCst) {
                return Err(ManagerError::Stopped);
            }
            match write_checkpoint(&*self.store, &t.checkpoint.core, &t.checkpoint.mem) {
                Ok(_) => {
                    let seq = t.checkpoint.core.seq;
                    self.replicated.fetch_max(seq, Ordering::SeqCst);
                    if let Some(s) = self.stats.lock().iter_mut().rev().find(|s| s.seq == seq) {
                        s.upload = Some(started.elapsed());
                    }
                    if t.checkpoint.core.kind == CheckpointKind::Full {
                        self.prune_before(seq);
                    }
                    return Ok(());
                }
                Err(e) => {
                    last = e.to_string();
                    warn!("upload of checkpoint {} failed (attempt {attempt}): {e}", t.checkpoint.core.seq);
                    if attempt < self.retry.attempts {
                        thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(ManagerError::ReplicationFailed(last))
    }

    /// Drop blobs made redundant by a full checkpoint at `seq`.
    fn prune_before(&self, seq: u64) {
        let Ok(names) = self.store.list("") else { return };
        for name in names.into_iter().filter(|n| n.seq() < seq) {
            if let Err(e) = self.store.delete(&name) {
                warn!("prune {name}: {e}");
            }
        }
    }

    fn fatal(&self, msg: &str) {
        error!("replication failed beyond retry budget: {msg}");
        self.failed.store(true, Ordering::SeqCst);
        self.alive.store(false, Ordering::SeqCst);
        if let Some(f) = &self.events.on_fatal {
            f(msg);
        }
    }
}

/// Expose hook handed to request handlers in sync mode.
pub type ExposeFn = Arc<dyn Fn() -> Result<u64, String> + Send + Sync>;

/// A running primary manager.
pub struct PrimaryManager {
    mode: Mode,
    checkpointer: Arc<Mutex<Checkpointer>>,
    shared: Arc<Shared>,
    periodic: Mutex<Option<PeriodicHandle>>,
    uploader: Mutex<Option<JoinHandle<()>>>,
    heartbeat: Mutex<Option<(mpsc::Sender<()>, JoinHandle<()>)>>,
}

impl PrimaryManager {
    /// Register, take and replicate the initial full checkpoint, then start
    /// the background activities for `cfg.mode`.
    pub fn start(
        cfg: PrimaryConfig,
        checkpointer: Checkpointer,
        store: Arc<dyn BlobStore>,
        conf: Option<SocketAddr>,
        events: PrimaryEvents,
    ) -> Result<Self, ManagerError> {
        assert!(!cfg.interval.is_zero(), "checkpoint interval must be positive");
        if let (Some(addr), true) = (conf, cfg.register) {
            ConfClient::new(addr)
                .register(&cfg.node_id, Role::Primary, &cfg.app_addr)
                .map_err(|e| ManagerError::Conf(e.to_string()))?;
        }
        let shared = Arc::new(Shared {
            store,
            retry: cfg.retry,
            alive: AtomicBool::new(true),
            failed: AtomicBool::new(false),
            replicated: AtomicU64::new(0),
            stats: Mutex::new(Vec::new()),
            events,
        });
        let checkpointer = Arc::new(Mutex::new(checkpointer));
        {
            let mut c = checkpointer.lock();
            let first = c.checkpoint_once()?;
            shared.stats.lock().push(CheckpointStat::of(&first));
            shared.upload(&first)?;
        }

        let mgr = PrimaryManager {
            mode: cfg.mode,
            checkpointer: checkpointer.clone(),
            shared: shared.clone(),
            periodic: Mutex::new(None),
            uploader: Mutex::new(None),
            heartbeat: Mutex::new(None),
        };
        if cfg.mode == Mode::Async {
            let (tx, rx) = mpsc::sync_channel::<TakenCheckpoint>(cfg.queue_depth.max(1));
            let up = shared.clone();
            *mgr.uploader.lock() = Some(
                thread::Builder::new()
                    .name("ckpt-upload".into())
                    .spawn(move || {
                        for t in rx {
                            if !up.alive.load(Ordering::SeqCst) {
                                break;
                            }
                            match up.upload(&t) {
                                Ok(()) => {}
                                Err(ManagerError::Stopped) => break,
                                Err(e) => {
                                    up.fatal(&e.to_string());
                                    break;
                                }
                            }
                        }
                    })
                    .expect("spawn uploader"),
            );
            let sink_shared = shared.clone();
            *mgr.periodic.lock() = Some(run_periodic(checkpointer, cfg.interval, move |t| {
                if !sink_shared.alive.load(Ordering::SeqCst) {
                    return;
                }
                sink_shared.stats.lock().push(CheckpointStat::of(&t));
                let _ = tx.send(t);
            }));
        }
        if let Some(addr) = conf {
            let (stop_tx, stop_rx) = mpsc::channel::<()>();
            let hb_shared = shared.clone();
            let node_id = cfg.node_id.clone();
            let interval = cfg.heartbeat_interval;
            let t = thread::Builder::new()
                .name("heartbeat".into())
                .spawn(move || {
                    let mut client = ConfClient::new(addr);
                    loop {
                        if !hb_shared.alive.load(Ordering::SeqCst) {
                            return;
                        }
                        let hb = Heartbeat {
                            node_id: node_id.clone(),
                            seq: next_heartbeat_seq(),
                            latest_checkpoint_seq: hb_shared.replicated.load(Ordering::SeqCst),
                        };
                        match client.heartbeat(&hb) {
                            Ok(r) if r.directive == Directive::Deposed => {
                                warn!("{node_id} deposed in view {}", r.view_number);
                                hb_shared.alive.store(false, Ordering::SeqCst);
                                if let Some(f) = &hb_shared.events.on_deposed {
                                    f();
                                }
                                return;
                            }
                            Ok(_) => {}
                            Err(e) => warn!("heartbeat failed: {e}"),
                        }
                        match stop_rx.recv_timeout(interval) {
                            Err(RecvTimeoutError::Timeout) => {}
                            _ => return,
                        }
                    }
                })
                .expect("spawn heartbeat");
            *mgr.heartbeat.lock() = Some((stop_tx, t));
        }
        Ok(mgr)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Make every write that precedes this call durable before returning.
    ///
    /// Sync mode takes one checkpoint and waits for storage. Async mode
    /// returns the latest replicated seq immediately.
    pub fn expose(&self) -> Result<u64, ManagerError> {
        if self.mode == Mode::Async {
            return Ok(self.replicated_seq());
        }
        if !self.shared.alive.load(Ordering::SeqCst) {
            return Err(ManagerError::Stopped);
        }
        let mut c = self.checkpointer.lock();
        let t = c.checkpoint_once()?;
        self.shared.stats.lock().push(CheckpointStat::of(&t));
        let seq = t.checkpoint.core.seq;
        match self.shared.upload(&t) {
            Ok(()) => Ok(seq),
            Err(e) => {
                // later incrementals would name a parent storage never saw
                self.shared.fatal(&e.to_string());
                Err(e)
            }
        }
    }

    /// Expose hook that does not keep the manager alive.
    pub fn expose_fn(self: &Arc<Self>) -> ExposeFn {
        let me = Arc::downgrade(self);
        Arc::new(move || match me.upgrade() {
            Some(m) => m.expose().map_err(|e| e.to_string()),
            None => Err(ManagerError::Stopped.to_string()),
        })
    }

    pub fn replicated_seq(&self) -> u64 {
        self.shared.replicated.load(Ordering::SeqCst)
    }

    pub fn last_seq(&self) -> u64 {
        self.checkpointer.lock().last_seq()
    }

    pub fn stats(&self) -> Vec<CheckpointStat> {
        self.shared.stats.lock().clone()
    }

    pub fn is_failed(&self) -> bool {
        self.shared.failed.load(Ordering::SeqCst)
    }

    pub fn is_alive(&self) -> bool {
        self.shared.alive.load(Ordering::SeqCst)
    }

    pub fn checkpointer(&self) -> &Arc<Mutex<Checkpointer>> {
        &self.checkpointer
    }

    fn halt(&self) {
        if let Some((tx, t)) = self.heartbeat.lock().take() {
            drop(tx);
            let _ = t.join();
        }
        if let Some(mut p) = self.periodic.lock().take() {
            p.stop();
        }
        if let Some(t) = self.uploader.lock().take() {
            let _ = t.join();
        }
    }

    /// Crash: stop everything without flushing. A store write already in
    /// flight completes; none starts afterwards.
    pub fn kill(&self) {
        self.shared.alive.store(false, Ordering::SeqCst);
        self.halt();
    }

    /// Stop checkpointing after replicating everything already taken.
    pub fn stop(&self) {
        if let Some(mut p) = self.periodic.lock().take() {
            p.stop();
        }
        if let Some(t) = self.uploader.lock().take() {
            let _ = t.join();
        }
        self.shared.alive.store(false, Ordering::SeqCst);
        self.halt();
    }
}

impl Drop for PrimaryManager {
    fn drop(&mut self) {
        self.kill();
    }
}

/// The newest reconstructible chain in storage.
#[derive(Debug)]
pub struct FetchedChain {
    pub chain: Vec<Checkpoint>,
    /// Highest seq of any blob in storage.
    pub max_seq_seen: u64,
    /// Seqs present in storage but unreachable from the chain.
    pub lost: Vec<u64>,
}

/// Assemble the longest chain starting at the newest usable full
/// checkpoint and extending until the first gap.
pub fn fetch_chain(store: &dyn BlobStore) -> Result<FetchedChain, ManagerError> {
    let names = store.list("")?;
    let max_seq_seen = names.iter().map(BlobName::seq).max().unwrap_or(0);
    let compacts: Vec<u64> = names
        .iter()
        .filter(|n| n.family() == BlobFamily::Compact && n.suffix() == BlobSuffix::Core)
        .map(BlobName::seq)
        .collect();
    let floor = compacts.iter().copied().max().unwrap_or(0);

    // (kind, parent) of every checkpoint core at or above the newest compact
    let mut headers: BTreeMap<u64, (CheckpointKind, u64)> = BTreeMap::new();
    for n in names
        .iter()
        .filter(|n| n.family() == BlobFamily::Checkpoint && n.suffix() == BlobSuffix::Core && n.seq() >= floor)
    {
        let bytes = match store.get(n) {
            Ok(b) => b,
            Err(StoreError::NotFound(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        match decode_core_unverified(&bytes) {
            Ok(core) if core.seq == n.seq() => {
                headers.insert(n.seq(), (core.kind, core.parent_seq));
            }
            Ok(_) | Err(_) => warn!("ignoring unreadable {n}"),
        }
    }

    let mut bases: Vec<(u64, (BlobName, BlobName))> = headers
        .iter()
        .filter(|(_, (k, _))| *k == CheckpointKind::Full)
        .map(|(&s, _)| (s, (BlobName::checkpoint_core(s), BlobName::checkpoint_mem(s))))
        .collect();
    bases.extend(compacts.iter().map(|&s| (s, (BlobName::compact_core(s), BlobName::compact_mem(s)))));
    bases.sort_by_key(|(s, _)| *s);

    let mut base = None;
    for (seq, names) in bases.into_iter().rev() {
        match read_named(store, names) {
            Ok(c) if c.core.kind == CheckpointKind::Full => {
                base = Some(c);
                break;
            }
            Ok(_) => {}
            Err(e) => warn!("base {seq} unusable: {e}"),
        }
    }
    let base = base.ok_or(ManagerError::NoCheckpoint)?;
    let mut chain = vec![base];
    loop {
        let prev = chain.last().unwrap().core.seq;
        let next = prev + 1;
        match headers.get(&next) {
            Some(&(CheckpointKind::Incremental, parent)) if parent == prev => {}
            _ => break,
        }
        match read_named(store, (BlobName::checkpoint_core(next), BlobName::checkpoint_mem(next))) {
            Ok(c) => chain.push(c),
            Err(CheckpointIoError::Format(e)) => {
                warn!("checkpoint {next} fails verification: {e}");
                break;
            }
            Err(CheckpointIoError::MissingPayload(_)) | Err(CheckpointIoError::Storage(StoreError::NotFound(_))) => break,
            Err(CheckpointIoError::Storage(e)) => return Err(e.into()),
        }
    }
    let last = chain.last().unwrap().core.seq;
    let lost: Vec<u64> = headers.keys().copied().filter(|&s| s > last).collect();
    if !lost.is_empty() {
        warn!("data loss: chain ends at {last}, storage holds checkpoints {lost:?} beyond it");
    }
    Ok(FetchedChain {
        chain,
        max_seq_seen,
        lost,
    })
}

/// Fold the stored chain into compact blobs and drop what they cover.
/// Returns the compacted seq, or `None` if there was nothing to fold.
pub fn compact_store(store: &dyn BlobStore) -> Result<Option<u64>, ManagerError> {
    let fetched = fetch_chain(store)?;
    if fetched.chain.len() < 2 {
        return Ok(None);
    }
    let merged = compact(&fetched.chain)?;
    let seq = merged.core.seq;
    write_named(
        store,
        &merged.core,
        &merged.mem,
        (BlobName::compact_core(seq), BlobName::compact_mem(seq)),
    )
    .map_err(|e| ManagerError::ReplicationFailed(e.to_string()))?;
    for name in store.list("")? {
        let covered = match name.family() {
            BlobFamily::Checkpoint => name.seq() <= seq,
            BlobFamily::Compact => name.seq() < seq,
        };
        if covered {
            if let Err(e) = store.delete(&name) {
                warn!("delete {name}: {e}");
            }
        }
    }
    info!("compacted {} checkpoints into compact-{seq}", fetched.chain.len());
    Ok(Some(seq))
}

/// Time spent in each recovery step.
#[derive(Debug, Clone, Default)]
pub struct RecoveryTimings {
    pub fetch: Duration,
    pub merge: Duration,
    pub restore: Duration,
}

pub struct Recovered {
    pub context: ResumeContext,
    pub chain_len: usize,
    pub max_seq_seen: u64,
    pub lost: Vec<u64>,
    pub timings: RecoveryTimings,
}

/// Fetch, compact and restore the newest complete state in `store`.
pub fn recover(store: &dyn BlobStore, heap: HeapConfig, reopen: &ReopenOptions) -> Result<Recovered, ManagerError> {
    let t0 = Instant::now();
    let fetched = fetch_chain(store)?;
    let t1 = Instant::now();
    let merged = compact(&fetched.chain)?;
    let t2 = Instant::now();
    let context = restore(&merged, heap, reopen)?;
    let t3 = Instant::now();
    Ok(Recovered {
        context,
        chain_len: fetched.chain.len(),
        max_seq_seen: fetched.max_seq_seen,
        lost: fetched.lost,
        timings: RecoveryTimings {
            fetch: t1 - t0,
            merge: t2 - t1,
            restore: t3 - t2,
        },
    })
}

#[derive(Debug, Clone)]
pub struct BackupConfig {
    pub node_id: String,
    pub heartbeat_interval: Duration,
    /// Compact the stored chain this often without waiting for a request.
    pub compact_every: Option<Duration>,
}

impl BackupConfig {
    pub fn new(node_id: impl Into<String>) -> Self {
        BackupConfig {
            node_id: node_id.into(),
            heartbeat_interval: crate::confsvc::DEFAULT_HEARTBEAT_INTERVAL,
            compact_every: None,
        }
    }
}

/// Register as backup and heartbeat until promoted.
///
/// Compaction requests are served in between. Returns the instant the
/// promotion was noticed, or `Stopped` once `stop` is set.
pub fn await_promotion(
    cfg: &BackupConfig,
    conf: SocketAddr,
    store: &dyn BlobStore,
    stop: &AtomicBool,
) -> Result<Instant, ManagerError> {
    let mut client = ConfClient::new(conf);
    client
        .register(&cfg.node_id, Role::Backup, "")
        .map_err(|e| ManagerError::Conf(e.to_string()))?;
    let mut last_compact = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        let hb = Heartbeat {
            node_id: cfg.node_id.clone(),
            seq: next_heartbeat_seq(),
            latest_checkpoint_seq: 0,
        };
        let mut compact_now = cfg.compact_every.is_some_and(|every| last_compact.elapsed() >= every);
        match client.heartbeat(&hb) {
            Ok(r) if r.directive == Directive::Promote => {
                info!("{} promoted", cfg.node_id);
                return Ok(Instant::now());
            }
            Ok(r) if r.directive == Directive::Compact => compact_now = true,
            Ok(_) => {}
            Err(e) => warn!("heartbeat failed: {e}"),
        }
        if compact_now {
            last_compact = Instant::now();
            if let Err(e) = compact_store(store) {
                warn!("compaction failed: {e}");
            }
        }
        thread::sleep(cfg.heartbeat_interval);
    }
    Err(ManagerError::Stopped)
}

/// Checkpointer for a promoted node: numbering continues after everything
/// in storage and the first dump is full.
pub fn continuing_checkpointer(
    heap: Arc<crate::heap::ManagedHeap>,
    source: Arc<dyn crate::engine::CheckpointSource>,
    policy: DumpPolicy,
    max_seq_seen: u64,
) -> Checkpointer {
    Checkpointer::new(heap, source, policy).continuing_after(max_seq_seen)
}
