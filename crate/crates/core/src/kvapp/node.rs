//! KV primary and backup nodes: the application wired to the managers.

use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{error, info, warn};
use parking_lot::Mutex;

use super::server::{serve, KvApp, KvServer, LISTENER_DESCRIPTOR};
use crate::confsvc::ConfClient;
use crate::engine::{Checkpointer, DumpPolicy};
use crate::heap::{HeapConfig, ManagedHeap, StoppedWorld};
use crate::managers::{
    await_promotion, recover, BackupConfig, ManagerError, Mode, PrimaryConfig, PrimaryEvents, PrimaryManager,
    RecoveryTimings,
};
use crate::restore::{DescriptorReopenFailed, ReopenOptions};
use crate::storesvc::BlobStore;

/// Pages mapped by a KV heap: a 64 MiB arena.
pub const KV_HEAP_PAGES: u64 = 16384;

pub fn default_kv_heap() -> HeapConfig {
    HeapConfig::new(4096, KV_HEAP_PAGES, 4 * KV_HEAP_PAGES).expect("valid heap config")
}

#[derive(Clone)]
pub struct NodeConfig {
    pub primary: PrimaryConfig,
    pub heap: HeapConfig,
    pub dedup: bool,
    pub policy: DumpPolicy,
}

impl NodeConfig {
    pub fn new(node_id: impl Into<String>) -> Self {
        NodeConfig {
            primary: PrimaryConfig::new(node_id, ""),
            heap: default_kv_heap(),
            dedup: false,
            policy: DumpPolicy::Incremental,
        }
    }
}

/// Runs inside each stopped world with the seq being taken.
pub type Observer = Box<dyn FnMut(&StoppedWorld<'_>, u64) + Send>;

/// A serving KV primary.
pub struct KvNode {
    server: KvServer,
    manager: Arc<PrimaryManager>,
}

impl KvNode {
    fn launch(
        cfg: &NodeConfig,
        app: Arc<KvApp>,
        listener: TcpListener,
        checkpointer: Checkpointer,
        store: Arc<dyn BlobStore>,
        conf: Option<SocketAddr>,
        on_fatal: Option<Arc<dyn Fn(&str) + Send + Sync>>,
    ) -> Result<Self, ManagerError> {
        let server = serve(listener, app).map_err(|e| ManagerError::Conf(e.to_string()))?;
        let mut pcfg = cfg.primary.clone();
        pcfg.app_addr = server.addr().to_string();
        let serving = server.serving_flag();
        let deposed_flag = serving.clone();
        let events = PrimaryEvents {
            on_deposed: Some(Arc::new(move || deposed_flag.store(false, Ordering::SeqCst))),
            on_fatal: Some(Arc::new(move |msg: &str| {
                serving.store(false, Ordering::SeqCst);
                if let Some(f) = &on_fatal {
                    f(msg);
                }
            })),
        };
        let manager = Arc::new(PrimaryManager::start(pcfg, checkpointer, store, conf, events)?);
        if manager.mode() == Mode::Sync {
            server.set_expose(Some(manager.expose_fn()));
        }
        server.set_serving(true);
        Ok(KvNode { server, manager })
    }

    /// Start a fresh primary with an empty store.
    pub fn start_primary(
        cfg: &NodeConfig,
        listener: TcpListener,
        store: Arc<dyn BlobStore>,
        conf: Option<SocketAddr>,
        observer: Option<Observer>,
        on_fatal: Option<Arc<dyn Fn(&str) + Send + Sync>>,
    ) -> Result<Self, ManagerError> {
        let heap = Arc::new(ManagedHeap::new(cfg.heap).map_err(crate::engine::EngineError::from)?);
        let app = Arc::new(
            KvApp::create(heap.clone(), cfg.dedup).map_err(|e| ManagerError::Conf(format!("create app: {e}")))?,
        );
        let mut checkpointer = Checkpointer::new(heap, app.clone(), cfg.policy);
        if let Some(o) = observer {
            checkpointer.observe_stopped(o);
        }
        Self::launch(cfg, app, listener, checkpointer, store, conf, on_fatal)
    }

    pub fn addr(&self) -> SocketAddr {
        self.server.addr()
    }

    pub fn app(&self) -> &Arc<KvApp> {
        self.server.app()
    }

    pub fn server(&self) -> &KvServer {
        &self.server
    }

    pub fn manager(&self) -> &Arc<PrimaryManager> {
        &self.manager
    }

    /// Crash in place: no more replication or heartbeats, connections cut.
    pub fn kill(&mut self) {
        self.manager.kill();
        self.server.shutdown();
    }

    /// Stop after replicating every checkpoint already taken.
    pub fn stop(&mut self) {
        self.server.set_serving(false);
        self.manager.stop();
        self.server.shutdown();
    }
}

impl Drop for KvNode {
    fn drop(&mut self) {
        self.kill();
    }
}

/// What a promotion took.
#[derive(Debug, Clone)]
pub struct PromotionReport {
    pub noticed_at: Instant,
    pub timings: RecoveryTimings,
    pub chain_len: usize,
    pub restored_seq: u64,
    pub lost: Vec<u64>,
    pub reopen_failed: Vec<DescriptorReopenFailed>,
    /// Application and manager start, including the first full dump.
    pub start_app: Duration,
    pub complete_failover: Duration,
    pub serving_at: Instant,
    pub addr: SocketAddr,
}

type PromotionResult = Result<PromotionReport, String>;

/// A backup that turns into a [`KvNode`] when promoted.
pub struct KvBackupNode {
    stop: Arc<AtomicBool>,
    node: Arc<Mutex<Option<KvNode>>>,
    report: Arc<Mutex<Option<PromotionResult>>>,
    thread: Option<JoinHandle<()>>,
}

impl KvBackupNode {
    /// Register as backup. On promotion, restore and serve on the port the
    /// primary listened on, or on `fallback` if that cannot be bound.
    pub fn start(
        cfg: NodeConfig,
        backup: BackupConfig,
        fallback: SocketAddr,
        store: Arc<dyn BlobStore>,
        conf: SocketAddr,
        on_fatal: Option<Arc<dyn Fn(&str) + Send + Sync>>,
    ) -> io::Result<Self> {
        let stop = Arc::new(AtomicBool::new(false));
        let node = Arc::new(Mutex::new(None));
        let report = Arc::new(Mutex::new(None));
        let thread = {
            let (stop, node, report) = (stop.clone(), node.clone(), report.clone());
            thread::Builder::new().name("backup".into()).spawn(move || {
                let noticed_at = match await_promotion(&backup, conf, &*store, &stop) {
                    Ok(t) => t,
                    Err(ManagerError::Stopped) => return,
                    Err(e) => {
                        error!("backup stopped: {e}");
                        *report.lock() = Some(Err(e.to_string()));
                        return;
                    }
                };
                let result = promote(&cfg, noticed_at, fallback, store, conf, on_fatal);
                match result {
                    Ok((n, r)) => {
                        *node.lock() = Some(n);
                        *report.lock() = Some(Ok(r));
                    }
                    Err(e) => {
                        error!("promotion failed: {e}");
                        *report.lock() = Some(Err(e));
                    }
                }
            })?
        };
        Ok(KvBackupNode {
            stop,
            node,
            report,
            thread: Some(thread),
        })
    }

    pub fn report(&self) -> Option<PromotionResult> {
        self.report.lock().clone()
    }

    /// Block until promoted (or promotion failed) or `timeout` passes.
    pub fn wait_promoted(&self, timeout: Duration) -> Option<PromotionResult> {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if let Some(r) = self.report() {
                return Some(r);
            }
            thread::sleep(Duration::from_millis(2));
        }
        None
    }

    /// The promoted node, once there is one.
    pub fn node(&self) -> Arc<Mutex<Option<KvNode>>> {
        self.node.clone()
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        if let Some(mut n) = self.node.lock().take() {
            n.kill();
        }
    }
}

impl Drop for KvBackupNode {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn promote(
    cfg: &NodeConfig,
    noticed_at: Instant,
    fallback: SocketAddr,
    store: Arc<dyn BlobStore>,
    conf: SocketAddr,
    on_fatal: Option<Arc<dyn Fn(&str) + Send + Sync>>,
) -> Result<(KvNode, PromotionReport), String> {
    let reopen = ReopenOptions {
        bind_ip: fallback.ip(),
        skip: false,
    };
    let mut rec = recover(&*store, cfg.heap, &reopen).map_err(|e| e.to_string())?;
    if !rec.lost.is_empty() {
        warn!("restored checkpoint {} with later checkpoints {:?} lost", rec.context.seq, rec.lost);
    }
    let restored_seq = rec.context.seq;
    let start = Instant::now();
    let listener = match rec.context.take_listener(LISTENER_DESCRIPTOR) {
        Some(l) => l,
        None => TcpListener::bind(fallback).map_err(|e| format!("bind {fallback}: {e}"))?,
    };
    let heap = Arc::new(rec.context.heap);
    let app = Arc::new(KvApp::resume(heap.clone(), &rec.context.control_record).map_err(|e| e.to_string())?);
    let checkpointer = Checkpointer::new(heap, app.clone(), cfg.policy).continuing_after(rec.max_seq_seen);
    let mut pcfg = cfg.clone();
    pcfg.primary.register = false;
    let node = KvNode::launch(&pcfg, app, listener, checkpointer, store, Some(conf), on_fatal).map_err(|e| e.to_string())?;
    let start_app = start.elapsed();
    let addr = node.addr();
    let t = Instant::now();
    let view = ConfClient::new(conf)
        .complete_failover(&cfg.primary.node_id, &addr.to_string())
        .map_err(|e| e.to_string())?;
    node.server().set_view(view.view_number);
    let complete_failover = t.elapsed();
    info!("serving restored checkpoint {restored_seq} at {addr} in view {}", view.view_number);
    let report = PromotionReport {
        noticed_at,
        timings: rec.timings.clone(),
        chain_len: rec.chain_len,
        restored_seq,
        lost: rec.lost.clone(),
        reopen_failed: rec.context.failed.clone(),
        start_app,
        complete_failover,
        serving_at: Instant::now(),
        addr,
    };
    Ok((node, report))
}
