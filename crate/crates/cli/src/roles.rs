//! Long-running cluster roles. Each returns only on failure.

use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use ckptsync::confsvc::{self, ConfConfig};
use ckptsync::engine::DumpPolicy;
use ckptsync::kvapp::{KvBackupNode, KvNode, NodeConfig};
use ckptsync::managers::BackupConfig;
use ckptsync::storesvc::{self, StoreClient};
use log::{error, info};

use crate::NodeArgs;

/// Exit status of a process killed through the KV admin opcode.
const KILLED: i32 = 137;

fn bind(addr: SocketAddr) -> Result<TcpListener> {
    TcpListener::bind(addr).with_context(|| format!("bind {addr}"))
}

fn park() -> ! {
    loop {
        thread::park();
    }
}

pub fn store(data_dir: &Path, listen: SocketAddr) -> Result<()> {
    let store = crate::blobs::open_store(data_dir)?;
    let svc = storesvc::serve(bind(listen)?, store)?;
    info!("store serving {} on {}", data_dir.display(), svc.addr());
    park()
}

pub fn confsvc(listen: SocketAddr, heartbeat_interval: Duration, miss_threshold: u32) -> Result<()> {
    if heartbeat_interval.is_zero() || miss_threshold == 0 {
        bail!("heartbeat interval and miss threshold must be positive");
    }
    let svc = confsvc::serve(
        bind(listen)?,
        ConfConfig {
            heartbeat_interval,
            miss_threshold,
        },
    )?;
    info!("configuration service on {}", svc.addr());
    park()
}

fn node_config(a: &NodeArgs) -> Result<NodeConfig> {
    if a.checkpoint_interval_ms == 0 || a.heartbeat_interval_ms == 0 {
        bail!("intervals must be positive");
    }
    let mut cfg = NodeConfig::new(a.node_id.clone());
    cfg.dedup = a.dedup;
    cfg.policy = if a.full_dump {
        DumpPolicy::FullEveryTime
    } else {
        DumpPolicy::Incremental
    };
    cfg.primary.mode = a.mode.into();
    cfg.primary.interval = Duration::from_millis(a.checkpoint_interval_ms);
    cfg.primary.heartbeat_interval = Duration::from_millis(a.heartbeat_interval_ms);
    Ok(cfg)
}

fn on_fatal() -> Arc<dyn Fn(&str) + Send + Sync> {
    Arc::new(|msg: &str| {
        error!("fatal: {msg}");
        std::process::exit(2);
    })
}

/// Serve until the node stops serving (deposed or failed).
fn serve_until_stopped(node: &KvNode) -> Result<()> {
    node.server().set_on_kill(Arc::new(|| {
        error!("killed by request");
        std::process::exit(KILLED);
    }));
    let serving = node.server().serving_flag();
    while serving.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(100));
    }
    bail!("no longer serving as primary")
}

pub fn primary(a: &NodeArgs) -> Result<()> {
    let cfg = node_config(a)?;
    let node = KvNode::start_primary(
        &cfg,
        bind(a.listen)?,
        Arc::new(StoreClient::new(a.store)),
        Some(a.confsvc),
        None,
        Some(on_fatal()),
    )?;
    info!("primary {} serving on {}", a.node_id, node.addr());
    serve_until_stopped(&node)
}

pub fn backup(a: &NodeArgs) -> Result<()> {
    let cfg = node_config(a)?;
    let mut bcfg = BackupConfig::new(a.node_id.clone());
    bcfg.heartbeat_interval = cfg.primary.heartbeat_interval;
    bcfg.compact_every = a.compact_every_ms.map(Duration::from_millis);
    let backup = KvBackupNode::start(
        cfg,
        bcfg,
        a.listen,
        Arc::new(StoreClient::new(a.store)),
        a.confsvc,
        Some(on_fatal()),
    )?;
    info!("backup {} waiting for promotion", a.node_id);
    let report = loop {
        if let Some(r) = backup.wait_promoted(Duration::from_secs(3600)) {
            break r.map_err(anyhow::Error::msg)?;
        }
    };
    info!(
        "promoted: restored seq {} from {} checkpoints, serving on {}",
        report.restored_seq, report.chain_len, report.addr
    );
    let node = backup.node();
    let guard = node.lock();
    let n = guard.as_ref().context("promoted node missing")?;
    serve_until_stopped(n)
}
