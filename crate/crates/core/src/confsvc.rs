//! The configuration service: cluster view, heartbeat tracking, failure
//! detection and client redirection.
//!
//! [`ConfigState`] is a pure state machine over a caller-supplied clock. The
//! TCP service drives it with a monotonic clock and a ticker thread.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{info, warn};
use parking_lot::Mutex;
use thiserror::Error;

use crate::wire::{self, put_str16, Connection, Cursor, Request, Response, ServiceHandle};

pub const OP_REGISTER: u8 = 1;
pub const OP_HEARTBEAT: u8 = 2;
pub const OP_WHO_IS_PRIMARY: u8 = 3;
pub const OP_COMPLETE_FAILOVER: u8 = 4;
pub const OP_TRIGGER_COMPACT: u8 = 5;

pub const STATUS_OK: u8 = 0;
pub const STATUS_RETRY: u8 = 1;
pub const STATUS_NO_PRIMARY: u8 = 2;
pub const STATUS_DUPLICATE_NODE: u8 = 3;
pub const STATUS_NOT_CHOSEN: u8 = 4;
pub const STATUS_BAD_REQUEST: u8 = 5;

pub const DEFAULT_HEARTBEAT_INTERVAL: Duration = Duration::from_millis(100);
pub const DEFAULT_MISS_THRESHOLD: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfError {
    #[error("node {0} is already registered with another role, or a primary exists")]
    DuplicateNode(String),
    #[error("node {0} was not chosen by the current failover")]
    NotChosenNode(String),
    #[error("failover in progress")]
    Retry,
    #[error("no primary")]
    NoPrimary,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("configuration service unreachable: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Primary,
    Backup,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Primary => 0,
            Role::Backup => 1,
        }
    }

    fn from_code(c: u8) -> Option<Role> {
        match c {
            0 => Some(Role::Primary),
            1 => Some(Role::Backup),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewState {
    Healthy,
    FailingOver,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterView {
    pub view_number: u64,
    pub primary_id: Option<String>,
    pub primary_addr: Option<String>,
    pub backups: Vec<String>,
    pub state: ViewState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heartbeat {
    pub node_id: String,
    pub seq: u64,
    pub latest_checkpoint_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailoverDecision {
    pub failed_primary: String,
    pub new_primary: String,
    /// Last checkpoint seq the failed primary reported as replicated.
    pub last_reported_seq: u64,
    pub detected_at: Duration,
}

/// Instruction piggybacked on a heartbeat reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Directive {
    None,
    /// Restore from storage and call complete_failover.
    Promote,
    /// The sender is no longer primary and must stop serving.
    Deposed,
    /// Compact the stored chain.
    Compact,
}

impl Directive {
    fn code(self) -> u8 {
        match self {
            Directive::None => 0,
            Directive::Promote => 1,
            Directive::Deposed => 2,
            Directive::Compact => 3,
        }
    }

    fn from_code(c: u8) -> Option<Directive> {
        Some(match c {
            0 => Directive::None,
            1 => Directive::Promote,
            2 => Directive::Deposed,
            3 => Directive::Compact,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeartbeatReply {
    pub view_number: u64,
    pub directive: Directive,
}

#[derive(Debug, Clone)]
struct Node {
    role: Role,
    addr: String,
    last_heartbeat: Duration,
    hb_seq: u64,
    latest_checkpoint_seq: u64,
}

/// View bookkeeping. Times are offsets on a monotonic clock.
#[derive(Debug, Clone)]
pub struct ConfigState {
    interval: Duration,
    threshold: u32,
    view_number: u64,
    primary: Option<String>,
    backups: Vec<String>,
    nodes: HashMap<String, Node>,
    failover: Option<FailoverDecision>,
    compact_pending: bool,
}

impl ConfigState {
    pub fn new(interval: Duration, threshold: u32) -> Self {
        assert!(!interval.is_zero() && threshold > 0);
        ConfigState {
            interval,
            threshold,
            view_number: 0,
            primary: None,
            backups: Vec::new(),
            nodes: HashMap::new(),
            failover: None,
            compact_pending: false,
        }
    }

    pub fn view(&self) -> ClusterView {
        ClusterView {
            view_number: self.view_number,
            primary_id: self.primary.clone(),
            primary_addr: self.primary.as_ref().map(|p| self.nodes[p].addr.clone()),
            backups: self.backups.clone(),
            state: if self.failover.is_some() {
                ViewState::FailingOver
            } else {
                ViewState::Healthy
            },
        }
    }

    pub fn failover(&self) -> Option<&FailoverDecision> {
        self.failover.as_ref()
    }

    pub fn register(&mut self, node_id: &str, role: Role, addr: &str, now: Duration) -> Result<ClusterView, ConfError> {
        if let Some(node) = self.nodes.get_mut(node_id) {
            if node.role != role {
                return Err(ConfError::DuplicateNode(node_id.into()));
            }
            // a restart of the same node
            node.addr = addr.into();
            node.last_heartbeat = now;
            node.hb_seq = 0;
            return Ok(self.view());
        }
        match role {
            Role::Primary if self.primary.is_some() || self.failover.is_some() => {
                return Err(ConfError::DuplicateNode(node_id.into()))
            }
            Role::Primary => self.primary = Some(node_id.into()),
            Role::Backup => self.backups.push(node_id.into()),
        }
        self.nodes.insert(
            node_id.into(),
            Node {
                role,
                addr: addr.into(),
                last_heartbeat: now,
                hb_seq: 0,
                latest_checkpoint_seq: 0,
            },
        );
        Ok(self.view())
    }

    pub fn on_heartbeat(&mut self, hb: &Heartbeat, now: Duration) -> HeartbeatReply {
        let reply = |directive| HeartbeatReply {
            view_number: self.view_number,
            directive,
        };
        let Some(node) = self.nodes.get_mut(&hb.node_id) else {
            warn!("heartbeat from unknown or deposed node {}", hb.node_id);
            return reply(Directive::Deposed);
        };
        if hb.seq <= node.hb_seq {
            warn!("stale heartbeat {} from {}", hb.seq, hb.node_id);
        } else {
            node.hb_seq = hb.seq;
            node.last_heartbeat = now;
            node.latest_checkpoint_seq = node.latest_checkpoint_seq.max(hb.latest_checkpoint_seq);
        }
        let role = node.role;
        if let Some(f) = &self.failover {
            if f.new_primary == hb.node_id {
                return reply(Directive::Promote);
            }
            if f.failed_primary == hb.node_id {
                return reply(Directive::Deposed);
            }
        }
        if role == Role::Backup && self.compact_pending && self.backups.first() == Some(&hb.node_id) {
            self.compact_pending = false;
            return reply(Directive::Compact);
        }
        reply(Directive::None)
    }

    /// Detect a silent primary. Returns a decision the first time it fires.
    pub fn tick(&mut self, now: Duration) -> Option<FailoverDecision> {
        if self.failover.is_some() {
            return None;
        }
        let primary = self.primary.as_ref()?;
        let node = &self.nodes[primary];
        if now.saturating_sub(node.last_heartbeat) <= self.interval * self.threshold {
            return None;
        }
        let Some(new_primary) = self.backups.first().cloned() else {
            warn!("primary {primary} is silent and there is no backup");
            return None;
        };
        let decision = FailoverDecision {
            failed_primary: primary.clone(),
            new_primary,
            last_reported_seq: node.latest_checkpoint_seq,
            detected_at: now,
        };
        info!(
            "primary {} silent since {:?}; promoting {}",
            decision.failed_primary, node.last_heartbeat, decision.new_primary
        );
        self.failover = Some(decision.clone());
        Some(decision)
    }

    pub fn who_is_primary(&self) -> Result<(u64, String), ConfError> {
        if self.failover.is_some() {
            return Err(ConfError::Retry);
        }
        match &self.primary {
            Some(p) => Ok((self.view_number, self.nodes[p].addr.clone())),
            None => Err(ConfError::NoPrimary),
        }
    }

    pub fn complete_failover(&mut self, node_id: &str, addr: &str, now: Duration) -> Result<ClusterView, ConfError> {
        match &self.failover {
            Some(f) if f.new_primary == node_id => {}
            _ => return Err(ConfError::NotChosenNode(node_id.into())),
        }
        let f = self.failover.take().unwrap();
        self.nodes.remove(&f.failed_primary);
        self.backups.retain(|b| b != node_id);
        let node = self.nodes.get_mut(node_id).unwrap();
        node.role = Role::Primary;
        node.addr = addr.into();
        node.last_heartbeat = now;
        self.primary = Some(node_id.into());
        self.view_number += 1;
        info!("view {}: primary is {node_id} at {addr}", self.view_number);
        Ok(self.view())
    }

    pub fn trigger_compact(&mut self) {
        self.compact_pending = true;
    }
}

fn put_view(out: &mut Vec<u8>, v: &ClusterView) {
    out.extend_from_slice(&v.view_number.to_le_bytes());
    out.push(match v.state {
        ViewState::Healthy => 0,
        ViewState::FailingOver => 1,
    });
    put_str16(out, v.primary_id.as_deref().unwrap_or(""));
    put_str16(out, v.primary_addr.as_deref().unwrap_or(""));
    out.extend_from_slice(&(v.backups.len() as u16).to_le_bytes());
    for b in &v.backups {
        put_str16(out, b);
    }
}

fn get_view(c: &mut Cursor<'_>) -> io::Result<ClusterView> {
    let view_number = c.u64()?;
    let state = match c.u8()? {
        0 => ViewState::Healthy,
        _ => ViewState::FailingOver,
    };
    let opt = |s: String| if s.is_empty() { None } else { Some(s) };
    let primary_id = opt(c.str16()?);
    let primary_addr = opt(c.str16()?);
    let n = c.u16()?;
    let backups = (0..n).map(|_| c.str16()).collect::<io::Result<_>>()?;
    Ok(ClusterView {
        view_number,
        primary_id,
        primary_addr,
        backups,
        state,
    })
}

fn error_response(e: &ConfError) -> Response {
    let status = match e {
        ConfError::Retry => STATUS_RETRY,
        ConfError::NoPrimary => STATUS_NO_PRIMARY,
        ConfError::DuplicateNode(_) => STATUS_DUPLICATE_NODE,
        ConfError::NotChosenNode(_) => STATUS_NOT_CHOSEN,
        ConfError::BadRequest(_) | ConfError::Io(_) => STATUS_BAD_REQUEST,
    };
    Response::new(status, e.to_string().into_bytes())
}

#[derive(Debug, Clone, Copy)]
pub struct ConfConfig {
    pub heartbeat_interval: Duration,
    pub miss_threshold: u32,
}

impl Default for ConfConfig {
    fn default() -> Self {
        ConfConfig {
            heartbeat_interval: DEFAULT_HEARTBEAT_INTERVAL,
            miss_threshold: DEFAULT_MISS_THRESHOLD,
        }
    }
}

/// A running configuration service.
pub struct ConfService {
    service: ServiceHandle,
    state: Arc<Mutex<ConfigState>>,
    epoch: Instant,
    decisions: Arc<Mutex<Vec<FailoverDecision>>>,
    stop: Arc<AtomicBool>,
    ticker: Option<JoinHandle<()>>,
}

impl ConfService {
    pub fn addr(&self) -> SocketAddr {
        self.service.addr()
    }

    pub fn view(&self) -> ClusterView {
        self.state.lock().view()
    }

    /// Failover decisions taken so far, with detection times relative to
    /// [`ConfService::started_at`].
    pub fn decisions(&self) -> Vec<FailoverDecision> {
        self.decisions.lock().clone()
    }

    pub fn started_at(&self) -> Instant {
        self.epoch
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.ticker.take() {
            let _ = t.join();
        }
        self.service.shutdown();
    }
}

impl Drop for ConfService {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn handle(state: &Mutex<ConfigState>, epoch: Instant, req: Request) -> Result<Vec<u8>, ConfError> {
    let bad = |e: io::Error| ConfError::BadRequest(e.to_string());
    let node = String::from_utf8(req.name).map_err(|_| ConfError::BadRequest("node id".into()))?;
    let mut c = Cursor::new(&req.payload);
    let now = epoch.elapsed();
    let mut out = Vec::new();
    match req.opcode {
        OP_REGISTER => {
            let role = Role::from_code(c.u8().map_err(bad)?).ok_or(ConfError::BadRequest("role".into()))?;
            let addr = c.str16().map_err(bad)?;
            put_view(&mut out, &state.lock().register(&node, role, &addr, now)?);
        }
        OP_HEARTBEAT => {
            let hb = Heartbeat {
                node_id: node,
                seq: c.u64().map_err(bad)?,
                latest_checkpoint_seq: c.u64().map_err(bad)?,
            };
            let r = state.lock().on_heartbeat(&hb, now);
            out.extend_from_slice(&r.view_number.to_le_bytes());
            out.push(r.directive.code());
        }
        OP_WHO_IS_PRIMARY => {
            let (view, addr) = state.lock().who_is_primary()?;
            out.extend_from_slice(&view.to_le_bytes());
            put_str16(&mut out, &addr);
        }
        OP_COMPLETE_FAILOVER => {
            let addr = c.str16().map_err(bad)?;
            put_view(&mut out, &state.lock().complete_failover(&node, &addr, now)?);
        }
        OP_TRIGGER_COMPACT => state.lock().trigger_compact(),
        op => return Err(ConfError::BadRequest(format!("opcode {op}"))),
    }
    Ok(out)
}

pub fn serve(listener: TcpListener, config: ConfConfig) -> io::Result<ConfService> {
    let state = Arc::new(Mutex::new(ConfigState::new(
        config.heartbeat_interval,
        config.miss_threshold,
    )));
    let epoch = Instant::now();
    let handler: wire::Handler = {
        let state = state.clone();
        Arc::new(move |req| match handle(&state, epoch, req) {
            Ok(payload) => Response::new(STATUS_OK, payload),
            Err(e) => error_response(&e),
        })
    };
    let service = wire::serve(listener, "confsvc", handler)?;
    let stop = Arc::new(AtomicBool::new(false));
    let decisions = Arc::new(Mutex::new(Vec::new()));
    let ticker = {
        let (state, stop, decisions) = (state.clone(), stop.clone(), decisions.clone());
        let period = (config.heartbeat_interval / 10).max(Duration::from_millis(1));
        thread::Builder::new().name("confsvc-tick".into()).spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                if let Some(d) = state.lock().tick(epoch.elapsed()) {
                    decisions.lock().push(d);
                }
                thread::sleep(period);
            }
        })?
    };
    Ok(ConfService {
        service,
        state,
        epoch,
        decisions,
        stop,
        ticker: Some(ticker),
    })
}

/// Client side of the configuration service.
pub struct ConfClient {
    conn: Connection,
}

impl ConfClient {
    pub fn new(addr: SocketAddr) -> Self {
        ConfClient {
            conn: Connection::new(addr, Duration::from_secs(2)),
        }
    }

    fn call(&mut self, op: u8, node: &str, payload: &[u8]) -> Result<Vec<u8>, ConfError> {
        let resp = self
            .conn
            .call(op, node.as_bytes(), payload)
            .map_err(|e| ConfError::Io(e.to_string()))?;
        let msg = || String::from_utf8_lossy(&resp.payload).into_owned();
        match resp.status {
            STATUS_OK => Ok(resp.payload.clone()),
            STATUS_RETRY => Err(ConfError::Retry),
            STATUS_NO_PRIMARY => Err(ConfError::NoPrimary),
            STATUS_DUPLICATE_NODE => Err(ConfError::DuplicateNode(node.into())),
            STATUS_NOT_CHOSEN => Err(ConfError::NotChosenNode(node.into())),
            _ => Err(ConfError::BadRequest(msg())),
        }
    }

    fn decode<T>(payload: &[u8], f: impl FnOnce(&mut Cursor<'_>) -> io::Result<T>) -> Result<T, ConfError> {
        f(&mut Cursor::new(payload)).map_err(|e| ConfError::Io(e.to_string()))
    }

    pub fn register(&mut self, node: &str, role: Role, addr: &str) -> Result<ClusterView, ConfError> {
        let mut p = vec![role.code()];
        put_str16(&mut p, addr);
        let out = self.call(OP_REGISTER, node, &p)?;
        Self::decode(&out, get_view)
    }

    pub fn heartbeat(&mut self, hb: &Heartbeat) -> Result<HeartbeatReply, ConfError> {
        let mut p = hb.seq.to_le_bytes().to_vec();
        p.extend_from_slice(&hb.latest_checkpoint_seq.to_le_bytes());
        let out = self.call(OP_HEARTBEAT, &hb.node_id, &p)?;
        Self::decode(&out, |c| {
            let view_number = c.u64()?;
            let directive = Directive::from_code(c.u8()?)
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "directive"))?;
            Ok(HeartbeatReply {
                view_number,
                directive,
            })
        })
    }

    pub fn who_is_primary(&mut self) -> Result<(u64, String), ConfError> {
        let out = self.call(OP_WHO_IS_PRIMARY, "", &[])?;
        Self::decode(&out, |c| Ok((c.u64()?, c.str16()?)))
    }

    pub fn complete_failover(&mut self, node: &str, addr: &str) -> Result<ClusterView, ConfError> {
        let mut p = Vec::new();
        put_str16(&mut p, addr);
        let out = self.call(OP_COMPLETE_FAILOVER, node, &p)?;
        Self::decode(&out, get_view)
    }

    pub fn trigger_compact(&mut self) -> Result<(), ConfError> {
        self.call(OP_TRIGGER_COMPACT, "", &[]).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MS: Duration = Duration::from_millis(1);

    fn state() -> ConfigState {
        ConfigState::new(100 * MS, 3)
    }

    fn hb(node: &str, seq: u64) -> Heartbeat {
        Heartbeat {
            node_id: node.into(),
            seq,
            latest_checkpoint_seq: seq,
        }
    }

    #[test]
    fn register_builds_view() {
        let mut s = state();
        s.register("P", Role::Primary, "a:1", Duration::ZERO).unwrap();
        let v = s.register("B", Role::Backup, "b:1", Duration::ZERO).unwrap();
        assert_eq!(v.primary_id.as_deref(), Some("P"));
        assert_eq!(v.backups, vec!["B".to_string()]);
        assert_eq!(
            s.register("Q", Role::Primary, "c:1", Duration::ZERO).unwrap_err(),
            ConfError::DuplicateNode("Q".into())
        );
        assert_eq!(
            s.register("B", Role::Primary, "b:1", Duration::ZERO).unwrap_err(),
            ConfError::DuplicateNode("B".into())
        );
        assert_eq!(s.who_is_primary().unwrap(), (0, "a:1".into()));
    }

    #[test]
    fn steady_heartbeats_never_fail_over() {
        let mut s = state();
        s.register("P", Role::Primary, "a", Duration::ZERO).unwrap();
        s.register("B", Role::Backup, "b", Duration::ZERO).unwrap();
        for i in 1..=100u64 {
            let now = 100 * MS * i as u32;
            s.on_heartbeat(&hb("P", i), now);
            for k in 0..10 {
                assert!(s.tick(now + 10 * MS * k).is_none());
            }
        }
    }

    #[test]
    fn failover_cycle() {
        let mut s = state();
        s.register("P", Role::Primary, "a", Duration::ZERO).unwrap();
        s.register("B", Role::Backup, "b", Duration::ZERO).unwrap();
        s.on_heartbeat(&hb("P", 1), 100 * MS);
        assert!(s.tick(400 * MS).is_none());
        let d = s.tick(401 * MS).unwrap();
        assert_eq!((d.failed_primary.as_str(), d.new_primary.as_str()), ("P", "B"));
        assert_eq!(d.last_reported_seq, 1);
        assert!(s.tick(500 * MS).is_none());
        assert_eq!(s.who_is_primary().unwrap_err(), ConfError::Retry);
        assert_eq!(s.on_heartbeat(&hb("B", 1), 410 * MS).directive, Directive::Promote);
        assert_eq!(s.on_heartbeat(&hb("P", 2), 420 * MS).directive, Directive::Deposed);
        assert_eq!(
            s.complete_failover("P", "x", 430 * MS).unwrap_err(),
            ConfError::NotChosenNode("P".into())
        );
        let v = s.complete_failover("B", "b2", 450 * MS).unwrap();
        assert_eq!(v.view_number, 1);
        assert_eq!(v.primary_id.as_deref(), Some("B"));
        assert!(v.backups.is_empty());
        assert_eq!(s.who_is_primary().unwrap(), (1, "b2".into()));
        // the deposed primary cannot move the view
        let r = s.on_heartbeat(&hb("P", 3), 460 * MS);
        assert_eq!(r.directive, Directive::Deposed);
        assert_eq!(s.view(), v);
        assert!(s.tick(700 * MS).is_none());
    }

    #[test]
    fn stale_heartbeat_does_not_refresh_clock() {
        let mut s = state();
        s.register("P", Role::Primary, "a", Duration::ZERO).unwrap();
        s.register("B", Role::Backup, "b", Duration::ZERO).unwrap();
        s.on_heartbeat(&hb("P", 5), 100 * MS);
        s.on_heartbeat(&hb("P", 5), 350 * MS);
        assert!(s.tick(401 * MS).is_some());
    }

    #[test]
    fn reregistration_resets_clock() {
        let mut s = state();
        s.register("P", Role::Primary, "a", Duration::ZERO).unwrap();
        s.register("B", Role::Backup, "b", Duration::ZERO).unwrap();
        s.register("P", Role::Primary, "a2", 350 * MS).unwrap();
        assert!(s.tick(600 * MS).is_none());
        assert_eq!(s.who_is_primary().unwrap().1, "a2");
        s.on_heartbeat(&hb("P", 1), 650 * MS);
        assert!(s.tick(700 * MS).is_none());
    }

    #[test]
    fn compact_directive_goes_to_first_backup_once() {
        let mut s = state();
        s.register("P", Role::Primary, "a", Duration::ZERO).unwrap();
        s.register("B", Role::Backup, "b", Duration::ZERO).unwrap();
        s.trigger_compact();
        assert_eq!(s.on_heartbeat(&hb("P", 1), MS).directive, Directive::None);
        assert_eq!(s.on_heartbeat(&hb("B", 1), MS).directive, Directive::Compact);
        assert_eq!(s.on_heartbeat(&hb("B", 2), MS).directive, Directive::None);
    }

    #[derive(Debug, Clone)]
    enum Ev {
        Advance(u16),
        Hb(u8),
        Tick,
        Complete(u8),
        Register(u8, bool),
    }

    fn ev() -> impl Strategy<Value = Ev> {
        prop_oneof![
            (1u16..250).prop_map(Ev::Advance),
            (0u8..3).prop_map(Ev::Hb),
            Just(Ev::Tick),
            (0u8..3).prop_map(Ev::Complete),
            (0u8..3, any::<bool>()).prop_map(|(n, p)| Ev::Register(n, p)),
        ]
    }

    proptest! {
        #[test]
        fn view_invariants_hold(events in proptest::collection::vec(ev(), 1..200)) {
            let names = ["n0", "n1", "n2"];
            let mut s = state();
            let mut now = Duration::ZERO;
            let mut seqs = [0u64; 3];
            let mut last_view = 0;
            for e in events {
                match e {
                    Ev::Advance(ms) => now += MS * ms as u32,
                    Ev::Hb(n) => {
                        seqs[n as usize] += 1;
                        s.on_heartbeat(&hb(names[n as usize], seqs[n as usize]), now);
                    }
                    Ev::Tick => {
                        let before = s.view();
                        if let Some(d) = s.tick(now) {
                            prop_assert_eq!(Some(d.failed_primary), before.primary_id);
                            prop_assert_eq!(Some(&d.new_primary), before.backups.first());
                        }
                    }
                    Ev::Complete(n) => { let _ = s.complete_failover(names[n as usize], "x", now); }
                    Ev::Register(n, p) => {
                        let role = if p { Role::Primary } else { Role::Backup };
                        let _ = s.register(names[n as usize], role, "x", now);
                    }
                }
                let v = s.view();
                if let Some(p) = &v.primary_id {
                    prop_assert!(!v.backups.contains(p));
                }
                prop_assert!(v.view_number == last_view || v.view_number == last_view + 1);
                last_view = v.view_number;
            }
        }

        #[test]
        fn detection_latency_within_bounds(last_hb in 0u64..10_000, tick_ms in 1u64..20) {
            let mut s = state();
            s.register("P", Role::Primary, "a", Duration::ZERO).unwrap();
            s.register("B", Role::Backup, "b", Duration::ZERO).unwrap();
            let last = MS * last_hb as u32;
            s.on_heartbeat(&hb("P", 1), last);
            let mut now = last;
            let fired = loop {
                now += MS * tick_ms as u32;
                if let Some(d) = s.tick(now) { break d.detected_at; }
            };
            let lat = fired - last;
            prop_assert!(lat > 300 * MS && lat <= 400 * MS, "{:?}", lat);
        }
    }

    #[test]
    fn tcp_service_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let cfg = ConfConfig {
            heartbeat_interval: 20 * MS,
            miss_threshold: 3,
        };
        let svc = serve(listener, cfg).unwrap();
        let mut c = ConfClient::new(svc.addr());
        c.register("P", Role::Primary, "127.0.0.1:9").unwrap();
        let v = c.register("B", Role::Backup, "127.0.0.1:10").unwrap();
        assert_eq!(v.backups, vec!["B".to_string()]);
        assert_eq!(c.who_is_primary().unwrap(), (0, "127.0.0.1:9".into()));
        assert_eq!(c.heartbeat(&hb("P", 1)).unwrap().directive, Directive::None);
        let mut seq = 1;
        let promoted = loop {
            seq += 1;
            thread::sleep(10 * MS);
            if c.heartbeat(&hb("B", seq)).unwrap().directive == Directive::Promote {
                break true;
            }
            if seq > 200 {
                break false;
            }
        };
        assert!(promoted);
        assert_eq!(c.who_is_primary().unwrap_err(), ConfError::Retry);
        let v = c.complete_failover("B", "127.0.0.1:11").unwrap();
        assert_eq!(v.view_number, 1);
        assert_eq!(c.who_is_primary().unwrap(), (1, "127.0.0.1:11".into()));
        assert_eq!(svc.decisions().len(), 1);
        c.trigger_compact().unwrap();
    }
}
