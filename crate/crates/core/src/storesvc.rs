//! Checkpoint blob storage: a store trait, a file-backed directory store, an
//! in-memory store, and a TCP service and client speaking the framing in
//! [`crate::wire`].
//!
//! Opcodes are PUT=1, GET=2, LIST=3, DELETE=4. The request name carries the
//! blob name (or the prefix for LIST); PUT carries the blob bytes as payload.
//! Response statuses are OK=0, NOT_FOUND=1, NAME_INVALID=2, ERROR=3. A LIST
//! response payload is `u32 count` followed by `u16`-prefixed names.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use thiserror::Error;

use crate::wire::{self, Connection, Cursor, Request, Response, ServiceHandle};

pub const OP_PUT: u8 = 1;
pub const OP_GET: u8 = 2;
pub const OP_LIST: u8 = 3;
pub const OP_DELETE: u8 = 4;

pub const STATUS_OK: u8 = 0;
pub const STATUS_NOT_FOUND: u8 = 1;
pub const STATUS_NAME_INVALID: u8 = 2;
pub const STATUS_ERROR: u8 = 3;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("blob {0} not found")]
    NotFound(String),
    #[error("invalid blob name {0:?}")]
    NameInvalid(String),
    #[error("wire error: {0}")]
    Wire(String),
    #[error("storage i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlobFamily {
    Checkpoint,
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlobSuffix {
    Core,
    Mem,
}

/// `ckpt-<seq>.(core|mem)` or `compact-<seq>.(core|mem)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlobName {
    family: BlobFamily,
    seq: u64,
    suffix: BlobSuffix,
    text: String,
}

impl BlobName {
    pub fn new(family: BlobFamily, seq: u64, suffix: BlobSuffix) -> Self {
        let text = format!(
            "{}-{}.{}",
            match family {
                BlobFamily::Checkpoint => "ckpt",
                BlobFamily::Compact => "compact",
            },
            seq,
            match suffix {
                BlobSuffix::Core => "core",
                BlobSuffix::Mem => "mem",
            }
        );
        BlobName {
            family,
            seq,
            suffix,
            text,
        }
    }

    pub fn checkpoint_core(seq: u64) -> Self {
        Self::new(BlobFamily::Checkpoint, seq, BlobSuffix::Core)
    }

    pub fn checkpoint_mem(seq: u64) -> Self {
        Self::new(BlobFamily::Checkpoint, seq, BlobSuffix::Mem)
    }

    pub fn compact_core(seq: u64) -> Self {
        Self::new(BlobFamily::Compact, seq, BlobSuffix::Core)
    }

    pub fn compact_mem(seq: u64) -> Self {
        Self::new(BlobFamily::Compact, seq, BlobSuffix::Mem)
    }

    pub fn family(&self) -> BlobFamily {
        self.family
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn suffix(&self) -> BlobSuffix {
        self.suffix
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// The other half of the same checkpoint.
    pub fn sibling(&self) -> BlobName {
        let suffix = match self.suffix {
            BlobSuffix::Core => BlobSuffix::Mem,
            BlobSuffix::Mem => BlobSuffix::Core,
        };
        BlobName::new(self.family, self.seq, suffix)
    }
}

impl FromStr for BlobName {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, StoreError> {
        let invalid = || StoreError::NameInvalid(s.to_string());
        let (family, rest) = if let Some(rest) = s.strip_prefix("ckpt-") {
            (BlobFamily::Checkpoint, rest)
        } else if let Some(rest) = s.strip_prefix("compact-") {
            (BlobFamily::Compact, rest)
        } else {
            return Err(invalid());
        };
        let (seq, suffix) = rest.split_once('.').ok_or_else(invalid)?;
        let suffix = match suffix {
            "core" => BlobSuffix::Core,
            "mem" => BlobSuffix::Mem,
            _ => return Err(invalid()),
        };
        if seq.is_empty() || !seq.bytes().all(|b| b.is_ascii_digit()) || (seq.len() > 1 && seq.starts_with('0')) {
            return Err(invalid());
        }
        let seq = seq.parse().map_err(|_| invalid())?;
        Ok(BlobName::new(family, seq, suffix))
    }
}

impl fmt::Display for BlobName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Ord for BlobName {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.seq, self.suffix, self.family).cmp(&(other.seq, other.suffix, other.family))
    }
}

impl PartialOrd for BlobName {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Blob storage. `put` is atomic: readers see the old or the new bytes.
pub trait BlobStore: Send + Sync {
    fn put(&self, name: &BlobName, bytes: &[u8]) -> Result<(), StoreError>;
    fn get(&self, name: &BlobName) -> Result<Vec<u8>, StoreError>;
    /// Names starting with `prefix`, sorted by seq then suffix.
    fn list(&self, prefix: &str) -> Result<Vec<BlobName>, StoreError>;
    fn delete(&self, name: &BlobName) -> Result<(), StoreError>;
}

impl<T: BlobStore + ?Sized> BlobStore for Arc<T> {
    fn put(&self, name: &BlobName, bytes: &[u8]) -> Result<(), StoreError> {
        (**self).put(name, bytes)
    }
    fn get(&self, name: &BlobName) -> Result<Vec<u8>, StoreError> {
        (**self).get(name)
    }
    fn list(&self, prefix: &str) -> Result<Vec<BlobName>, StoreError> {
        (**self).list(prefix)
    }
    fn delete(&self, name: &BlobName) -> Result<(), StoreError> {
        (**self).delete(name)
    }
}

/// File-per-blob store; writes go to a temp file and are renamed into place.
pub struct DirStore {
    dir: PathBuf,
    tmp_counter: AtomicU64,
}

impl DirStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        // leftovers from writers that died mid-put
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            if entry.file_name().to_string_lossy().starts_with(".tmp-") {
                let _ = fs::remove_file(entry.path());
            }
        }
        Ok(DirStore {
            dir,
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl BlobStore for DirStore {
    fn put(&self, name: &BlobName, bytes: &[u8]) -> Result<(), StoreError> {
        let n = self.tmp_counter.fetch_add(1, AtomicOrdering::Relaxed);
        let tmp = self
            .dir
            .join(format!(".tmp-{}-{}-{n}", name.as_str(), std::process::id()));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, self.dir.join(name.as_str()))?;
        Ok(())
    }

    fn get(&self, name: &BlobName) -> Result<Vec<u8>, StoreError> {
        match fs::read(self.dir.join(name.as_str())) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(name.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    fn list(&self, prefix: &str) -> Result<Vec<BlobName>, StoreError> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let file = entry?.file_name();
            let Some(file) = file.to_str() else { continue };
            if file.starts_with(prefix) {
                if let Ok(name) = file.parse::<BlobName>() {
                    names.push(name);
                }
            }
        }
        names.sort();
        Ok(names)
    }

    fn delete(&self, name: &BlobName) -> Result<(), StoreError> {
        match fs::remove_file(self.dir.join(name.as_str())) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(name.to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Default)]
pub struct MemStore {
    blobs: Mutex<BTreeMap<String, Arc<Vec<u8>>>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total_bytes(&self) -> usize {
        self.blobs.lock().values().map(|b| b.len()).sum()
    }
}

impl BlobStore for MemStore {
    fn put(&self, name: &BlobName, bytes: &[u8]) -> Result<(), StoreError> {
        self.blobs
            .lock()
            .insert(name.to_string(), Arc::new(bytes.to_vec()));
        Ok(())
    }

    fn get(&self, name: &BlobName) -> Result<Vec<u8>, StoreError> {
        self.blobs
            .lock()
            .get(name.as_str())
            .map(|b| b.to_vec())
            .ok_or_else(|| StoreError::NotFound(name.to_string()))
    }

    fn list(&self, prefix: &str) -> Result<Vec<BlobName>, StoreError> {
        let mut names: Vec<BlobName> = self
            .blobs
            .lock()
            .keys()
            .filter(|k| k.starts_with(prefix))
            .filter_map(|k| k.parse().ok())
            .collect();
        names.sort();
        Ok(names)
    }

    fn delete(&self, name: &BlobName) -> Result<(), StoreError> {
        self.blobs
            .lock()
            .remove(name.as_str())
            .map(|_| ())
            .ok_or_else(|| StoreError::NotFound(name.to_string()))
    }
}

/// Wraps a store with injectable faults: a stall window during which every
/// operation blocks, and a put budget after which the store behaves as if the
/// writing process had died.
pub struct FaultyStore<S> {
    inner: S,
    stall_until: Mutex<Option<Instant>>,
    puts_left: AtomicUsize,
    dead: AtomicBool,
    puts: AtomicU64,
}

impl<S: BlobStore> FaultyStore<S> {
    pub fn new(inner: S) -> Self {
        FaultyStore {
            inner,
            stall_until: Mutex::new(None),
            puts_left: AtomicUsize::new(usize::MAX),
            dead: AtomicBool::new(false),
            puts: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    /// Block every operation for `d` from now.
    pub fn stall_for(&self, d: Duration) {
        *self.stall_until.lock() = Some(Instant::now() + d);
    }

    /// Allow `n` more successful puts, then fail all writes.
    pub fn crash_after_puts(&self, n: usize) {
        self.puts_left.store(n, AtomicOrdering::SeqCst);
    }

    /// Fail all writes from now on.
    pub fn kill(&self) {
        self.dead.store(true, AtomicOrdering::SeqCst);
    }

    pub fn is_dead(&self) -> bool {
        self.dead.load(AtomicOrdering::SeqCst)
    }

    pub fn put_count(&self) -> u64 {
        self.puts.load(AtomicOrdering::SeqCst)
    }

    fn wait_stall(&self) {
        let until = *self.stall_until.lock();
        if let Some(until) = until {
            let now = Instant::now();
            if until > now {
                std::thread::sleep(until - now);
            }
        }
    }

    fn dead_error() -> StoreError {
        StoreError::Wire("writer is down".into())
    }
}

impl<S: BlobStore> BlobStore for FaultyStore<S> {
    fn put(&self, name: &BlobName, bytes: &[u8]) -> Result<(), StoreError> {
        self.wait_stall();
        if self.is_dead() {
            return Err(Self::dead_error());
        }
        let left = self.puts_left.load(AtomicOrdering::SeqCst);
        if left == 0 {
            self.dead.store(true, AtomicOrdering::SeqCst);
            return Err(Self::dead_error());
        }
        if left != usize::MAX {
            self.puts_left.fetch_sub(1, AtomicOrdering::SeqCst);
        }
        self.inner.put(name, bytes)?;
        self.puts.fetch_add(1, AtomicOrdering::SeqCst);
        Ok(())
    }

    fn get(&self, name: &BlobName) -> Result<Vec<u8>, StoreError> {
        self.wait_stall();
        self.inner.get(name)
    }

    fn list(&self, prefix: &str) -> Result<Vec<BlobName>, StoreError> {
        self.wait_stall();
        self.inner.list(prefix)
    }

    fn delete(&self, name: &BlobName) -> Result<(), StoreError> {
        self.wait_stall();
        if self.is_dead() {
            return Err(Self::dead_error());
        }
        self.inner.delete(name)
    }
}

fn status_for(e: &StoreError) -> u8 {
    match e {
        StoreError::NotFound(_) => STATUS_NOT_FOUND,
        StoreError::NameInvalid(_) => STATUS_NAME_INVALID,
        _ => STATUS_ERROR,
    }
}

fn handle(store: &dyn BlobStore, req: Request) -> Response {
    let name = String::from_utf8_lossy(&req.name).into_owned();
    let parsed = || name.parse::<BlobName>();
    let result = match req.opcode {
        OP_PUT => parsed().and_then(|n| store.put(&n, &req.payload)).map(|_| Vec::new()),
        OP_GET => parsed().and_then(|n| store.get(&n)),
        OP_DELETE => parsed().and_then(|n| store.delete(&n)).map(|_| Vec::new()),
        OP_LIST => store.list(&name).map(|names| {
            let mut out = (names.len() as u32).to_le_bytes().to_vec();
            for n in &names {
                wire::put_str16(&mut out, n.as_str());
            }
            out
        }),
        op => Err(StoreError::Wire(format!("unknown opcode {op}"))),
    };
    match result {
        Ok(payload) => Response::new(STATUS_OK, payload),
        Err(e) => Response::new(status_for(&e), e.to_string().into_bytes()),
    }
}

/// Per-name serialization in front of a store.
struct Serialized<S> {
    inner: S,
    locks: Mutex<BTreeMap<String, Arc<Mutex<()>>>>,
}

impl<S: BlobStore> Serialized<S> {
    fn lock_for(&self, name: &BlobName) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .entry(name.to_string())
            .or_default()
            .clone()
    }
}

impl<S: BlobStore> BlobStore for Serialized<S> {
    fn put(&self, name: &BlobName, bytes: &[u8]) -> Result<(), StoreError> {
        let l = self.lock_for(name);
        let _g = l.lock();
        self.inner.put(name, bytes)
    }
    fn get(&self, name: &BlobName) -> Result<Vec<u8>, StoreError> {
        let l = self.lock_for(name);
        let _g = l.lock();
        self.inner.get(name)
    }
    fn list(&self, prefix: &str) -> Result<Vec<BlobName>, StoreError> {
        self.inner.list(prefix)
    }
    fn delete(&self, name: &BlobName) -> Result<(), StoreError> {
        let l = self.lock_for(name);
        let _g = l.lock();
        let r = self.inner.delete(name);
        self.locks.lock().remove(name.as_str());
        r
    }
}

/// Serve `store` over TCP.
pub fn serve(listener: TcpListener, store: impl BlobStore + 'static) -> io::Result<ServiceHandle> {
    let store = Arc::new(Serialized {
        inner: store,
        locks: Mutex::new(BTreeMap::new()),
    });
    wire::serve(listener, "store", Arc::new(move |req| handle(&*store, req)))
}

/// TCP client for the store service. Reconnects on demand; one connection,
/// so a single client reads its own writes.
pub struct StoreClient {
    conn: Mutex<Connection>,
}

impl StoreClient {
    pub fn new(addr: SocketAddr) -> Self {
        StoreClient {
            conn: Mutex::new(Connection::new(addr, Duration::from_secs(30))),
        }
    }

    fn call(&self, opcode: u8, name: &str, payload: &[u8]) -> Result<Vec<u8>, StoreError> {
        let mut conn = self.conn.lock();
        let resp = match conn.call(opcode, name.as_bytes(), payload) {
            Ok(r) => r,
            // one retry on a fresh connection; every operation is idempotent
            Err(_) => conn
                .call(opcode, name.as_bytes(), payload)
                .map_err(|e| StoreError::Wire(e.to_string()))?,
        };
        let msg = || String::from_utf8_lossy(&resp.payload).into_owned();
        match resp.status {
            STATUS_OK => Ok(resp.payload),
            STATUS_NOT_FOUND => Err(StoreError::NotFound(name.to_string())),
            STATUS_NAME_INVALID => Err(StoreError::NameInvalid(name.to_string())),
            _ => Err(StoreError::Wire(msg())),
        }
    }
}

impl BlobStore for StoreClient {
    fn put(&self, name: &BlobName, bytes: &[u8]) -> Result<(), StoreError> {
        self.call(OP_PUT, name.as_str(), bytes).map(|_| ())
    }

    fn get(&self, name: &BlobName) -> Result<Vec<u8>, StoreError> {
        self.call(OP_GET, name.as_str(), &[])
    }

    fn list(&self, prefix: &str) -> Result<Vec<BlobName>, StoreError> {
        let payload = self.call(OP_LIST, prefix, &[])?;
        let mut c = Cursor::new(&payload);
        let wire_err = |e: io::Error| StoreError::Wire(e.to_string());
        let n = c.u32().map_err(wire_err)?;
        (0..n)
            .map(|_| c.str16().map_err(wire_err)?.parse())
            .collect()
    }

    fn delete(&self, name: &BlobName) -> Result<(), StoreError> {
        self.call(OP_DELETE, name.as_str(), &[]).map(|_| ())
    }
}
