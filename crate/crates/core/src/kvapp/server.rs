//! The KV application and its TCP server.
//!
//! Request: opcode GET/PUT/DELETE, name = key, payload =
//! `client_id u64 | request_id u64 | value`. Response payload =
//! `view_number u64 | value`.

use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, AtomicU16, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use thiserror::Error;

use super::table::{Table, TableError};
use crate::engine::CheckpointSource;
use crate::heap::{HeapSpace, ManagedHeap, ObjectRef};
use crate::imgfmt::{DescriptorKind, DescriptorRecord};
use crate::managers::ExposeFn;
use crate::wire::{self, Cursor, Request, Response, ServiceHandle};

pub const OP_GET: u8 = 1;
pub const OP_PUT: u8 = 2;
pub const OP_DELETE: u8 = 3;
/// Admin: terminate the serving process abruptly.
pub const OP_KILL: u8 = 9;

pub const ST_OK: u8 = 0;
pub const ST_NOT_FOUND: u8 = 1;
pub const ST_NOT_PRIMARY: u8 = 2;
pub const ST_REPLICATION_FAILED: u8 = 3;
pub const ST_BAD_REQUEST: u8 = 4;
pub const ST_ERROR: u8 = 5;

/// Descriptor id of the client listener in checkpoints.
pub const LISTENER_DESCRIPTOR: u32 = 1;

const CONTROL_MAGIC: &[u8; 4] = b"KVAP";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AppError {
    #[error("control record is not a KV application record")]
    BadControlRecord,
    #[error(transparent)]
    Table(#[from] TableError),
}

/// The KV store state: a table and an optional duplicate-request table,
/// both inside the managed heap.
pub struct KvApp {
    heap: Arc<ManagedHeap>,
    kv: Table,
    dedup: Option<Table>,
    listen_port: AtomicU16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Applied {
    pub status: u8,
    pub value: Vec<u8>,
    /// The request changed state, or replays a change that did.
    pub wrote: bool,
}

impl KvApp {
    pub fn create(heap: Arc<ManagedHeap>, dedup: bool) -> Result<Self, AppError> {
        let (kv, dedup) = heap.mutate(|h| -> Result<_, TableError> {
            let kv = Table::create(h)?;
            let dedup = if dedup { Some(Table::create(h)?) } else { None };
            Ok((kv, dedup))
        })?;
        Ok(KvApp {
            heap,
            kv,
            dedup,
            listen_port: AtomicU16::new(0),
        })
    }

    /// Resume from a restored heap.
    pub fn resume(heap: Arc<ManagedHeap>, control_record: &[u8]) -> Result<Self, AppError> {
        if control_record.len() != 20 || &control_record[0..4] != CONTROL_MAGIC {
            return Err(AppError::BadControlRecord);
        }
        let word = |at: usize| u64::from_le_bytes(control_record[at..at + 8].try_into().unwrap());
        let (kv_root, dedup_root) = (word(4), word(12));
        let (kv, dedup) = heap.mutate(|h| -> Result<_, TableError> {
            let kv = Table::open(h, ObjectRef::from_offset(kv_root))?;
            let dedup = match dedup_root {
                0 => None,
                r => Some(Table::open(h, ObjectRef::from_offset(r))?),
            };
            Ok((kv, dedup))
        })?;
        Ok(KvApp {
            heap,
            kv,
            dedup,
            listen_port: AtomicU16::new(0),
        })
    }

    pub fn heap(&self) -> &Arc<ManagedHeap> {
        &self.heap
    }

    pub fn dedup_enabled(&self) -> bool {
        self.dedup.is_some()
    }

    /// Record the client listener so checkpoints carry it.
    pub fn set_listen_port(&self, port: u16) {
        self.listen_port.store(port, Ordering::SeqCst);
    }

    fn apply_in(&self, h: &mut HeapSpace, op: u8, key: &[u8], value: &[u8]) -> Result<Applied, TableError> {
        let ok = |value, wrote| Applied {
            status: ST_OK,
            value,
            wrote,
        };
        Ok(match op {
            OP_GET => match self.kv.get(h, key)? {
                Some(v) => ok(v, false),
                None => Applied {
                    status: ST_NOT_FOUND,
                    value: Vec::new(),
                    wrote: false,
                },
            },
            OP_PUT => {
                self.kv.put(h, key, value)?;
                ok(Vec::new(), true)
            }
            OP_DELETE => {
                self.kv.delete(h, key)?;
                ok(Vec::new(), true)
            }
            _ => Applied {
                status: ST_BAD_REQUEST,
                value: b"unknown opcode".to_vec(),
                wrote: false,
            },
        })
    }

    /// Apply one request atomically with respect to checkpoints.
    ///
    /// With dedup on, a write whose request id matches the client's last
    /// recorded write is answered from the record instead of re-applied.
    pub fn apply(&self, op: u8, client_id: u64, request_id: u64, key: &[u8], value: &[u8]) -> Result<Applied, TableError> {
        self.heap.mutate(|h| {
            let Some(dedup) = self.dedup.filter(|_| op == OP_PUT || op == OP_DELETE) else {
                return self.apply_in(h, op, key, value);
            };
            let client = client_id.to_le_bytes();
            if let Some(rec) = dedup.get(h, &client)? {
                if rec.len() == 9 && u64::from_le_bytes(rec[0..8].try_into().unwrap()) == request_id {
                    return Ok(Applied {
                        status: rec[8],
                        value: Vec::new(),
                        wrote: true,
                    });
                }
            }
            let applied = self.apply_in(h, op, key, value)?;
            let mut rec = request_id.to_le_bytes().to_vec();
            rec.push(applied.status);
            dedup.put(h, &client, &rec)?;
            Ok(applied)
        })
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, TableError> {
        self.heap.mutate(|h| self.kv.get(h, key))
    }

    pub fn len(&self) -> Result<u64, TableError> {
        self.heap.mutate(|h| self.kv.len(h))
    }

    pub fn is_empty(&self) -> Result<bool, TableError> {
        Ok(self.len()? == 0)
    }

    /// All pairs, sorted by key.
    pub fn snapshot(&self) -> Result<Vec<(Vec<u8>, Vec<u8>)>, TableError> {
        let mut all = self.heap.mutate(|h| self.kv.entries(h))?;
        all.sort();
        Ok(all)
    }
}

impl CheckpointSource for KvApp {
    fn control_record(&self) -> Result<Vec<u8>, String> {
        let mut out = CONTROL_MAGIC.to_vec();
        out.extend_from_slice(&self.kv.root().offset().to_le_bytes());
        out.extend_from_slice(&self.dedup.map_or(0, |t| t.root().offset()).to_le_bytes());
        Ok(out)
    }

    fn descriptors(&self) -> Vec<DescriptorRecord> {
        match self.listen_port.load(Ordering::SeqCst) {
            0 => Vec::new(),
            port => vec![DescriptorRecord {
                id: LISTENER_DESCRIPTOR,
                kind: DescriptorKind::TcpListener { port },
            }],
        }
    }
}

/// Server-side hooks, settable after the server starts.
#[derive(Default)]
struct Hooks {
    expose: Option<ExposeFn>,
    on_kill: Option<Arc<dyn Fn() + Send + Sync>>,
}

/// A running KV server.
pub struct KvServer {
    service: ServiceHandle,
    app: Arc<KvApp>,
    serving: Arc<AtomicBool>,
    view: Arc<AtomicU64>,
    hooks: Arc<RwLock<Hooks>>,
}

impl KvServer {
    pub fn addr(&self) -> SocketAddr {
        self.service.addr()
    }

    pub fn app(&self) -> &Arc<KvApp> {
        &self.app
    }

    /// Accept or refuse (NOT_PRIMARY) client requests.
    pub fn set_serving(&self, on: bool) {
        self.serving.store(on, Ordering::SeqCst);
    }

    pub fn serving_flag(&self) -> Arc<AtomicBool> {
        self.serving.clone()
    }

    pub fn set_view(&self, view: u64) {
        self.view.store(view, Ordering::SeqCst);
    }

    /// Called after every write and before its reply.
    pub fn set_expose(&self, f: Option<ExposeFn>) {
        self.hooks.write().expose = f;
    }

    pub fn set_on_kill(&self, f: Arc<dyn Fn() + Send + Sync>) {
        self.hooks.write().on_kill = Some(f);
    }

    /// Close the listener and every client connection.
    pub fn shutdown(&mut self) {
        self.serving.store(false, Ordering::SeqCst);
        self.service.shutdown();
    }
}

fn handle(app: &KvApp, serving: &AtomicBool, view: &AtomicU64, hooks: &RwLock<Hooks>, req: Request) -> Response {
    let reply = |status, value: &[u8]| {
        let mut p = view.load(Ordering::SeqCst).to_le_bytes().to_vec();
        p.extend_from_slice(value);
        Response::new(status, p)
    };
    if req.opcode == OP_KILL {
        let hook = hooks.read().on_kill.clone();
        if let Some(f) = hook {
            f();
        }
        return reply(ST_OK, &[]);
    }
    if !serving.load(Ordering::SeqCst) {
        return reply(ST_NOT_PRIMARY, &[]);
    }
    let mut c = Cursor::new(&req.payload);
    let (Ok(client_id), Ok(request_id)) = (c.u64(), c.u64()) else {
        return reply(ST_BAD_REQUEST, b"short payload");
    };
    let applied = match app.apply(req.opcode, client_id, request_id, &req.name, c.rest()) {
        Ok(a) => a,
        Err(TableError::KeyTooLong(_)) => return reply(ST_BAD_REQUEST, b"key too long"),
        Err(e) => return reply(ST_ERROR, e.to_string().as_bytes()),
    };
    if applied.wrote {
        let expose = hooks.read().expose.clone();
        if let Some(expose) = expose {
            if let Err(e) = expose() {
                return reply(ST_REPLICATION_FAILED, e.as_bytes());
            }
        }
    }
    reply(applied.status, &applied.value)
}

/// Serve `app` on `listener`. The server starts not serving.
pub fn serve(listener: TcpListener, app: Arc<KvApp>) -> io::Result<KvServer> {
    app.set_listen_port(listener.local_addr()?.port());
    let serving = Arc::new(AtomicBool::new(false));
    let view = Arc::new(AtomicU64::new(0));
    let hooks = Arc::new(RwLock::new(Hooks::default()));
    let handler: wire::Handler = {
        let (app, serving, view, hooks) = (app.clone(), serving.clone(), view.clone(), hooks.clone());
        Arc::new(move |req| handle(&app, &serving, &view, &hooks, req))
    };
    let service = wire::serve(listener, "kv", handler)?;
    Ok(KvServer {
        service,
        app,
        serving,
        view,
        hooks,
    })
}
