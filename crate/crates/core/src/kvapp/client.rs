//! KV client with failover handling.
//!
//! On a lost connection or NOT_PRIMARY the client asks the configuration
//! service for the primary again, backing off while a failover is in
//! progress, and retransmits the request under the same request id.

use std::net::{SocketAddr, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::server::{OP_DELETE, OP_GET, OP_KILL, OP_PUT, ST_NOT_FOUND, ST_NOT_PRIMARY, ST_OK, ST_REPLICATION_FAILED};
use crate::confsvc::ConfClient;
use crate::wire::{Connection, Cursor};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("the write was not replicated: {0}")]
    ReplicationFailed(String),
    #[error("gave up after {0:?}")]
    GaveUp(Duration),
    #[error("server returned status {status}: {msg}")]
    Server { status: u8, msg: String },
}

/// Where the client finds the primary.
#[derive(Debug, Clone, Copy)]
pub enum Route {
    /// A fixed server; no redirection.
    Direct(SocketAddr),
    /// Ask the configuration service.
    Conf(SocketAddr),
}

#[derive(Debug, Clone, Copy)]
pub struct ClientOptions {
    /// Give up on a request after this long.
    pub deadline: Duration,
    pub io_timeout: Duration,
    pub min_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            deadline: Duration::from_secs(30),
            io_timeout: Duration::from_secs(5),
            min_backoff: Duration::from_millis(5),
            max_backoff: Duration::from_millis(50),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvReply {
    pub status: u8,
    pub view_number: u64,
    pub value: Vec<u8>,
}

pub struct KvClient {
    route: Route,
    opts: ClientOptions,
    conf: Option<ConfClient>,
    conn: Option<Connection>,
    client_id: u64,
    next_request: u64,
    view: u64,
    connects: u64,
}

impl KvClient {
    pub fn new(route: Route, client_id: u64, opts: ClientOptions) -> Self {
        KvClient {
            route,
            opts,
            conf: match route {
                Route::Conf(addr) => Some(ConfClient::new(addr)),
                Route::Direct(_) => None,
            },
            conn: None,
            client_id,
            next_request: 1,
            view: 0,
            connects: 0,
        }
    }

    pub fn client_id(&self) -> u64 {
        self.client_id
    }

    /// View number seen in the latest reply.
    pub fn view(&self) -> u64 {
        self.view
    }

    /// TCP connections established to KV servers so far.
    pub fn connects(&self) -> u64 {
        self.connects + self.conn.as_ref().map_or(0, Connection::connects)
    }

    fn drop_conn(&mut self) {
        if let Some(mut c) = self.conn.take() {
            self.connects += c.connects();
            c.disconnect();
        }
    }

    fn resolve(&mut self) -> Option<SocketAddr> {
        match self.route {
            Route::Direct(addr) => Some(addr),
            Route::Conf(_) => {
                let (view, addr) = self.conf.as_mut().unwrap().who_is_primary().ok()?;
                self.view = self.view.max(view);
                addr.to_socket_addrs().ok()?.next()
            }
        }
    }

    /// Send one request, retrying across failures until the deadline.
    pub fn call_with_id(&mut self, op: u8, request_id: u64, key: &[u8], value: &[u8]) -> Result<KvReply, KvError> {
        let started = Instant::now();
        let mut backoff = self.opts.min_backoff;
        let mut payload = Vec::with_capacity(16 + value.len());
        payload.extend_from_slice(&self.client_id.to_le_bytes());
        payload.extend_from_slice(&request_id.to_le_bytes());
        payload.extend_from_slice(value);
        loop {
            if started.elapsed() > self.opts.deadline {
                return Err(KvError::GaveUp(self.opts.deadline));
            }
            if self.conn.is_none() {
                match self.resolve() {
                    Some(addr) => self.conn = Some(Connection::new(addr, self.opts.io_timeout)),
                    None => {
                        thread::sleep(backoff);
                        backoff = (backoff * 2).min(self.opts.max_backoff);
                        continue;
                    }
                }
            }
            let resp = match self.conn.as_mut().unwrap().call(op, key, &payload) {
                Ok(r) => r,
                Err(_) => {
                    self.drop_conn();
                    thread::sleep(backoff);
                    backoff = (backoff * 2).min(self.opts.max_backoff);
                    continue;
                }
            };
            let mut c = Cursor::new(&resp.payload);
            let view = c.u64().unwrap_or(0);
            self.view = self.view.max(view);
            let value = c.rest().to_vec();
            match resp.status {
                ST_NOT_PRIMARY => {
                    self.drop_conn();
                    thread::sleep(backoff);
                    backoff = (backoff * 2).min(self.opts.max_backoff);
                }
                ST_OK | ST_NOT_FOUND => {
                    return Ok(KvReply {
                        status: resp.status,
                        view_number: view,
                        value,
                    })
                }
                ST_REPLICATION_FAILED => {
                    return Err(KvError::ReplicationFailed(String::from_utf8_lossy(&value).into_owned()))
                }
                status => {
                    return Err(KvError::Server {
                        status,
                        msg: String::from_utf8_lossy(&value).into_owned(),
                    })
                }
            }
        }
    }

    pub fn call(&mut self, op: u8, key: &[u8], value: &[u8]) -> Result<KvReply, KvError> {
        let id = self.next_request;
        self.next_request += 1;
        self.call_with_id(op, id, key, value)
    }

    pub fn get(&mut self, key: &[u8]) -> Result<Option<Vec<u8>>, KvError> {
        let r = self.call(OP_GET, key, &[])?;
        Ok((r.status == ST_OK).then_some(r.value))
    }

    pub fn put(&mut self, key: &[u8], value: &[u8]) -> Result<(), KvError> {
        self.call(OP_PUT, key, value).map(|_| ())
    }

    pub fn delete(&mut self, key: &[u8]) -> Result<(), KvError> {
        self.call(OP_DELETE, key, &[]).map(|_| ())
    }

    /// Ask the current primary to terminate. Does not wait or retry.
    pub fn kill_primary(&mut self) -> Result<SocketAddr, KvError> {
        let addr = self.resolve().ok_or(KvError::GaveUp(Duration::ZERO))?;
        let mut c = Connection::new(addr, self.opts.io_timeout);
        let _ = c.call(OP_KILL, &[], &[]);
        Ok(addr)
    }
}
