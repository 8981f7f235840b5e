//! Length-prefixed request/response framing shared by every TCP service.
//!
//! ```text
//! request   u32 length | u8 opcode | u16 name_len | name | payload
//!           (length counts every byte after itself)
//! response  u8 status | u32 payload_len | payload
//! ```

use std::collections::HashMap;
use std::io::{self, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;

/// Largest accepted frame body.
pub const MAX_FRAME: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub opcode: u8,
    pub name: Vec<u8>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u8,
    pub payload: Vec<u8>,
}

impl Response {
    pub fn new(status: u8, payload: Vec<u8>) -> Self {
        Response { status, payload }
    }
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_request(w: &mut impl Write, opcode: u8, name: &[u8], payload: &[u8]) -> io::Result<()> {
    if name.len() > u16::MAX as usize {
        return Err(invalid("name too long"));
    }
    let len = 1 + 2 + name.len() + payload.len();
    if len > MAX_FRAME {
        return Err(invalid("frame too large"));
    }
    let mut head = Vec::with_capacity(7 + name.len());
    head.extend_from_slice(&(len as u32).to_le_bytes());
    head.push(opcode);
    head.extend_from_slice(&(name.len() as u16).to_le_bytes());
    head.extend_from_slice(name);
    w.write_all(&head)?;
    w.write_all(payload)?;
    w.flush()
}

/// Read one request. `Ok(None)` on a clean end of stream before a frame.
pub fn read_request(r: &mut impl Read) -> io::Result<Option<Request>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if !(3..=MAX_FRAME).contains(&len) {
        return Err(invalid(format!("bad frame length {len}")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let opcode = body[0];
    let name_len = u16::from_le_bytes([body[1], body[2]]) as usize;
    if 3 + name_len > len {
        return Err(invalid("name overruns frame"));
    }
    let payload = body.split_off(3 + name_len);
    let name = body[3..].to_vec();
    Ok(Some(Request {
        opcode,
        name,
        payload,
    }))
}

pub fn write_response(w: &mut impl Write, status: u8, payload: &[u8]) -> io::Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(invalid("response too large"));
    }
    let mut head = [0u8; 5];
    head[0] = status;
    head[1..].copy_from_slice(&(payload.len() as u32).to_le_bytes());
    w.write_all(&head)?;
    w.write_all(payload)?;
    w.flush()
}

pub fn read_response(r: &mut impl Read) -> io::Result<Response> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)?;
    let len = u32::from_le_bytes(head[1..].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(invalid(format!("bad response length {len}")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Response {
        status: head[0],
        payload,
    })
}

/// Little-endian cursor over a payload.
pub struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Cursor { buf }
    }

    pub fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(invalid("payload too short"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    pub fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> io::Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// u16-length-prefixed string.
    pub fn str16(&mut self) -> io::Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| invalid("non-utf8 string"))
    }

    pub fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }
}

pub fn put_str16(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Handles one decoded request.
pub type Handler = Arc<dyn Fn(Request) -> Response + Send + Sync>;

/// A running thread-per-connection TCP service.
pub struct ServiceHandle {
    addr: SocketAddr,
    closed: Arc<AtomicBool>,
    conns: Arc<Mutex<HashMap<u64, TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting and sever every open connection.
    pub fn shutdown(&mut self) {
        if self.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        // unblock accept()
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for (_, c) in self.conns.lock().drain() {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn serve(listener: TcpListener, name: &str, handler: Handler) -> io::Result<ServiceHandle> {
    let addr = listener.local_addr()?;
    let closed = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<HashMap<u64, TcpStream>>> = Arc::new(Mutex::new(HashMap::new()));
    let accept = {
        let closed = closed.clone();
        let conns = conns.clone();
        let name = name.to_string();
        thread::Builder::new()
            .name(format!("{name}-accept"))
            .spawn(move || {
                for (id, stream) in listener.incoming().enumerate() {
                    if closed.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let id = id as u64;
                    let _ = stream.set_nodelay(true);
                    if let Ok(c) = stream.try_clone() {
                        conns.lock().insert(id, c);
                    }
                    let handler = handler.clone();
                    let closed = closed.clone();
                    let conns = conns.clone();
                    let _ = thread::Builder::new()
                        .name(format!("{name}-conn"))
                        .spawn(move || {
                            connection(stream, handler, closed);
                            conns.lock().remove(&id);
                        });
                }
            })?
    };
    Ok(ServiceHandle {
        addr,
        closed,
        conns,
        accept: Some(accept),
    })
}

fn connection(stream: TcpStream, handler: Handler, closed: Arc<AtomicBool>) {
    let mut reader = BufReader::new(&stream);
    let mut writer = &stream;
    while let Ok(Some(req)) = read_request(&mut reader) {
        let resp = handler(req);
        if closed.load(Ordering::SeqCst) {
            break;
        }
        if write_response(&mut writer, resp.status, &resp.payload).is_err() {
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

/// A reconnecting request/response client connection.
pub struct Connection {
    addr: SocketAddr,
    timeout: Duration,
    stream: Option<TcpStream>,
    connects: u64,
}

impl Connection {
    pub fn new(addr: SocketAddr, timeout: Duration) -> Self {
        Connection {
            addr,
            timeout,
            stream: None,
            connects: 0,
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Number of TCP connections established so far.
    pub fn connects(&self) -> u64 {
        self.connects
    }

    pub fn disconnect(&mut self) {
        if let Some(s) = self.stream.take() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    /// One round trip on the current connection, connecting first if needed.
    /// Any I/O error drops the connection.
    pub fn call(&mut self, opcode: u8, name: &[u8], payload: &[u8]) -> io::Result<Response> {
        if self.stream.is_none() {
            let s = TcpStream::connect_timeout(&self.addr, self.timeout)?;
            s.set_nodelay(true)?;
            s.set_read_timeout(Some(self.timeout))?;
            s.set_write_timeout(Some(self.timeout))?;
            self.connects += 1;
            self.stream = Some(s);
        }
        let s = self.stream.as_mut().unwrap();
        let result = write_request(s, opcode, name, payload).and_then(|_| read_response(s));
        if result.is_err() {
            self.disconnect();
        }
        result
    }
}
