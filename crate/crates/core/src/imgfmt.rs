//! Checkpoint image files.
//!
//! A checkpoint is a pair of files. The core image carries metadata and the
//! memory image carries raw page payloads in page-table order. All integers
//! are little-endian and fixed width; lists are prefixed by a `u32` count.
//!
//! ```text
//! core image
//!   magic        [u8; 4]  "CSYN"
//!   version      u32      1
//!   seq          u64
//!   parent_seq   u64      0 for a full checkpoint
//!   kind         u8       0 = full, 1 = incremental
//!   page_size    u32
//!   heap_pages   u64
//!   page_count   u32
//!     page_index u64
//!     mem_offset u64      entry rank * page_size
//!     flags      u32      reserved, 0
//!   desc_count   u32
//!     id         u32
//!     kind       u8       0 = tcp_listener, 1 = stream, 2 = regular_file, 3 = pipe
//!     params_len u32, params
//!     buf_len    u32, buffered bytes
//!   control_len  u32, control record
//!   crc          u32      CRC-32 (IEEE) over every preceding core byte, then the memory image
//! ```

use std::fmt;

use thiserror::Error;

use crate::storesvc::{BlobName, BlobStore, StoreError};

pub const MAGIC: &[u8; 4] = b"CSYN";
pub const VERSION: u32 = 1;
/// Encoded size of a core image with no pages, descriptors or control bytes.
pub const EMPTY_CORE_LEN: usize = 4 + 4 + 8 + 8 + 1 + 4 + 8 + 4 + 4 + 4 + 4;
const PAGE_ENTRY_LEN: usize = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated image")]
    Truncated,
    #[error("malformed image: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum CheckpointIoError {
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error("checkpoint {0} has a core image but no memory image")]
    MissingPayload(u64),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Full,
    Incremental,
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckpointKind::Full => "full",
            CheckpointKind::Incremental => "incremental",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageTableEntry {
    pub page_index: u64,
    pub mem_offset: u64,
    pub flags: u32,
}

/// A re-openable application endpoint captured with a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DescriptorKind {
    TcpListener { port: u16 },
    Stream { peer: String, buffered: Vec<u8> },
    RegularFile { path: String },
    Pipe { name: String, buffered: Vec<u8> },
}

impl DescriptorKind {
    pub fn tag(&self) -> u8 {
        match self {
            DescriptorKind::TcpListener { .. } => 0,
            DescriptorKind::Stream { .. } => 1,
            DescriptorKind::RegularFile { .. } => 2,
            DescriptorKind::Pipe { .. } => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DescriptorKind::TcpListener { .. } => "tcp_listener",
            DescriptorKind::Stream { .. } => "stream",
            DescriptorKind::RegularFile { .. } => "regular_file",
            DescriptorKind::Pipe { .. } => "pipe",
        }
    }

    fn params(&self) -> Vec<u8> {
        match self {
            DescriptorKind::TcpListener { port } => port.to_le_bytes().to_vec(),
            DescriptorKind::Stream { peer, .. } => peer.as_bytes().to_vec(),
            DescriptorKind::RegularFile { path } => path.as_bytes().to_vec(),
            DescriptorKind::Pipe { name, .. } => name.as_bytes().to_vec(),
        }
    }

    pub fn buffered(&self) -> &[u8] {
        match self {
            DescriptorKind::Stream { buffered, .. } | DescriptorKind::Pipe { buffered, .. } => buffered,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorRecord {
    pub id: u32,
    pub kind: DescriptorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreImage {
    pub seq: u64,
    pub parent_seq: u64,
    pub kind: CheckpointKind,
    pub page_size: u32,
    pub heap_pages: u64,
    pub page_table: Vec<PageTableEntry>,
    pub descriptors: Vec<DescriptorRecord>,
    pub control_record: Vec<u8>,
}

impl CoreImage {
    /// Page table for `pages` (ascending) with offsets assigned by rank.
    pub fn page_table_for(pages: impl IntoIterator<Item = u64>, page_size: u32) -> Vec<PageTableEntry> {
        pages
            .into_iter()
            .enumerate()
            .map(|(rank, page_index)| PageTableEntry {
                page_index,
                mem_offset: rank as u64 * page_size as u64,
                flags: 0,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        let bad = |m: String| Err(FormatError::Malformed(m));
        match self.kind {
            CheckpointKind::Full if self.parent_seq != 0 => {
                return bad(format!("full checkpoint {} names parent {}", self.seq, self.parent_seq))
            }
            CheckpointKind::Incremental if self.parent_seq + 1 != self.seq => {
                return bad(format!(
                    "incremental checkpoint {} names parent {}",
                    self.seq, self.parent_seq
                ))
            }
            _ => {}
        }
        if !self.page_size.is_power_of_two() || self.page_size < 256 {
            return bad(format!("page size {}", self.page_size));
        }
        for (rank, e) in self.page_table.iter().enumerate() {
            if rank > 0 && self.page_table[rank - 1].page_index >= e.page_index {
                return bad("page table not strictly ascending".into());
            }
            if e.page_index >= self.heap_pages {
                return bad(format!("page {} beyond heap of {} pages", e.page_index, self.heap_pages));
            }
            if e.mem_offset != rank as u64 * self.page_size as u64 {
                return bad(format!("page {} has offset {}", e.page_index, e.mem_offset));
            }
            if e.flags != 0 {
                return bad(format!("page {} has reserved flags {:#x}", e.page_index, e.flags));
            }
        }
        let mut ids: Vec<u32> = self.descriptors.iter().map(|d| d.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate descriptor id".into());
        }
        Ok(())
    }

    pub fn mem_len(&self) -> usize {
        self.page_table.len() * self.page_size as usize
    }
}

/// Raw page payloads, `page_size` bytes each, in page-table order.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct MemoryImage(pub Vec<u8>);

impl fmt::Debug for MemoryImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MemoryImage({} bytes)", self.0.len())
    }
}

/// A core image together with its memory image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub core: CoreImage,
    pub mem: MemoryImage,
}

impl Checkpoint {
    pub fn seq(&self) -> u64 {
        self.core.seq
    }

    /// Payload of the `rank`-th page-table entry.
    pub fn page_at(&self, rank: usize) -> &[u8] {
        let ps = self.core.page_size as usize;
        &self.mem.0[rank * ps..(rank + 1) * ps]
    }

    /// Iterate (page index, payload).
    pub fn pages(&self) -> impl Iterator<Item = (u64, &[u8])> {
        self.core
            .page_table
            .iter()
            .enumerate()
            .map(|(rank, e)| (e.page_index, self.page_at(rank)))
    }

    pub fn encode(&self) -> (Vec<u8>, Vec<u8>) {
        (encode_core(&self.core, &self.mem), self.mem.0.clone())
    }

    pub fn decode(core: &[u8], mem: &[u8]) -> Result<Self, FormatError> {
        let core = decode_core(core, mem)?;
        Ok(Checkpoint {
            core,
            mem: MemoryImage(mem.to_vec()),
        })
    }

    /// Bytes this checkpoint occupies in storage.
    pub fn encoded_len(&self) -> usize {
        encoded_core_len(&self.core) + self.mem.0.len()
    }
}

pub fn encoded_core_len(core: &CoreImage) -> usize {
    EMPTY_CORE_LEN
        + core.page_table.len() * PAGE_ENTRY_LEN
        + core
            .descriptors
            .iter()
            .map(|d| 4 + 1 + 4 + d.kind.params().len() + 4 + d.kind.buffered().len())
            .sum::<usize>()
        + core.control_record.len()
}

pub fn encode_core(core: &CoreImage, mem: &MemoryImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_core_len(core));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&core.seq.to_le_bytes());
    out.extend_from_slice(&core.parent_seq.to_le_bytes());
    out.push(match core.kind {
        CheckpointKind::Full => 0,
        CheckpointKind::Incremental => 1,
    });
    out.extend_from_slice(&core.page_size.to_le_bytes());
    out.extend_from_slice(&core.heap_pages.to_le_bytes());
    out.extend_from_slice(&(core.page_table.len() as u32).to_le_bytes());
    for e in &core.page_table {
        out.extend_from_slice(&e.page_index.to_le_bytes());
        out.extend_from_slice(&e.mem_offset.to_le_bytes());
        out.extend_from_slice(&e.flags.to_le_bytes());
    }
    out.extend_from_slice(&(core.descriptors.len() as u32).to_le_bytes());
    for d in &core.descriptors {
        out.extend_from_slice(&d.id.to_le_bytes());
        out.push(d.kind.tag());
        let params = d.kind.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        out.extend_from_slice(&params);
        let buffered = d.kind.buffered();
        out.extend_from_slice(&(buffered.len() as u32).to_le_bytes());
        out.extend_from_slice(buffered);
    }
    out.extend_from_slice(&(core.control_record.len() as u32).to_le_bytes());
    out.extend_from_slice(&core.control_record);
    let crc = image_crc(&out, &mem.0);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn image_crc(core_body: &[u8], mem: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(core_body);
    h.update(mem);
    h.finalize()
}

/// Check framing and CRC of a core/memory pair and parse the core.
pub fn decode_core(bytes: &[u8], mem: &[u8]) -> Result<CoreImage, FormatError> {
    check_header(bytes)?;
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = image_crc(body, mem);
    if stored != computed {
        return Err(FormatError::CrcMismatch { stored, computed });
    }
    let core = parse_body(body)?;
    if core.mem_len() != mem.len() {
        return Err(FormatError::Malformed(format!(
            "memory image is {} bytes, page table needs {}",
            mem.len(),
            core.mem_len()
        )));
    }
    Ok(core)
}

/// Parse a core image without its memory image. The CRC is not checked.
pub fn decode_core_unverified(bytes: &[u8]) -> Result<CoreImage, FormatError> {
    check_header(bytes)?;
    parse_body(&bytes[..bytes.len() - 4])
}

/// Whether the stored CRC of `core` matches `mem`.
pub fn crc_matches(core: &[u8], mem: &[u8]) -> bool {
    core.len() >= 4 && {
        let (body, tail) = core.split_at(core.len() - 4);
        u32::from_le_bytes(tail.try_into().unwrap()) == image_crc(body, mem)
    }
}

fn check_header(bytes: &[u8]) -> Result<(), FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < EMPTY_CORE_LEN {
        return Err(FormatError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.buf.len() < n {
            return Err(FormatError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], FormatError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, FormatError> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| FormatError::Malformed("non-utf8 descriptor parameter".into()))
    }
}

fn parse_body(body: &[u8]) -> Result<CoreImage, FormatError> {
    let mut r = Reader { buf: &body[8..] };
    let seq = r.u64()?;
    let parent_seq = r.u64()?;
    let kind = match r.u8()? {
        0 => CheckpointKind::Full,
        1 => CheckpointKind::Incremental,
        k => return Err(FormatError::Malformed(format!("checkpoint kind {k}"))),
    };
    let page_size = r.u32()?;
    let heap_pages = r.u64()?;
    let n = r.u32()? as usize;
    if n.saturating_mul(PAGE_ENTRY_LEN) > r.buf.len() {
        return Err(FormatError::Truncated);
    }
    let mut page_table = Vec::with_capacity(n);
    for _ in 0..n {
        page_table.push(PageTableEntry {
            page_index: r.u64()?,
            mem_offset: r.u64()?,
            flags: r.u32()?,
        });
    }
    let n = r.u32()? as usize;
    let mut descriptors = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let id = r.u32()?;
        let tag = r.u8()?;
        let kind = match tag {
            0 => {
                let mut p = Reader { buf: r.bytes()? };
                let port = p.u16()?;
                if !p.buf.is_empty() {
                    return Err(FormatError::Malformed("listener parameters too long".into()));
                }
                DescriptorKind::TcpListener { port }
            }
            1 => DescriptorKind::Stream {
                peer: r.string()?,
                buffered: Vec::new(),
            },
            2 => DescriptorKind::RegularFile { path: r.string()? },
            3 => DescriptorKind::Pipe {
                name: r.string()?,
                buffered: Vec::new(),
            },
            t => return Err(FormatError::Malformed(format!("descriptor kind {t}"))),
        };
        let buffered = r.bytes()?.to_vec();
        let kind = match kind {
            DescriptorKind::Stream { peer, .. } => DescriptorKind::Stream { peer, buffered },
            DescriptorKind::Pipe { name, .. } => DescriptorKind::Pipe { name, buffered },
            other if buffered.is_empty() => other,
            other => {
                return Err(FormatError::Malformed(format!(
                    "{} descriptor {id} carries buffered bytes",
                    other.name()
                )))
            }
        };
        descriptors.push(DescriptorRecord { id, kind });
    }
    let control_record = r.bytes()?.to_vec();
    if !r.buf.is_empty() {
        return Err(FormatError::Malformed(format!("{} trailing bytes", r.buf.len())));
    }
    let core = CoreImage {
        seq,
        parent_seq,
        kind,
        page_size,
        heap_pages,
        page_table,
        descriptors,
        control_record,
    };
    core.validate()?;
    Ok(core)
}

/// Names of the two blobs that hold checkpoint `seq`.
pub fn checkpoint_names(seq: u64) -> (BlobName, BlobName) {
    (BlobName::checkpoint_core(seq), BlobName::checkpoint_mem(seq))
}

/// Store a checkpoint. The memory image goes first so a visible core image
/// always has its payload.
pub fn write_checkpoint(
    store: &dyn BlobStore,
    core: &CoreImage,
    mem: &MemoryImage,
) -> Result<(BlobName, BlobName), CheckpointIoError> {
    write_named(store, core, mem, checkpoint_names(core.seq))
}

pub fn write_named(
    store: &dyn BlobStore,
    core: &CoreImage,
    mem: &MemoryImage,
    (core_name, mem_name): (BlobName, BlobName),
) -> Result<(BlobName, BlobName), CheckpointIoError> {
    let core_bytes = encode_core(core, mem);
    store.put(&mem_name, &mem.0)?;
    store.put(&core_name, &core_bytes)?;
    Ok((core_name, mem_name))
}

pub fn read_checkpoint(store: &dyn BlobStore, seq: u64) -> Result<Checkpoint, CheckpointIoError> {
    read_named(store, checkpoint_names(seq))
}

pub fn read_named(
    store: &dyn BlobStore,
    (core_name, mem_name): (BlobName, BlobName),
) -> Result<Checkpoint, CheckpointIoError> {
    let core = store.get(&core_name)?;
    let mem = match store.get(&mem_name) {
        Ok(mem) => mem,
        Err(StoreError::NotFound(_)) => return Err(CheckpointIoError::MissingPayload(mem_name.seq())),
        Err(e) => return Err(e.into()),
    };
    Ok(Checkpoint::decode(&core, &mem)?)
}
