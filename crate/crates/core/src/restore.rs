//! Chain reconstruction and rebuilding a running heap from a complete
//! checkpoint.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Cursor;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener};

use thiserror::Error;

use crate::heap::{HeapConfig, HeapError, HeapSpace, ManagedHeap};
use crate::imgfmt::{Checkpoint, CheckpointKind, CoreImage, DescriptorKind, FormatError, MemoryImage};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RestoreError {
    #[error("chain gap: checkpoint {newer} follows {older}")]
    ChainGap { older: u64, newer: u64 },
    #[error("checkpoint {0} is not complete; compact its chain first")]
    IncompleteCheckpoint(u64),
    #[error("page size {newer} does not match {older}")]
    PageSizeMismatch { older: u32, newer: u32 },
    #[error("empty chain")]
    EmptyChain,
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Heap(#[from] HeapError),
}

/// Fold `newer` onto `older`.
///
/// Page payloads are unioned with `newer` winning. Metadata comes from
/// `newer`; kind and parent stay those of `older`, so a full checkpoint
/// stays full.
pub fn merge2(older: &Checkpoint, newer: &Checkpoint) -> Result<Checkpoint, RestoreError> {
    if newer.core.kind != CheckpointKind::Incremental || newer.core.parent_seq != older.core.seq {
        return Err(RestoreError::ChainGap {
            older: older.core.seq,
            newer: newer.core.seq,
        });
    }
    if newer.core.page_size != older.core.page_size {
        return Err(RestoreError::PageSizeMismatch {
            older: older.core.page_size,
            newer: newer.core.page_size,
        });
    }
    let heap_pages = newer.core.heap_pages;
    let mut pages: BTreeMap<u64, &[u8]> = older.pages().filter(|(p, _)| *p < heap_pages).collect();
    pages.extend(newer.pages());

    let page_size = newer.core.page_size;
    let mut mem = Vec::with_capacity(pages.len() * page_size as usize);
    for data in pages.values() {
        mem.extend_from_slice(data);
    }
    let core = CoreImage {
        seq: newer.core.seq,
        parent_seq: older.core.parent_seq,
        kind: older.core.kind,
        page_size,
        heap_pages,
        page_table: CoreImage::page_table_for(pages.keys().copied(), page_size),
        descriptors: newer.core.descriptors.clone(),
        control_record: newer.core.control_record.clone(),
    };
    Ok(Checkpoint {
        core,
        mem: MemoryImage(mem),
    })
}

/// Fold a chain headed by a full checkpoint into one full checkpoint with
/// the last seq.
pub fn compact(chain: &[Checkpoint]) -> Result<Checkpoint, RestoreError> {
    let (head, rest) = chain.split_first().ok_or(RestoreError::EmptyChain)?;
    if head.core.kind != CheckpointKind::Full {
        return Err(RestoreError::IncompleteCheckpoint(head.core.seq));
    }
    let mut acc = head.clone();
    for next in rest {
        acc = merge2(&acc, next)?;
    }
    Ok(acc)
}

/// How descriptors are reopened on the restoring host.
#[derive(Debug, Clone)]
pub struct ReopenOptions {
    pub bind_ip: IpAddr,
    /// Skip every descriptor. Used by dry runs.
    pub skip: bool,
}

impl Default for ReopenOptions {
    fn default() -> Self {
        ReopenOptions {
            bind_ip: IpAddr::V4(Ipv4Addr::LOCALHOST),
            skip: false,
        }
    }
}

impl ReopenOptions {
    pub fn skip_all() -> Self {
        ReopenOptions {
            skip: true,
            ..Default::default()
        }
    }
}

#[derive(Debug)]
pub enum Reopened {
    Listener(TcpListener),
    File(File),
    /// Bytes that were in flight on a stream or pipe at dump time.
    Buffered { name: String, data: Cursor<Vec<u8>> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorReopenFailed {
    pub id: u32,
    pub reason: String,
}

/// Everything an application needs to resume after restore.
pub struct ResumeContext {
    pub heap: ManagedHeap,
    pub seq: u64,
    pub descriptors: BTreeMap<u32, Reopened>,
    pub failed: Vec<DescriptorReopenFailed>,
    pub control_record: Vec<u8>,
}

impl ResumeContext {
    pub fn take_listener(&mut self, id: u32) -> Option<TcpListener> {
        match self.descriptors.remove(&id) {
            Some(Reopened::Listener(l)) => Some(l),
            Some(other) => {
                self.descriptors.insert(id, other);
                None
            }
            None => None,
        }
    }
}

fn reopen(kind: &DescriptorKind, opts: &ReopenOptions) -> Result<Reopened, String> {
    match kind {
        DescriptorKind::TcpListener { port } => TcpListener::bind(SocketAddr::new(opts.bind_ip, *port))
            .map(Reopened::Listener)
            .map_err(|e| format!("bind port {port}: {e}")),
        DescriptorKind::RegularFile { path } => OpenOptions::new()
            .read(true)
            .append(true)
            .open(path)
            .map(Reopened::File)
            .map_err(|e| format!("open {path}: {e}")),
        DescriptorKind::Stream { peer: name, buffered } | DescriptorKind::Pipe { name, buffered } => {
            Ok(Reopened::Buffered {
                name: name.clone(),
                data: Cursor::new(buffered.clone()),
            })
        }
    }
}

/// Rebuild a heap and reopen descriptors from a full checkpoint.
///
/// `config` supplies the growth limit; the page size comes from the image.
/// The dirty map starts clear and the epoch continues from the checkpoint
/// seq. A descriptor that cannot be reopened is reported in `failed`.
pub fn restore(complete: &Checkpoint, config: HeapConfig, opts: &ReopenOptions) -> Result<ResumeContext, RestoreError> {
    let core = &complete.core;
    if core.kind != CheckpointKind::Full {
        return Err(RestoreError::IncompleteCheckpoint(core.seq));
    }
    core.validate()?;
    if complete.mem.0.len() != core.mem_len() {
        return Err(FormatError::Malformed(format!(
            "memory image holds {} bytes, page table needs {}",
            complete.mem.0.len(),
            core.mem_len()
        ))
        .into());
    }
    let config = HeapConfig::new(
        core.page_size as usize,
        core.heap_pages,
        config.max_pages.max(core.heap_pages),
    )?;
    let space = HeapSpace::from_pages(&config, core.heap_pages, complete.pages())?;
    let heap = ManagedHeap::from_space(config, space);
    heap.stop_world()?.set_epoch(core.seq);

    let mut descriptors = BTreeMap::new();
    let mut failed = Vec::new();
    if !opts.skip {
        for d in &core.descriptors {
            match reopen(&d.kind, opts) {
                Ok(r) => {
                    descriptors.insert(d.id, r);
                }
                Err(reason) => failed.push(DescriptorReopenFailed { id: d.id, reason }),
            }
        }
    }
    Ok(ResumeContext {
        heap,
        seq: core.seq,
        descriptors,
        failed,
        control_record: core.control_record.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Checkpointer, DumpPolicy, StaticSource};
    use crate::heap::ObjectRef;
    use crate::imgfmt::DescriptorRecord;
    use proptest::prelude::*;
    use std::collections::BTreeSet;
    use std::io::Read;
    use std::sync::Arc;

    const PS: usize = 4096;

    fn config() -> HeapConfig {
        HeapConfig::new(PS, 16, 256).unwrap()
    }

    fn ckpt(seq: u64, parent: u64, kind: CheckpointKind, pages: &[(u64, u8)]) -> Checkpoint {
        let mut mem = Vec::new();
        for &(_, fill) in pages {
            mem.extend(std::iter::repeat(fill).take(PS));
        }
        Checkpoint {
            core: CoreImage {
                seq,
                parent_seq: parent,
                kind,
                page_size: PS as u32,
                heap_pages: 16,
                page_table: CoreImage::page_table_for(pages.iter().map(|p| p.0), PS as u32),
                descriptors: vec![],
                control_record: format!("ctl{seq}").into_bytes(),
            },
            mem: MemoryImage(mem),
        }
    }

    fn page_map(c: &Checkpoint) -> BTreeMap<u64, Vec<u8>> {
        c.pages().map(|(p, d)| (p, d.to_vec())).collect()
    }

    #[test]
    fn newer_payload_wins_on_overlap() {
        let a = ckpt(1, 0, CheckpointKind::Full, &[(1, 0xA), (3, 0xA)]);
        let b = ckpt(2, 1, CheckpointKind::Incremental, &[(3, 0xB), (5, 0xB)]);
        let m = merge2(&a, &b).unwrap();
        let pages = page_map(&m);
        assert_eq!(pages.keys().copied().collect::<Vec<_>>(), vec![1, 3, 5]);
        assert!(pages[&3].iter().all(|&b| b == 0xB));
        assert!(pages[&1].iter().all(|&b| b == 0xA));
        assert_eq!((m.core.seq, m.core.parent_seq, m.core.kind), (2, 0, CheckpointKind::Full));
        assert_eq!(m.core.control_record, b"ctl2");
        m.core.validate().unwrap();
    }

    #[test]
    fn empty_incremental_keeps_payloads() {
        let a = ckpt(4, 0, CheckpointKind::Full, &[(0, 1), (2, 2)]);
        let b = ckpt(5, 4, CheckpointKind::Incremental, &[]);
        let m = merge2(&a, &b).unwrap();
        assert_eq!(m.mem, a.mem);
        assert_eq!(m.core.page_table, a.core.page_table);
        assert_eq!(m.core.control_record, b"ctl5");
    }

    #[test]
    fn gaps_are_rejected() {
        let a = ckpt(1, 0, CheckpointKind::Full, &[]);
        let c = ckpt(3, 2, CheckpointKind::Incremental, &[]);
        assert_eq!(merge2(&a, &c).unwrap_err(), RestoreError::ChainGap { older: 1, newer: 3 });
        let full = ckpt(2, 0, CheckpointKind::Full, &[]);
        assert!(matches!(merge2(&a, &full), Err(RestoreError::ChainGap { .. })));
        assert_eq!(compact(&[]).unwrap_err(), RestoreError::EmptyChain);
        let inc = ckpt(2, 1, CheckpointKind::Incremental, &[]);
        assert_eq!(compact(&[inc]).unwrap_err(), RestoreError::IncompleteCheckpoint(2));
    }

    #[test]
    fn compact_of_one_is_identity() {
        let a = ckpt(1, 0, CheckpointKind::Full, &[(1, 9)]);
        assert_eq!(compact(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn restore_requires_full() {
        let inc = ckpt(2, 1, CheckpointKind::Incremental, &[]);
        assert!(matches!(
            restore(&inc, config(), &ReopenOptions::default()),
            Err(RestoreError::IncompleteCheckpoint(2))
        ));
    }

    /// Applies a scripted workload to a heap while keeping a plain map of
    /// expected object contents.
    struct Replay {
        heap: Arc<ManagedHeap>,
        objs: Vec<(ObjectRef, Vec<u8>)>,
    }

    impl Replay {
        fn new() -> Self {
            Replay {
                heap: Arc::new(ManagedHeap::new(config()).unwrap()),
                objs: Vec::new(),
            }
        }

        fn step(&mut self, op: u8, a: u16, b: u8) {
            match op % 3 {
                0 => {
                    let len = 1 + (a as u64 % 9000);
                    if let Ok(r) = self.heap.alloc(len) {
                        let data = vec![b; len as usize];
                        self.heap.write(r, 0, &data).unwrap();
                        self.objs.push((r, data));
                    }
                }
                1 if !self.objs.is_empty() => {
                    let (r, _) = self.objs.swap_remove(a as usize % self.objs.len());
                    self.heap.free(r).unwrap();
                }
                _ if !self.objs.is_empty() => {
                    let i = a as usize % self.objs.len();
                    let (r, data) = &mut self.objs[i];
                    let at = b as usize % data.len();
                    data[at] = data[at].wrapping_add(1);
                    self.heap.write(*r, at as u64, &data[at..at + 1]).unwrap();
                }
                _ => {}
            }
        }
    }

    fn run_chain(script: &[(u8, u16, u8)], every: usize) -> (Replay, Vec<Checkpoint>) {
        let mut replay = Replay::new();
        let mut agent = Checkpointer::new(replay.heap.clone(), Arc::new(StaticSource(vec![])), DumpPolicy::Incremental);
        let mut chain = vec![agent.checkpoint_once().unwrap().checkpoint];
        for (i, &(op, a, b)) in script.iter().enumerate() {
            replay.step(op, a, b);
            if (i + 1) % every == 0 {
                chain.push(agent.checkpoint_once().unwrap().checkpoint);
            }
        }
        chain.push(agent.checkpoint_once().unwrap().checkpoint);
        (replay, chain)
    }

    fn script() -> impl Strategy<Value = Vec<(u8, u16, u8)>> {
        proptest::collection::vec((any::<u8>(), any::<u16>(), any::<u8>()), 1..120)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn compacted_chain_matches_full_dump(script in script(), every in 1usize..12) {
            let (replay, chain) = run_chain(&script, every);
            let merged = compact(&chain).unwrap();
            let pages = page_map(&merged);
            let w = replay.heap.stop_world().unwrap();
            let live = w.live_pages();
            for p in &live {
                prop_assert_eq!(pages.get(p).map(|v| v.as_slice()), Some(w.page(*p)), "page {}", p);
            }
            let live_hash = w.live_page_hash();
            drop(w);

            let ctx = restore(&merged, config(), &ReopenOptions::default()).unwrap();
            let restored_live: BTreeSet<u64> = ctx.heap.live_pages();
            prop_assert_eq!(&restored_live, &live);
            prop_assert_eq!(ctx.heap.mutate(|h| h.live_page_hash()), live_hash);
            for (r, data) in &replay.objs {
                prop_assert_eq!(&ctx.heap.read(*r, 0, data.len() as u64).unwrap(), data);
            }
        }

        #[test]
        fn left_and_right_folds_agree(script in script(), every in 1usize..12) {
            let (_, chain) = run_chain(&script, every);
            let left = compact(&chain).unwrap();
            let mut right = chain.last().unwrap().clone();
            for older in chain[..chain.len() - 1].iter().rev() {
                right = merge2(older, &right).unwrap();
            }
            prop_assert_eq!(left, right);
        }

        #[test]
        fn merge_is_idempotent_on_compacted(script in script(), every in 1usize..12) {
            let (_, chain) = run_chain(&script, every);
            let merged = compact(&chain).unwrap();
            let mut empty = merged.clone();
            empty.core.seq += 1;
            empty.core.parent_seq = merged.core.seq;
            empty.core.kind = CheckpointKind::Incremental;
            empty.core.page_table.clear();
            empty.mem.0.clear();
            let again = merge2(&merged, &empty).unwrap();
            prop_assert_eq!(again.mem, merged.mem);
        }
    }

    #[test]
    fn restore_is_deterministic() {
        let script: Vec<(u8, u16, u8)> = (0..200u32).map(|i| ((i * 7) as u8, (i * 131) as u16, i as u8)).collect();
        let (_, chain) = run_chain(&script, 10);
        let merged = compact(&chain).unwrap();
        let a = restore(&merged, config(), &ReopenOptions::default()).unwrap();
        let b = restore(&merged, config(), &ReopenOptions::default()).unwrap();
        assert_eq!(a.heap.mutate(|h| h.full_hash()), b.heap.mutate(|h| h.full_hash()));
        assert_eq!(a.seq, merged.core.seq);
        assert!(a.heap.dirty_pages().is_empty());
        assert_eq!(a.heap.mutate(|h| h.epoch()), merged.core.seq);
    }

    #[test]
    fn descriptors_are_reopened_or_reported() {
        let holder = TcpListener::bind("127.0.0.1:0").unwrap();
        let taken = holder.local_addr().unwrap().port();
        let free = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let file = tempfile::NamedTempFile::new().unwrap();
        let mut c = ckpt(1, 0, CheckpointKind::Full, &[]);
        let heap = ManagedHeap::new(config()).unwrap();
        let w = heap.stop_world().unwrap();
        c.core.page_table = CoreImage::page_table_for([0], PS as u32);
        c.mem = MemoryImage(w.page(0).to_vec());
        drop(w);
        c.core.descriptors = vec![
            DescriptorRecord { id: 1, kind: DescriptorKind::TcpListener { port: free } },
            DescriptorRecord { id: 2, kind: DescriptorKind::TcpListener { port: taken } },
            DescriptorRecord {
                id: 3,
                kind: DescriptorKind::RegularFile { path: file.path().display().to_string() },
            },
            DescriptorRecord {
                id: 4,
                kind: DescriptorKind::Pipe { name: "p".into(), buffered: b"inflight".to_vec() },
            },
            DescriptorRecord {
                id: 5,
                kind: DescriptorKind::RegularFile { path: "/nonexistent/x".into() },
            },
        ];
        let mut ctx = restore(&c, config(), &ReopenOptions::default()).unwrap();
        let ids: Vec<u32> = ctx.failed.iter().map(|f| f.id).collect();
        assert_eq!(ids, vec![2, 5]);
        let l = ctx.take_listener(1).unwrap();
        assert_eq!(l.local_addr().unwrap().port(), free);
        std::net::TcpStream::connect(("127.0.0.1", free)).unwrap();
        assert!(ctx.take_listener(4).is_none());
        match ctx.descriptors.get_mut(&4).unwrap() {
            Reopened::Buffered { data, .. } => {
                let mut s = String::new();
                data.read_to_string(&mut s).unwrap();
                assert_eq!(s, "inflight");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(ctx.descriptors[&3], Reopened::File(_)));
        let dry = restore(&c, config(), &ReopenOptions::skip_all()).unwrap();
        assert!(dry.descriptors.is_empty() && dry.failed.is_empty());
    }
}
