//! The checkpoint pipeline: suspend mutators, pick pages in two passes, copy
//! them out, restart, and hand the images on.
//!
//! Pass one keeps the pages written since the previous checkpoint. Pass two
//! drops the ones that hold no live allocation. Payloads are copied while the
//! world is stopped; building the image and handing it to a sink happen
//! after restart so replication never holds mutators.

use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::warn;
use parking_lot::Mutex;
use thiserror::Error;

use crate::heap::{HeapError, ManagedHeap, PageSet, StoppedWorld};
use crate::imgfmt::{Checkpoint, CheckpointKind, CoreImage, DescriptorRecord, MemoryImage};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error(transparent)]
    Heap(#[from] HeapError),
    #[error("dump failed: {0}")]
    Dump(String),
}

/// Pages considered at each step of one checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PageSelection {
    pub initial: u64,
    pub after_pass1: PageSet,
    pub after_pass2: PageSet,
}

impl PageSelection {
    pub fn counts(&self) -> (u64, usize, usize) {
        (self.initial, self.after_pass1.len(), self.after_pass2.len())
    }
}

/// Two-pass selection over a stopped heap.
pub fn select_pages(world: &StoppedWorld<'_>) -> PageSelection {
    let after_pass1 = world.dirty_pages();
    let after_pass2 = after_pass1
        .iter()
        .copied()
        .filter(|&p| world.is_live(p))
        .collect();
    PageSelection {
        initial: world.page_count(),
        after_pass1,
        after_pass2,
    }
}

/// What pages each checkpoint dumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpPolicy {
    /// Full dump of live pages first, then two-pass incrementals.
    Incremental,
    /// Every checkpoint is a full dump of every mapped page. The naive
    /// baseline.
    FullEveryTime,
}

/// Application state that travels with a checkpoint besides heap pages.
///
/// Both methods run while the world is stopped.
pub trait CheckpointSource: Send + Sync {
    fn control_record(&self) -> Result<Vec<u8>, String>;

    fn descriptors(&self) -> Vec<DescriptorRecord> {
        Vec::new()
    }
}

/// A source with a fixed control record and no descriptors.
pub struct StaticSource(pub Vec<u8>);

impl CheckpointSource for StaticSource {
    fn control_record(&self) -> Result<Vec<u8>, String> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone)]
pub struct TakenCheckpoint {
    pub checkpoint: Checkpoint,
    pub selection: PageSelection,
    /// Time mutators spent parked.
    pub pause: Duration,
    pub taken_at: Instant,
}

type StoppedObserver = Box<dyn FnMut(&StoppedWorld<'_>, u64) + Send>;

/// Owns the checkpoint agent role for one heap.
pub struct Checkpointer {
    heap: Arc<ManagedHeap>,
    source: Arc<dyn CheckpointSource>,
    policy: DumpPolicy,
    next_seq: u64,
    need_full: bool,
    observer: Option<StoppedObserver>,
}

impl Checkpointer {
    pub fn new(heap: Arc<ManagedHeap>, source: Arc<dyn CheckpointSource>, policy: DumpPolicy) -> Self {
        Checkpointer {
            heap,
            source,
            policy,
            next_seq: 1,
            need_full: true,
            observer: None,
        }
    }

    /// Continue numbering after `last_seq`. The next checkpoint is full.
    pub fn continuing_after(mut self, last_seq: u64) -> Self {
        self.next_seq = last_seq + 1;
        self.need_full = true;
        self
    }

    /// Run `f` inside every stopped world, after page selection and before
    /// the dirty map is reset. Receives the seq being taken.
    pub fn observe_stopped(&mut self, f: impl FnMut(&StoppedWorld<'_>, u64) + Send + 'static) {
        self.observer = Some(Box::new(f));
    }

    pub fn heap(&self) -> &Arc<ManagedHeap> {
        &self.heap
    }

    pub fn policy(&self) -> DumpPolicy {
        self.policy
    }

    /// Seq of the most recent checkpoint, 0 if none.
    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn checkpoint_once(&mut self) -> Result<TakenCheckpoint, EngineError> {
        let seq = self.next_seq;
        let full = self.need_full || self.policy == DumpPolicy::FullEveryTime;
        let started = Instant::now();
        let mut world = self.heap.stop_world()?;

        let mut selection = select_pages(&world);
        if full {
            let all: PageSet = (0..world.page_count()).collect();
            selection.after_pass2 = match self.policy {
                DumpPolicy::Incremental => world.live_pages(),
                DumpPolicy::FullEveryTime => all.clone(),
            };
            selection.after_pass1 = all;
        }
        debug_assert!(selection.after_pass2.is_subset(&selection.after_pass1));

        let page_size = world.page_size();
        let mut mem = Vec::with_capacity(selection.after_pass2.len() * page_size);
        for &p in &selection.after_pass2 {
            mem.extend_from_slice(world.page(p));
        }
        let heap_pages = world.page_count();
        let descriptors = self.source.descriptors();
        // world restarts on the early return through the guard's Drop
        let control_record = self.source.control_record().map_err(EngineError::Dump)?;
        if let Some(observe) = self.observer.as_mut() {
            observe(&world, seq);
        }
        world.reset_dirty();
        world.set_epoch(seq);
        drop(world);
        let pause = started.elapsed();

        self.next_seq += 1;
        self.need_full = false;
        let page_size = page_size as u32;
        let core = CoreImage {
            seq,
            parent_seq: if full { 0 } else { seq - 1 },
            kind: if full {
                CheckpointKind::Full
            } else {
                CheckpointKind::Incremental
            },
            page_size,
            heap_pages,
            page_table: CoreImage::page_table_for(selection.after_pass2.iter().copied(), page_size),
            descriptors,
            control_record,
        };
        Ok(TakenCheckpoint {
            checkpoint: Checkpoint {
                core,
                mem: MemoryImage(mem),
            },
            selection,
            pause,
            taken_at: started,
        })
    }
}

/// Handle to a running periodic checkpoint agent.
pub struct PeriodicHandle {
    stop: Option<mpsc::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl PeriodicHandle {
    /// Stop the agent and wait for an in-progress checkpoint to finish.
    pub fn stop(&mut self) {
        self.stop.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for PeriodicHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Take a checkpoint every `interval` and pass each to `sink`.
///
/// A sink that blocks slows the cadence; nothing queues inside the agent.
pub fn run_periodic(
    checkpointer: Arc<Mutex<Checkpointer>>,
    interval: Duration,
    mut sink: impl FnMut(TakenCheckpoint) + Send + 'static,
) -> PeriodicHandle {
    assert!(!interval.is_zero(), "checkpoint interval must be positive");
    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let thread = thread::Builder::new()
        .name("ckpt-agent".into())
        .spawn(move || {
            let mut next = Instant::now() + interval;
            loop {
                let wait = next.saturating_duration_since(Instant::now());
                match stop_rx.recv_timeout(wait) {
                    Err(RecvTimeoutError::Timeout) => {}
                    _ => return,
                }
                let taken = checkpointer.lock().checkpoint_once();
                match taken {
                    Ok(t) => sink(t),
                    Err(e) => warn!("checkpoint skipped: {e}"),
                }
                next += interval;
                let now = Instant::now();
                if next < now {
                    next = now;
                }
            }
        })
        .expect("spawn checkpoint agent");
    PeriodicHandle {
        stop: Some(stop_tx),
        thread: Some(thread),
    }
}
