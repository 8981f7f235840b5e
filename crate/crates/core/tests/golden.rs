//! Golden checkpoint files under `tests/golden/`.
//!
//! Regenerate with `CKPTSYNC_BLESS=1 cargo test -p ckptsync --test golden`.

use std::path::PathBuf;
use std::sync::Arc;

use ckptsync::engine::{Checkpointer, DumpPolicy};
use ckptsync::heap::{HeapConfig, ManagedHeap};
use ckptsync::imgfmt::{encode_core, Checkpoint, CheckpointKind, DescriptorKind};
use ckptsync::kvapp::server::{OP_DELETE, OP_PUT};
use ckptsync::kvapp::KvApp;
use ckptsync::restore::{compact, restore, ReopenOptions};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Three checkpoints of a small KV heap: full, then two incrementals.
fn build() -> Vec<Checkpoint> {
    let heap = Arc::new(ManagedHeap::new(HeapConfig::new(256, 8, 64).unwrap()).unwrap());
    let app = Arc::new(KvApp::create(heap.clone(), false).unwrap());
    app.set_listen_port(7300);
    let mut ck = Checkpointer::new(heap, app.clone(), DumpPolicy::Incremental);
    let mut out = vec![ck.checkpoint_once().unwrap().checkpoint];
    for (i, k) in ["alpha", "beta", "gamma"].iter().enumerate() {
        app.apply(OP_PUT, 1, i as u64 + 1, k.as_bytes(), &[b'a' + i as u8; 40]).unwrap();
    }
    out.push(ck.checkpoint_once().unwrap().checkpoint);
    app.apply(OP_DELETE, 1, 4, b"beta", &[]).unwrap();
    app.apply(OP_PUT, 1, 5, b"delta", b"dddd").unwrap();
    out.push(ck.checkpoint_once().unwrap().checkpoint);
    out
}

#[test]
fn golden_files_match() {
    let dir = golden_dir();
    let bless = std::env::var_os("CKPTSYNC_BLESS").is_some();
    for c in build() {
        let (core, mem) = c.encode();
        for (suffix, bytes) in [("core", &core), ("mem", &mem)] {
            let path = dir.join(format!("ckpt-{}.{suffix}", c.seq()));
            if bless {
                std::fs::create_dir_all(&dir).unwrap();
                std::fs::write(&path, bytes).unwrap();
            }
            let on_disk = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(&on_disk, bytes, "{} differs from the encoder output", path.display());
        }
    }
}

#[test]
fn golden_files_decode() {
    let dir = golden_dir();
    let read = |seq: u64| {
        let core = std::fs::read(dir.join(format!("ckpt-{seq}.core"))).unwrap();
        let mem = std::fs::read(dir.join(format!("ckpt-{seq}.mem"))).unwrap();
        // the core image is self-describing, so re-encoding must reproduce it
        let c = Checkpoint::decode(&core, &mem).unwrap();
        assert_eq!(encode_core(&c.core, &c.mem), core);
        c
    };
    let chain: Vec<Checkpoint> = (1..=3).map(read).collect();
    assert_eq!(chain[0].core.kind, CheckpointKind::Full);
    assert_eq!(chain[0].core.parent_seq, 0);
    assert_eq!(chain[2].core.kind, CheckpointKind::Incremental);
    assert_eq!(chain[2].core.parent_seq, 2);
    assert_eq!(chain[0].core.descriptors.len(), 1);
    assert_eq!(chain[0].core.descriptors[0].kind, DescriptorKind::TcpListener { port: 7300 });

    let merged = compact(&chain).unwrap();
    let ctx = restore(&merged, HeapConfig::new(256, 8, 64).unwrap(), &ReopenOptions::skip_all()).unwrap();
    let app = KvApp::resume(Arc::new(ctx.heap), &ctx.control_record).unwrap();
    assert_eq!(app.get(b"alpha").unwrap(), Some(vec![b'a'; 40]));
    assert_eq!(app.get(b"beta").unwrap(), None);
    assert_eq!(app.get(b"gamma").unwrap(), Some(vec![b'c'; 40]));
    assert_eq!(app.get(b"delta").unwrap(), Some(b"dddd".to_vec()));
}
