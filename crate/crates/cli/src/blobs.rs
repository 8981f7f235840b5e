//! Offline checkpoint tools: inspect, merge, restore-dryrun.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ckptsync::heap::HeapConfig;
use ckptsync::imgfmt::{crc_matches, decode_core_unverified, read_named, write_named, Checkpoint, DescriptorKind};
use ckptsync::managers::fetch_chain;
use ckptsync::restore::{compact, restore, ReopenOptions};
use ckptsync::storesvc::{BlobName, BlobStore, BlobSuffix, DirStore, StoreError};

/// Accepts `ckpt-3`, `ckpt-3.core`, `ckpt-3.mem` and the `compact-` forms.
pub fn parse_name(arg: &str) -> Result<(BlobName, BlobName)> {
    let with_suffix = if arg.ends_with(".core") || arg.ends_with(".mem") {
        arg.to_string()
    } else {
        format!("{arg}.core")
    };
    let name: BlobName = with_suffix
        .parse()
        .with_context(|| format!("{arg:?} is not a checkpoint name like ckpt-3 or compact-7.core"))?;
    Ok(match name.suffix() {
        BlobSuffix::Core => (name.clone(), name.sibling()),
        BlobSuffix::Mem => (name.sibling(), name),
    })
}

fn describe(kind: &DescriptorKind) -> String {
    match kind {
        DescriptorKind::TcpListener { port } => format!("tcp_listener port={port}"),
        DescriptorKind::Stream { peer, buffered } => format!("stream peer={peer} buffered={}", buffered.len()),
        DescriptorKind::RegularFile { path } => format!("regular_file path={path}"),
        DescriptorKind::Pipe { name, buffered } => format!("pipe name={name} buffered={}", buffered.len()),
    }
}

/// Human-readable summary of one checkpoint. `ok` is false on a CRC mismatch.
pub fn inspect(store: &dyn BlobStore, arg: &str) -> Result<(String, bool)> {
    let (core_name, mem_name) = parse_name(arg)?;
    let core_bytes = store.get(&core_name).with_context(|| format!("read {core_name}"))?;
    let core = decode_core_unverified(&core_bytes).with_context(|| format!("parse {core_name}"))?;
    let (crc, ok) = match store.get(&mem_name) {
        Ok(mem) if crc_matches(&core_bytes, &mem) => ("ok".to_string(), true),
        Ok(_) => ("MISMATCH".to_string(), false),
        Err(StoreError::NotFound(_)) => (format!("unchecked ({mem_name} missing)"), false),
        Err(e) => return Err(e).with_context(|| format!("read {mem_name}")),
    };
    let mut out = String::new();
    let _ = writeln!(out, "name: {core_name}");
    let _ = writeln!(out, "seq: {}", core.seq);
    let _ = writeln!(out, "kind: {}", core.kind);
    let _ = writeln!(out, "parent: {}", core.parent_seq);
    let _ = writeln!(out, "page_size: {}", core.page_size);
    let _ = writeln!(out, "heap_pages: {}", core.heap_pages);
    let _ = writeln!(out, "page_count: {}", core.page_table.len());
    let _ = writeln!(out, "descriptors: {}", core.descriptors.len());
    for d in &core.descriptors {
        let _ = writeln!(out, "  {} {}", d.id, describe(&d.kind));
    }
    let _ = writeln!(out, "control_len: {}", core.control_record.len());
    let _ = writeln!(out, "crc: {crc}");
    Ok((out, ok))
}

fn read(store: &dyn BlobStore, arg: &str) -> Result<Checkpoint> {
    let names = parse_name(arg)?;
    read_named(store, names.clone()).with_context(|| format!("read {}", names.0))
}

/// Fold the named checkpoints, oldest first, into `compact-<seq>`.
pub fn merge(store: &dyn BlobStore, args: &[String], out: Option<&str>) -> Result<String> {
    if args.is_empty() {
        bail!("merge needs at least one checkpoint");
    }
    let chain = args.iter().map(|a| read(store, a)).collect::<Result<Vec<_>>>()?;
    let merged = compact(&chain)?;
    let names = match out {
        Some(o) => parse_name(o)?,
        None => (BlobName::compact_core(merged.seq()), BlobName::compact_mem(merged.seq())),
    };
    let (core_name, _) = write_named(store, &merged.core, &merged.mem, names)?;
    Ok(format!(
        "wrote {core_name}: seq {} kind {} pages {}\n",
        merged.seq(),
        merged.core.kind,
        merged.core.page_table.len()
    ))
}

/// Restore into a throwaway heap and report its live-page hash. With no
/// names, the newest reconstructible chain in the store is used.
pub fn restore_dryrun(store: &dyn BlobStore, args: &[String]) -> Result<String> {
    let chain = if args.is_empty() {
        fetch_chain(store)?.chain
    } else {
        args.iter().map(|a| read(store, a)).collect::<Result<Vec<_>>>()?
    };
    let merged = compact(&chain)?;
    let core = &merged.core;
    let config = HeapConfig::new(core.page_size as usize, core.heap_pages, core.heap_pages.max(1))?;
    let ctx = restore(&merged, config, &ReopenOptions::skip_all())?;
    let (live, hash) = ctx.heap.mutate(|h| (h.live_pages().len(), h.live_page_hash()));
    Ok(format!(
        "seq: {}\nchain: {}\nlive_pages: {live}\nlive_page_hash: {hash:#018x}\n",
        ctx.seq,
        chain.len()
    ))
}

pub fn open_store(data_dir: &Path) -> Result<DirStore> {
    DirStore::open(data_dir).with_context(|| format!("open data dir {}", data_dir.display()))
}
