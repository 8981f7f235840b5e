use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use ckptsync::heap::HeapConfig;
use ckptsync::imgfmt::Checkpoint;
use ckptsync::restore::{compact, restore, ReopenOptions};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ckptsync"));
    c.env_remove("CKPTSYNC_DATA_DIR").env("RUST_LOG", "warn");
    c
}

fn core_golden() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden")
}

fn run(args: &[&str], data_dir: &Path) -> Output {
    bin().arg("--data-dir").arg(data_dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn copy_golden(to: &Path) {
    for e in std::fs::read_dir(core_golden()).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

#[test]
fn inspect_matches_golden_text() {
    for seq in [1, 3] {
        let o = run(&["inspect", &format!("ckpt-{seq}.core")], &core_golden());
        assert_eq!(o.status.code(), Some(0));
        let want = std::fs::read_to_string(
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("tests/golden/inspect_ckpt-{seq}.txt")),
        )
        .unwrap();
        assert_eq!(stdout(&o), want);
    }
}

#[test]
fn inspect_reports_crc_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    copy_golden(dir.path());
    let mem = dir.path().join("ckpt-2.mem");
    let mut bytes = std::fs::read(&mem).unwrap();
    bytes[10] ^= 0x04;
    std::fs::write(&mem, bytes).unwrap();
    let o = run(&["inspect", "ckpt-2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("crc: MISMATCH"));
}

#[test]
fn merge_then_inspect_gives_a_full_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    copy_golden(dir.path());
    let o = run(&["merge", "ckpt-1", "ckpt-2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["inspect", "compact-2"], dir.path());
    let text = stdout(&o);
    assert!(text.contains("\nseq: 2\n"), "{text}");
    assert!(text.contains("\nkind: full\n"), "{text}");
    assert!(text.contains("\ncrc: ok\n"), "{text}");

    // a chain with a gap is refused
    let o = run(&["merge", "ckpt-1", "ckpt-3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn restore_dryrun_hash_matches_library_restore() {
    let dir = core_golden();
    let chain: Vec<Checkpoint> = (1..=3)
        .map(|s| {
            let core = std::fs::read(dir.join(format!("ckpt-{s}.core"))).unwrap();
            let mem = std::fs::read(dir.join(format!("ckpt-{s}.mem"))).unwrap();
            Checkpoint::decode(&core, &mem).unwrap()
        })
        .collect();
    let merged = compact(&chain).unwrap();
    let ctx = restore(&merged, HeapConfig::new(256, 8, 8).unwrap(), &ReopenOptions::skip_all()).unwrap();
    let want = format!("live_page_hash: {:#018x}\n", ctx.heap.mutate(|h| h.live_page_hash()));

    let o = run(&["restore-dryrun"], &dir);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).ends_with(&want), "{}", stdout(&o));
    let o = run(&["restore-dryrun", "ckpt-1", "ckpt-2", "ckpt-3"], &dir);
    assert!(stdout(&o).ends_with(&want));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["inspect"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["inspect", "ckpt-9"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["inspect", "not-a-name"], dir.path()).status.code(), Some(2));
    let help = [
        "store",
        "confsvc",
        "primary",
        "backup",
        "kv-client",
        "bench",
        "merge",
        "inspect",
        "restore-dryrun",
        "kill-primary",
    ];
    for sub in help {
        let o = run(&[sub, "--help"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("Usage:"), "{sub}");
    }
}

#[test]
fn data_dir_from_environment() {
    let o = bin()
        .env("CKPTSYNC_DATA_DIR", core_golden())
        .args(["inspect", "ckpt-2"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("seq: 2"));
}

#[test]
fn bench_writes_only_inside_the_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["bench", "--tsv", "../escape.tsv", "--experiment", "overhead"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(
        &[
            "bench",
            "--experiment",
            "overhead",
            "--modes",
            "off,incremental",
            "--ops",
            "400",
            "--keys",
            "40",
            "--value-size",
            "64",
            "--threads",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("incremental"));
    let entries: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(entries, vec!["bench.tsv".to_string()]);
}

fn free_addr() -> SocketAddr {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

struct Proc(Child);

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn(args: &[&str], data_dir: &Path) -> Proc {
    Proc(
        bin()
            .arg("--data-dir")
            .arg(data_dir)
            .args(args)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    )
}

fn until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + timeout;
    while Instant::now() < end {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(50));
    }
    false
}

#[test]
fn process_cluster_survives_kill_primary() {
    let dir = tempfile::tempdir().unwrap();
    let (store, conf, app, fallback) = (free_addr(), free_addr(), free_addr(), free_addr());
    let (store, conf, app, fallback) = (store.to_string(), conf.to_string(), app.to_string(), fallback.to_string());
    let _s = spawn(&["store", "--listen", &store], dir.path());
    let _c = spawn(&["confsvc", "--listen", &conf], dir.path());
    let node = |role: &'static str, id: &'static str, listen: &str| {
        spawn(
            &[role, "--node-id", id, "--listen", listen, "--store", &store, "--confsvc", &conf, "--mode", "sync"],
            dir.path(),
        )
    };
    let empty = tempfile::tempdir().unwrap();
    let client = |args: &[&str]| {
        let mut full = vec!["kv-client", "--confsvc", conf.as_str()];
        full.extend_from_slice(args);
        run(&full, empty.path())
    };
    thread::sleep(Duration::from_millis(200));
    let mut primary = node("primary", "p1", &app);
    assert!(until(Duration::from_secs(10), || client(&["put", "k", "v1"]).status.success()));
    let _b = node("backup", "b1", &fallback);
    thread::sleep(Duration::from_millis(300));
    assert_eq!(client(&["put", "k", "v2"]).status.code(), Some(0));
    assert_eq!(client(&["put", "gone", "x"]).status.code(), Some(0));
    assert_eq!(client(&["delete", "gone"]).status.code(), Some(0));

    let o = run(&["kill-primary", "--confsvc", &conf], empty.path());
    assert_eq!(o.status.code(), Some(0));
    let status = primary.0.wait().unwrap();
    assert_eq!(status.code(), Some(137));

    let o = client(&["get", "k"]);
    assert_eq!(stdout(&o), "v2\n");
    assert_eq!(stdout(&client(&["get", "gone"])), "(not found)\n");
    assert_eq!(client(&["put", "after", "failover"]).status.code(), Some(0));
    // the store holds checkpoints from both primaries
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(names.iter().any(|n| n.ends_with(".core")), "{names:?}");
}
