//! Restarting from the file backend, including a torn final write.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;

use speclog::storage::{FileBackend, PersistentLog};
use speclog::{init_replica, Command, CommandId, Configuration, ProcessId, Replica, ReplicaOptions};

fn open(dir: &std::path::Path) -> PersistentLog {
    PersistentLog::new(Box::new(FileBackend::open(dir).unwrap()))
}

fn solo(dir: &std::path::Path, opts: ReplicaOptions) -> Replica {
    let c0 = Configuration::of(&[1]);
    let group: BTreeSet<ProcessId> = [ProcessId(1)].into();
    init_replica(ProcessId(1), &c0, &group, opts, open(dir)).unwrap()
}

fn drive(r: &mut Replica, n: u64, from_tick: u64) -> u64 {
    let mut t = from_tick;
    for i in 0..n {
        t += 1;
        r.on_tick(t);
        let _ = r.submit_user(Command::user(CommandId::new(1, from_tick + i + 1), "x"), t);
        r.drain_outbox();
    }
    for _ in 0..5 {
        t += 1;
        r.on_tick(t);
    }
    t
}

fn restart(dir: &std::path::Path, opts: ReplicaOptions, now: u64) -> Replica {
    let c0 = Configuration::of(&[1]);
    let group: BTreeSet<ProcessId> = [ProcessId(1)].into();
    Replica::recover(ProcessId(1), &c0, &group, opts, open(dir), now).unwrap()
}

#[test]
fn torn_tail_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let opts = ReplicaOptions {
        clip_limit: None,
        ..Default::default()
    };
    let mut r = solo(dir.path(), opts.clone());
    let now = drive(&mut r, 20, 0);
    let len = r.trunk().next();
    let digest = r.trunk().state().digest();
    assert_eq!(len, 21);
    drop(r.crash());

    // half a frame: a length prefix promising more bytes than follow
    let mut f = OpenOptions::new().append(true).open(dir.path().join("log")).unwrap();
    f.write_all(&[200, 0, 0, 0, 1, 2, 3]).unwrap();
    drop(f);

    let mut r = restart(dir.path(), opts.clone(), now);
    assert_eq!(r.trunk().next(), len);
    assert_eq!(r.trunk().state().digest(), digest);
    // and keeps going from there
    let now = drive(&mut r, 5, now);
    assert_eq!(r.trunk().next(), len + 5);
    drop(r.crash());
    assert_eq!(restart(dir.path(), opts, now).trunk().next(), len + 5);
}

#[test]
fn recovery_from_snapshot_after_clipping() {
    let dir = tempfile::tempdir().unwrap();
    let opts = ReplicaOptions {
        clip_limit: Some(16),
        ..Default::default()
    };
    let mut r = solo(dir.path(), opts.clone());
    let now = drive(&mut r, 60, 0);
    let (len, digest, applied) = (r.trunk().next(), r.trunk().state().digest(), r.trunk().state().applied_count());
    assert!(r.log_len() < 60, "log never clipped: {} records", r.log_len());
    drop(r.crash());
    assert!(dir.path().join("snapshot").exists());
    let r = restart(dir.path(), opts, now);
    assert_eq!(r.trunk().next(), len);
    assert_eq!(r.trunk().state().digest(), digest);
    assert_eq!(r.trunk().state().applied_count(), applied);
}
