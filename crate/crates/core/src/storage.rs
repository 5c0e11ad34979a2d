//! Durable append-only log of trunk entries, branch decisions and acceptor
//! state, with prefix clipping into a snapshot.
//!
//! # Log file
//!
//! A sequence of frames, all integers little-endian:
//!
//! ```text
//! u32 payload length | u32 CRC-32 (IEEE) of payload | payload
//! ```
//!
//! Payload starts with a one-byte tag:
//!
//! | tag | record        | fields                                   |
//! |-----|---------------|------------------------------------------|
//! | 1   | TRUNK_APPEND  | slot u64, bid, command                   |
//! | 2   | DECISION      | bid, slot u64, command                   |
//! | 3   | CLIP          | upto u64                                 |
//! | 4   | BRANCH        | bid, parent (u8 flag + bid), config      |
//! | 5   | PROMISE       | bid, ballot                              |
//! | 6   | ACCEPT        | bid, slot u64, ballot, command           |
//!
//! `ballot` is `round u64, proposer u32`; `bid` is `slot u64, ballot,
//! initiator u32`; `config` is `count u32` followed by that many `u32` ids.
//! A command is a kind byte (0 NOOP, 1 USER, 2 RECON); USER continues with
//! `client u32, sequence u64, len u32, payload bytes`; RECON with
//! `parent (u8 flag + bid), bid, config`.
//!
//! Recovery reads frames until the first short or checksum-failing frame and
//! discards everything from there on.
//!
//! # Snapshot file
//!
//! ```text
//! b"SNAP" | u64 trunk length | u32 CRC-32 of body | body
//! ```
//!
//! where the body is `cur_branch bid, cur config, digest u64, applied count
//! u32, applied ids (client u32, sequence u64)...`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::state::AppliedState;
use crate::types::{Ballot, BranchId, Command, CommandId, Configuration, ProcessId};

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("storage I/O failure: {0}")]
    Io(#[from] io::Error),
    #[error("cannot clip to {upto}: only {watermark} entries are applied")]
    ClipBeyondWatermark { upto: u64, watermark: u64 },
    #[error("snapshot is corrupt")]
    CorruptSnapshot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DurableRecord {
    TrunkAppend {
        slot: u64,
        bid: BranchId,
        cmd: Command,
    },
    Decision {
        bid: BranchId,
        slot: u64,
        cmd: Command,
    },
    Clip {
        upto: u64,
    },
    Branch {
        bid: BranchId,
        parent: Option<BranchId>,
        config: Configuration,
    },
    Promise {
        bid: BranchId,
        ballot: Ballot,
    },
    Accept {
        bid: BranchId,
        slot: u64,
        ballot: Ballot,
        cmd: Command,
    },
}

impl DurableRecord {
    pub fn kind(&self) -> &'static str {
        match self {
            DurableRecord::TrunkAppend { .. } => "TRUNK_APPEND",
            DurableRecord::Decision { .. } => "DECISION",
            DurableRecord::Clip { .. } => "CLIP",
            DurableRecord::Branch { .. } => "BRANCH",
            DurableRecord::Promise { .. } => "PROMISE",
            DurableRecord::Accept { .. } => "ACCEPT",
        }
    }

    /// Position used by clipping; `None` for records that clipping never
    /// removes by slot.
    fn clip_key(&self, cur_branch: BranchId) -> Option<u64> {
        match self {
            DurableRecord::TrunkAppend { slot, .. }
            | DurableRecord::Decision { slot, .. }
            | DurableRecord::Accept { slot, .. } => Some(*slot),
            DurableRecord::Branch { bid, .. } if *bid != cur_branch => Some(bid.slot_num),
            DurableRecord::Clip { .. } => Some(0),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// codec

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn pid(&mut self, p: ProcessId) {
        self.u32(p.0);
    }
    fn ballot(&mut self, b: Ballot) {
        self.u64(b.round);
        self.pid(b.proposer);
    }
    fn bid(&mut self, b: BranchId) {
        self.u64(b.slot_num);
        self.ballot(b.bal);
        self.pid(b.initiator);
    }
    fn opt_bid(&mut self, b: Option<BranchId>) {
        match b {
            Some(b) => {
                self.u8(1);
                self.bid(b);
            }
            None => self.u8(0),
        }
    }
    fn config(&mut self, c: &Configuration) {
        self.u32(c.len() as u32);
        for m in c.members() {
            self.pid(m);
        }
    }
    fn cmd_id(&mut self, id: CommandId) {
        self.pid(id.client);
        self.u64(id.sequence);
    }
    fn cmd(&mut self, c: &Command) {
        match c {
            Command::Noop => self.u8(0),
            Command::User { id, payload } => {
                self.u8(1);
                self.cmd_id(*id);
                self.u32(payload.len() as u32);
                self.0.extend_from_slice(payload);
            }
            Command::Recon {
                parent,
                branch,
                config,
            } => {
                self.u8(2);
                self.opt_bid(*parent);
                self.bid(*branch);
                self.config(config);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.buf.len() < n {
            return None;
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Some(head)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn pid(&mut self) -> Option<ProcessId> {
        self.u32().map(ProcessId)
    }
    fn ballot(&mut self) -> Option<Ballot> {
        Some(Ballot::new(self.u64()?, self.pid()?))
    }
    fn bid(&mut self) -> Option<BranchId> {
        Some(BranchId::new(self.u64()?, self.ballot()?, self.pid()?))
    }
    fn opt_bid(&mut self) -> Option<Option<BranchId>> {
        match self.u8()? {
            0 => Some(None),
            1 => Some(Some(self.bid()?)),
            _ => None,
        }
    }
    fn config(&mut self) -> Option<Configuration> {
        let n = self.u32()?;
        let mut members = Vec::with_capacity(n.min(1024) as usize);
        for _ in 0..n {
            members.push(self.pid()?);
        }
        Configuration::new(members).ok()
    }
    fn cmd_id(&mut self) -> Option<CommandId> {
        Some(CommandId {
            client: self.pid()?,
            sequence: self.u64()?,
        })
    }
    fn cmd(&mut self) -> Option<Command> {
        match self.u8()? {
            0 => Some(Command::Noop),
            1 => {
                let id = self.cmd_id()?;
                let len = self.u32()? as usize;
                let payload = self.take(len)?.to_vec();
                Some(Command::User { id, payload })
            }
            2 => Some(Command::Recon {
                parent: self.opt_bid()?,
                branch: self.bid()?,
                config: self.config()?,
            }),
            _ => None,
        }
    }
}

pub fn encode_payload(rec: &DurableRecord) -> Vec<u8> {
    let mut w = Writer::default();
    match rec {
        DurableRecord::TrunkAppend { slot, bid, cmd } => {
            w.u8(1);
            w.u64(*slot);
            w.bid(*bid);
            w.cmd(cmd);
        }
        DurableRecord::Decision { bid, slot, cmd } => {
            w.u8(2);
            w.bid(*bid);
            w.u64(*slot);
            w.cmd(cmd);
        }
        DurableRecord::Clip { upto } => {
            w.u8(3);
            w.u64(*upto);
        }
        DurableRecord::Branch {
            bid,
            parent,
            config,
        } => {
            w.u8(4);
            w.bid(*bid);
            w.opt_bid(*parent);
            w.config(config);
        }
        DurableRecord::Promise { bid, ballot } => {
            w.u8(5);
            w.bid(*bid);
            w.ballot(*ballot);
        }
        DurableRecord::Accept {
            bid,
            slot,
            ballot,
            cmd,
        } => {
            w.u8(6);
            w.bid(*bid);
            w.u64(*slot);
            w.ballot(*ballot);
            w.cmd(cmd);
        }
    }
    w.0
}

pub fn decode_payload(buf: &[u8]) -> Option<DurableRecord> {
    let mut r = Reader { buf };
    let rec = match r.u8()? {
        1 => DurableRecord::TrunkAppend {
            slot: r.u64()?,
            bid: r.bid()?,
            cmd: r.cmd()?,
        },
        2 => DurableRecord::Decision {
            bid: r.bid()?,
            slot: r.u64()?,
            cmd: r.cmd()?,
        },
        3 => DurableRecord::Clip { upto: r.u64()? },
        4 => DurableRecord::Branch {
            bid: r.bid()?,
            parent: r.opt_bid()?,
            config: r.config()?,
        },
        5 => DurableRecord::Promise {
            bid: r.bid()?,
            ballot: r.ballot()?,
        },
        6 => DurableRecord::Accept {
            bid: r.bid()?,
            slot: r.u64()?,
            ballot: r.ballot()?,
            cmd: r.cmd()?,
        },
        _ => return None,
    };
    r.buf.is_empty().then_some(rec)
}

/// Frames one record: length, checksum, payload.
pub fn encode_frame(rec: &DurableRecord) -> Vec<u8> {
    let payload = encode_payload(rec);
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Decodes frames up to the first torn or corrupt one. Returns the records
/// and the byte length of the valid prefix.
pub fn decode_frames(bytes: &[u8]) -> (Vec<DurableRecord>, usize) {
    let mut records = Vec::new();
    let mut pos = 0;
    while bytes.len() - pos >= 8 {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        let Some(payload) = bytes.get(pos + 8..pos + 8 + len) else {
            break;
        };
        if crc32fast::hash(payload) != crc {
            break;
        }
        let Some(rec) = decode_payload(payload) else {
            break;
        };
        records.push(rec);
        pos += 8 + len;
    }
    (records, pos)
}

// ---------------------------------------------------------------------------
// snapshot

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub trunk_len: u64,
    pub cur_branch: BranchId,
    pub cur_config: Configuration,
    pub state: AppliedState,
}

impl Snapshot {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Writer::default();
        body.bid(self.cur_branch);
        body.config(&self.cur_config);
        body.u64(self.state.digest());
        body.u32(self.state.applied_count() as u32);
        for id in self.state.applied_ids() {
            body.cmd_id(*id);
        }
        let mut out = b"SNAP".to_vec();
        out.extend_from_slice(&self.trunk_len.to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&body.0).to_le_bytes());
        out.extend_from_slice(&body.0);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StorageError> {
        let bad = || StorageError::CorruptSnapshot;
        if bytes.len() < 16 || &bytes[..4] != b"SNAP" {
            return Err(bad());
        }
        let trunk_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let crc = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let body = &bytes[16..];
        if crc32fast::hash(body) != crc {
            return Err(bad());
        }
        let mut r = Reader { buf: body };
        let cur_branch = r.bid().ok_or_else(bad)?;
        let cur_config = r.config().ok_or_else(bad)?;
        let digest = r.u64().ok_or_else(bad)?;
        let n = r.u32().ok_or_else(bad)?;
        let mut applied = BTreeSet::new();
        for _ in 0..n {
            applied.insert(r.cmd_id().ok_or_else(bad)?);
        }
        Ok(Snapshot {
            trunk_len,
            cur_branch,
            cur_config,
            state: AppliedState::from_parts(trunk_len, digest, applied),
        })
    }
}

// ---------------------------------------------------------------------------
// backends

pub trait LogBackend: Send {
    fn append(&mut self, frame: &[u8]) -> io::Result<()>;
    fn load(&mut self) -> io::Result<Vec<u8>>;
    /// Atomically replaces the whole log.
    fn rewrite(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn store_snapshot(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn load_snapshot(&mut self) -> io::Result<Option<Vec<u8>>>;
}

/// In-memory backend. Survives a simulated crash because the simulator keeps
/// the backend while dropping the replica's volatile state.
#[derive(Debug, Default, Clone)]
pub struct MemBackend {
    pub log: Vec<u8>,
    pub snapshot: Option<Vec<u8>>,
}

impl LogBackend for MemBackend {
    fn append(&mut self, frame: &[u8]) -> io::Result<()> {
        self.log.extend_from_slice(frame);
        Ok(())
    }
    fn load(&mut self) -> io::Result<Vec<u8>> {
        Ok(self.log.clone())
    }
    fn rewrite(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.log = bytes.to_vec();
        Ok(())
    }
    fn store_snapshot(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.snapshot = Some(bytes.to_vec());
        Ok(())
    }
    fn load_snapshot(&mut self) -> io::Result<Option<Vec<u8>>> {
        Ok(self.snapshot.clone())
    }
}

/// One directory per replica holding `log` and `snapshot`.
#[derive(Debug)]
pub struct FileBackend {
    dir: PathBuf,
    file: File,
}

impl FileBackend {
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("log"))?;
        Ok(FileBackend { dir, file })
    }

    fn replace(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let tmp = self.dir.join(format!("{name}.tmp"));
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(tmp, self.dir.join(name))
    }
}

impl LogBackend for FileBackend {
    fn append(&mut self, frame: &[u8]) -> io::Result<()> {
        self.file.write_all(frame)?;
        self.file.sync_data()
    }
    fn load(&mut self) -> io::Result<Vec<u8>> {
        let mut buf = Vec::new();
        File::open(self.dir.join("log"))?.read_to_end(&mut buf)?;
        Ok(buf)
    }
    fn rewrite(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.replace("log", bytes)?;
        self.file = OpenOptions::new().append(true).open(self.dir.join("log"))?;
        Ok(())
    }
    fn store_snapshot(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.replace("snapshot", bytes)
    }
    fn load_snapshot(&mut self) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.dir.join("snapshot")) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }
}

// ---------------------------------------------------------------------------
// log

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovered {
    pub snapshot: Option<Snapshot>,
    pub records: Vec<DurableRecord>,
}

pub struct PersistentLog {
    backend: Box<dyn LogBackend>,
    records: usize,
}

impl std::fmt::Debug for PersistentLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PersistentLog")
            .field("records", &self.records)
            .finish()
    }
}

impl PersistentLog {
    pub fn new(backend: Box<dyn LogBackend>) -> Self {
        PersistentLog {
            backend,
            records: 0,
        }
    }

    pub fn in_memory() -> Self {
        PersistentLog::new(Box::new(MemBackend::default()))
    }

    /// Number of records currently in the log.
    pub fn len(&self) -> usize {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records == 0
    }

    pub fn append(&mut self, rec: &DurableRecord) -> Result<(), StorageError> {
        self.backend.append(&encode_frame(rec))?;
        self.records += 1;
        Ok(())
    }

    /// Reads the snapshot and every intact record; a torn or corrupt tail is
    /// truncated away.
    pub fn recover(&mut self) -> Result<Recovered, StorageError> {
        let bytes = self.backend.load()?;
        let (records, valid) = decode_frames(&bytes);
        if valid != bytes.len() {
            self.backend.rewrite(&bytes[..valid])?;
        }
        self.records = records.len();
        let snapshot = match self.backend.load_snapshot()? {
            Some(b) => Some(Snapshot::decode(&b)?),
            None => None,
        };
        Ok(Recovered { snapshot, records })
    }

    /// Smallest clip point that brings the log back under `limit` records,
    /// capped at the applied watermark.
    pub fn clip_point(
        &mut self,
        limit: usize,
        watermark: u64,
        cur_branch: BranchId,
    ) -> Result<u64, StorageError> {
        if self.records <= limit {
            return Ok(0);
        }
        let (records, _) = decode_frames(&self.backend.load()?);
        let mut keys: Vec<u64> = records
            .iter()
            .filter_map(|r| r.clip_key(cur_branch))
            .collect();
        keys.sort_unstable();
        let excess = records.len().saturating_sub(limit);
        let upto = match excess {
            0 => 0,
            n if n <= keys.len() => keys[n - 1] + 1,
            _ => u64::MAX,
        };
        Ok(upto.min(watermark))
    }

    /// Folds every entry below `upto` into `snapshot` and drops the records
    /// it makes redundant. Returns the number of records removed.
    pub fn clip(
        &mut self,
        upto: u64,
        watermark: u64,
        snapshot: &Snapshot,
    ) -> Result<usize, StorageError> {
        if upto > watermark {
            return Err(StorageError::ClipBeyondWatermark { upto, watermark });
        }
        if upto == 0 {
            return Ok(0);
        }
        let (records, _) = decode_frames(&self.backend.load()?);
        let before = records.len();
        let cur = snapshot.cur_branch;
        let mut dead: BTreeSet<BranchId> = BTreeSet::new();
        for r in &records {
            if let DurableRecord::Branch { bid, .. } = r {
                if *bid != cur && bid.slot_num < upto {
                    dead.insert(*bid);
                }
            }
        }
        // newest promise per live branch
        let mut promises: BTreeMap<BranchId, Ballot> = BTreeMap::new();
        for r in &records {
            if let DurableRecord::Promise { bid, ballot } = r {
                let e = promises.entry(*bid).or_insert(*ballot);
                *e = (*e).max(*ballot);
            }
        }
        let mut kept = vec![DurableRecord::Clip { upto }];
        for r in records {
            let keep = match &r {
                DurableRecord::TrunkAppend { slot, .. }
                | DurableRecord::Decision { slot, .. }
                | DurableRecord::Accept { slot, .. } => *slot >= upto,
                DurableRecord::Branch { bid, .. } => !dead.contains(bid),
                DurableRecord::Promise { bid, ballot } => {
                    !dead.contains(bid) && promises.get(bid) == Some(ballot) && {
                        promises.remove(bid);
                        true
                    }
                }
                DurableRecord::Clip { .. } => false,
            };
            if keep {
                kept.push(r);
            }
        }
        // snapshot first: a crash between the two writes leaves a snapshot
        // newer than the log, which recovery tolerates
        self.backend.store_snapshot(&snapshot.encode())?;
        let bytes: Vec<u8> = kept.iter().flat_map(encode_frame).collect();
        self.backend.rewrite(&bytes)?;
        self.records = kept.len();
        Ok(before + 1 - kept.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bid0() -> BranchId {
        BranchId::new(0, Ballot::new(0, ProcessId(1)), ProcessId(1))
    }

    fn user(n: u64) -> Command {
        Command::user(CommandId::new(1, n), vec![n as u8; 3])
    }

    fn trunk(slot: u64) -> DurableRecord {
        DurableRecord::TrunkAppend {
            slot,
            bid: bid0(),
            cmd: user(slot),
        }
    }

    fn snap(len: u64) -> Snapshot {
        Snapshot {
            trunk_len: len,
            cur_branch: bid0(),
            cur_config: Configuration::of(&[1, 2, 3]),
            state: AppliedState::from_parts(len, 42, BTreeSet::new()),
        }
    }

    #[test]
    fn append_survives_crash() {
        let mut backend = MemBackend::default();
        {
            let mut log = PersistentLog::new(Box::new(backend.clone()));
            log.append(&trunk(5)).unwrap();
            // the backend is the durable medium; take its bytes
            let mut b = log.backend;
            backend.log = b.load().unwrap();
        }
        let mut log = PersistentLog::new(Box::new(backend));
        let rec = log.recover().unwrap();
        assert_eq!(rec.records, vec![trunk(5)]);
    }

    #[test]
    fn corrupt_checksum_discards_suffix() {
        let mut bytes = Vec::new();
        for s in 0..4 {
            bytes.extend(encode_frame(&trunk(s)));
        }
        let second = encode_frame(&trunk(0)).len();
        bytes[second + 9] ^= 0xff; // inside the second payload
        let mut log = PersistentLog::new(Box::new(MemBackend {
            log: bytes,
            snapshot: None,
        }));
        let rec = log.recover().unwrap();
        assert_eq!(rec.records, vec![trunk(0)]);
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn clip_removes_prefix_trunk_records() {
        let mut log = PersistentLog::in_memory();
        for s in 0..20 {
            log.append(&trunk(s)).unwrap();
        }
        log.clip(10, 20, &snap(10)).unwrap();
        let rec = log.recover().unwrap();
        assert!(rec.records.iter().all(|r| match r {
            DurableRecord::TrunkAppend { slot, .. } => *slot >= 10,
            _ => true,
        }));
        assert_eq!(rec.snapshot.unwrap().trunk_len, 10);
    }

    #[test]
    fn clip_point_follows_limit() {
        let mut log = PersistentLog::in_memory();
        for s in 0..150 {
            log.append(&trunk(s)).unwrap();
        }
        let upto = log.clip_point(100, 150, bid0()).unwrap();
        assert_eq!(upto, 50);
        log.clip(upto, 150, &snap(upto)).unwrap();
        // 100 trunk records plus the CLIP marker
        let rec = log.recover().unwrap();
        let trunk_records = rec
            .records
            .iter()
            .filter(|r| matches!(r, DurableRecord::TrunkAppend { .. }))
            .count();
        assert_eq!(trunk_records, 100);
    }

    #[test]
    fn clip_zero_and_beyond_watermark() {
        let mut log = PersistentLog::in_memory();
        log.append(&trunk(0)).unwrap();
        assert_eq!(log.clip(0, 1, &snap(0)).unwrap(), 0);
        assert_eq!(log.len(), 1);
        assert!(matches!(
            log.clip(5, 1, &snap(5)),
            Err(StorageError::ClipBeyondWatermark { upto: 5, watermark: 1 })
        ));
    }

    #[test]
    fn clip_keeps_live_branch_state() {
        let live = BranchId::new(12, Ballot::new(1, ProcessId(1)), ProcessId(1));
        let dead = BranchId::new(4, Ballot::new(1, ProcessId(2)), ProcessId(2));
        let mut log = PersistentLog::in_memory();
        let cfg = Configuration::of(&[1, 2, 3]);
        for bid in [bid0(), dead, live] {
            log.append(&DurableRecord::Branch {
                bid,
                parent: None,
                config: cfg.clone(),
            })
            .unwrap();
        }
        for r in 1..4 {
            log.append(&DurableRecord::Promise {
                bid: live,
                ballot: Ballot::new(r, ProcessId(1)),
            })
            .unwrap();
        }
        log.clip(10, 10, &snap(10)).unwrap();
        let rec = log.recover().unwrap();
        let branches: Vec<BranchId> = rec
            .records
            .iter()
            .filter_map(|r| match r {
                DurableRecord::Branch { bid, .. } => Some(*bid),
                _ => None,
            })
            .collect();
        assert_eq!(branches, vec![bid0(), live]);
        let promises: Vec<&DurableRecord> = rec
            .records
            .iter()
            .filter(|r| matches!(r, DurableRecord::Promise { .. }))
            .collect();
        assert_eq!(promises.len(), 1);
    }

    #[test]
    fn snapshot_roundtrip_and_corruption() {
        let mut applied = BTreeSet::new();
        applied.insert(CommandId::new(3, 9));
        let s = Snapshot {
            trunk_len: 7,
            cur_branch: bid0(),
            cur_config: Configuration::of(&[1, 4]),
            state: AppliedState::from_parts(7, 99, applied),
        };
        let mut bytes = s.encode();
        assert_eq!(Snapshot::decode(&bytes).unwrap(), s);
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        assert!(Snapshot::decode(&bytes).is_err());
    }

    #[test]
    fn file_backend_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut log = PersistentLog::new(Box::new(FileBackend::open(dir.path()).unwrap()));
            for s in 0..5 {
                log.append(&trunk(s)).unwrap();
            }
            log.clip(2, 5, &snap(2)).unwrap();
            log.append(&trunk(5)).unwrap();
        }
        let mut log = PersistentLog::new(Box::new(FileBackend::open(dir.path()).unwrap()));
        let rec = log.recover().unwrap();
        assert_eq!(rec.snapshot.unwrap().trunk_len, 2);
        assert_eq!(rec.records.first(), Some(&DurableRecord::Clip { upto: 2 }));
        assert_eq!(rec.records.last(), Some(&trunk(5)));
        assert_eq!(rec.records.len(), 5);
    }

    fn arb_record() -> impl Strategy<Value = DurableRecord> {
        let bid = (0u64..50, 0u64..4, 1u32..5, 1u32..5)
            .prop_map(|(s, r, p, i)| BranchId::new(s, Ballot::new(r, ProcessId(p)), ProcessId(i)));
        let cmd = prop_oneof![
            Just(Command::Noop),
            (1u32..4, 0u64..100, proptest::collection::vec(any::<u8>(), 0..8))
                .prop_map(|(c, n, p)| Command::user(CommandId::new(c, n), p)),
            (bid.clone(), proptest::collection::btree_set(1u32..8, 1..4)).prop_map(|(b, m)| {
                Command::Recon {
                    parent: Some(b),
                    branch: b,
                    config: Configuration::new(m.into_iter().map(ProcessId)).unwrap(),
                }
            }),
        ];
        (0u8..6, bid, 0u64..100, cmd).prop_map(|(k, bid, slot, cmd)| match k {
            0 => DurableRecord::TrunkAppend { slot, bid, cmd },
            1 => DurableRecord::Decision { bid, slot, cmd },
            2 => DurableRecord::Clip { upto: slot },
            3 => DurableRecord::Branch {
                bid,
                parent: Some(bid),
                config: Configuration::of(&[1, 2]),
            },
            4 => DurableRecord::Promise { bid, ballot: bid.bal },
            _ => DurableRecord::Accept {
                bid,
                slot,
                ballot: bid.bal,
                cmd,
            },
        })
    }

    proptest! {
        /// Cutting the byte stream anywhere yields exactly the records whose
        /// frames were fully written, in order.
        #[test]
        fn torn_tail_recovers_prefix(recs in proptest::collection::vec(arb_record(), 0..12), cut in any::<prop::sample::Index>()) {
            let frames: Vec<Vec<u8>> = recs.iter().map(encode_frame).collect();
            let bytes: Vec<u8> = frames.concat();
            let cut = cut.index(bytes.len() + 1);
            let (got, valid) = decode_frames(&bytes[..cut]);
            let mut whole = 0;
            let mut acc = 0;
            for f in &frames {
                if acc + f.len() <= cut { acc += f.len(); whole += 1; } else { break; }
            }
            prop_assert_eq!(valid, acc);
            prop_assert_eq!(&got[..], &recs[..whole]);
        }
    }
}
