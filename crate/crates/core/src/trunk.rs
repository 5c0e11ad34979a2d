//! Total order construction: grows the trunk by walking the chain of valid
//! branches, switching to a child when its spawning RECON is merged and
//! discarding every branch that lost.
//!
//! Entries come from the current branch's local engine or, when that engine
//! has not (yet) learned a slot, from trunk entries fetched by state
//! transfer. Either source yields the same command by agreement.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::branch::{BranchStatus, BranchTree};
use crate::state::{AppliedState, ApplyOutcome};
use crate::storage::Snapshot;
use crate::types::{initial_branch_id, BranchId, Command, CommandId, Configuration};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NotificationKind {
    Speculative,
    Validate,
    Invalidate,
}

impl fmt::Display for NotificationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NotificationKind::Speculative => "speculative",
            NotificationKind::Validate => "validate",
            NotificationKind::Invalidate => "invalidate",
        })
    }
}

/// Client-facing signal about one decided occurrence of a user command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Notification {
    pub kind: NotificationKind,
    pub cmd_id: CommandId,
    pub bid: BranchId,
    pub slot: u64,
}

/// Receives notifications at the replica that produced them.
pub trait NotificationSink: Send {
    fn notify(&mut self, n: &Notification);
}

/// Discards notifications.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl NotificationSink for NullSink {
    fn notify(&mut self, _: &Notification) {}
}

/// Collects notifications in memory.
#[derive(Debug, Default, Clone)]
pub struct VecSink(pub std::sync::Arc<std::sync::Mutex<Vec<Notification>>>);

impl NotificationSink for VecSink {
    fn notify(&mut self, n: &Notification) {
        self.0.lock().expect("sink lock").push(*n);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntrySource {
    Engine,
    Transfer,
}

impl EntrySource {
    pub fn as_str(self) -> &'static str {
        match self {
            EntrySource::Engine => "engine",
            EntrySource::Transfer => "xfer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Appended {
    pub slot: u64,
    pub cmd: Command,
    /// Branch that was current when the slot was appended.
    pub bid: BranchId,
    pub source: EntrySource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Discarded {
    pub bid: BranchId,
    /// Decided user occurrences that never reached the trunk.
    pub invalidated: Vec<(u64, CommandId)>,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct AdvanceOutcome {
    pub appended: Vec<Appended>,
    pub notifications: Vec<Notification>,
    pub discarded: Vec<Discarded>,
    /// `(branch, parent, status)`.
    pub status_changes: Vec<(BranchId, BranchId, BranchStatus)>,
    /// `(from, to, slot)` for every switch of the current branch.
    pub merges: Vec<(BranchId, BranchId, u64)>,
}

impl AdvanceOutcome {
    pub fn is_empty(&self) -> bool {
        self.appended.is_empty() && self.discarded.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Trunk {
    /// Slots below `base` live only in the snapshot.
    base: u64,
    /// Branch and configuration in effect at `base`.
    base_branch: BranchId,
    base_config: Configuration,
    entries: Vec<Command>,
    cur_branch: BranchId,
    cur_config: Configuration,
    ids: BTreeSet<CommandId>,
    state: AppliedState,
}

impl Trunk {
    /// A trunk holding only the initial RECON for `c0`.
    pub fn new(c0: &Configuration) -> Self {
        let b0 = initial_branch_id(c0);
        Trunk {
            base: 0,
            base_branch: b0,
            base_config: c0.clone(),
            entries: vec![Command::Recon {
                parent: None,
                branch: b0,
                config: c0.clone(),
            }],
            cur_branch: b0,
            cur_config: c0.clone(),
            ids: BTreeSet::new(),
            state: AppliedState::default(),
        }
    }

    pub fn from_snapshot(s: &Snapshot) -> Self {
        Trunk {
            base: s.trunk_len,
            base_branch: s.cur_branch,
            base_config: s.cur_config.clone(),
            entries: Vec::new(),
            cur_branch: s.cur_branch,
            cur_config: s.cur_config.clone(),
            ids: s.state.applied_ids().clone(),
            state: s.state.clone(),
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        let at = self.recon_before(self.state.watermark());
        Snapshot {
            trunk_len: self.state.watermark(),
            cur_branch: at.0,
            cur_config: at.1,
            state: self.state.clone(),
        }
    }

    /// Next global slot to fill.
    pub fn next(&self) -> u64 {
        self.base + self.entries.len() as u64
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn cur_branch(&self) -> BranchId {
        self.cur_branch
    }

    pub fn cur_config(&self) -> &Configuration {
        &self.cur_config
    }

    /// Trunk slot of the RECON that installed the current configuration.
    pub fn epoch(&self) -> u64 {
        self.cur_branch.slot_num
    }

    pub fn get(&self, slot: u64) -> Option<&Command> {
        slot.checked_sub(self.base)
            .and_then(|i| self.entries.get(i as usize))
    }

    pub fn entries_from(&self, slot: u64, limit: usize) -> Vec<(u64, Command)> {
        let start = slot.max(self.base);
        (start..self.next())
            .take(limit)
            .map(|s| (s, self.get(s).expect("in range").clone()))
            .collect()
    }

    pub fn contains_id(&self, id: CommandId) -> bool {
        self.ids.contains(&id)
    }

    pub fn state(&self) -> &AppliedState {
        &self.state
    }

    /// Branch and configuration in effect once the first `slot` entries are
    /// in place.
    fn recon_before(&self, slot: u64) -> (BranchId, Configuration) {
        if slot >= self.next() {
            return (self.cur_branch, self.cur_config.clone());
        }
        (self.base..slot)
            .rev()
            .find_map(|s| match self.get(s) {
                Some(Command::Recon { branch, config, .. }) if branch.slot_num == s => {
                    Some((*branch, config.clone()))
                }
                _ => None,
            })
            .unwrap_or_else(|| (self.base_branch, self.base_config.clone()))
    }

    /// Appends an entry restored from durable storage. Keeps the current
    /// branch in step with RECONs; emits nothing.
    pub fn replay(&mut self, slot: u64, cmd: Command) {
        debug_assert_eq!(slot, self.next());
        self.push(slot, cmd);
    }

    fn push(&mut self, slot: u64, cmd: Command) {
        if let Command::Recon { branch, config, .. } = &cmd {
            if branch.slot_num == slot {
                self.cur_branch = *branch;
                self.cur_config = config.clone();
            }
        }
        if let Some(id) = cmd.user_id() {
            self.ids.insert(id);
        }
        self.entries.push(cmd);
    }

    /// Applies entries `[watermark, upto)` to the state machine. Each
    /// command id takes effect at most once.
    pub fn apply_prefix(&mut self, upto: u64) -> Vec<(u64, ApplyOutcome)> {
        let upto = upto.min(self.next());
        let mut out = Vec::new();
        while self.state.watermark() < upto {
            let slot = self.state.watermark();
            let cmd = self.get(slot).expect("applied entries are retained").clone();
            out.push((slot, self.state.apply_next(&cmd)));
        }
        out
    }

    /// Drops in-memory entries below `slot` (already in a snapshot).
    pub fn forget_below(&mut self, slot: u64) {
        let slot = slot.min(self.state.watermark());
        if slot <= self.base {
            return;
        }
        let at = self.recon_before(slot);
        let drop = (slot - self.base) as usize;
        self.entries.drain(..drop);
        self.base = slot;
        self.base_branch = at.0;
        self.base_config = at.1;
    }
}

/// Invalidations for a discarded branch: every decided user occurrence
/// above `merged_upto` (all of them when `None`).
fn invalidations(
    tree: &BranchTree,
    bid: BranchId,
    merged_upto: Option<u64>,
) -> Vec<(u64, CommandId)> {
    let Some(rec) = tree.get(&bid) else {
        return Vec::new();
    };
    rec.engine
        .decided()
        .filter(|(s, _)| merged_upto.is_none_or(|m| *s > m))
        .filter_map(|(s, c)| c.user_id().map(|id| (s, id)))
        .collect()
}

fn discard_into(
    tree: &mut BranchTree,
    bid: BranchId,
    merged_upto: Option<u64>,
    out: &mut AdvanceOutcome,
) {
    let invalidated = invalidations(tree, bid, merged_upto);
    if tree.discard(bid).is_none() {
        return;
    }
    for (slot, id) in &invalidated {
        out.notifications.push(Notification {
            kind: NotificationKind::Invalidate,
            cmd_id: *id,
            bid,
            slot: *slot,
        });
    }
    out.discarded.push(Discarded { bid, invalidated });
}

/// Extends the trunk as far as the current branch (or transferred entries)
/// allow.
pub fn advance(
    trunk: &mut Trunk,
    tree: &mut BranchTree,
    transferred: &mut BTreeMap<u64, Command>,
) -> AdvanceOutcome {
    let mut out = AdvanceOutcome::default();
    loop {
        let next = trunk.next();
        let cur = trunk.cur_branch;
        let from_engine = tree
            .get(&cur)
            .and_then(|r| r.engine.decided_at(next))
            .cloned();
        let (cmd, source) = match from_engine {
            Some(c) => (c, EntrySource::Engine),
            None => match transferred.get(&next) {
                Some(c) => (c.clone(), EntrySource::Transfer),
                None => break,
            },
        };
        transferred.remove(&next);

        out.status_changes.extend(
            tree.resolve_children(cur, next, &cmd)
                .into_iter()
                .map(|(b, s)| (b, cur, s)),
        );
        let mut losers = tree.children_at(cur, next);
        if let Command::Recon { branch: x, .. } = &cmd {
            if x.slot_num == next {
                losers.retain(|b| b != x);
                // the old branch and everything hanging off it except the
                // winner's subtree is dead
                let keep: BTreeSet<BranchId> = if tree.contains(x) {
                    tree.subtree(*x).into_iter().collect()
                } else {
                    BTreeSet::new()
                };
                let doomed: Vec<BranchId> = if tree.contains(&cur) {
                    tree.subtree(cur)
                } else {
                    Vec::new()
                };
                for b in doomed {
                    if keep.contains(&b) || losers.contains(&b) {
                        continue;
                    }
                    let merged = (b == cur).then_some(next);
                    discard_into(tree, b, merged, &mut out);
                }
                out.merges.push((cur, *x, next));
            }
        }
        for b in losers {
            for d in tree.subtree(b) {
                discard_into(tree, d, None, &mut out);
            }
        }
        if let Some(id) = cmd.user_id() {
            if !trunk.contains_id(id) {
                out.notifications.push(Notification {
                    kind: NotificationKind::Validate,
                    cmd_id: id,
                    bid: cur,
                    slot: next,
                });
            }
        }
        trunk.push(next, cmd.clone());
        out.appended.push(Appended {
            slot: next,
            cmd,
            bid: cur,
            source,
        });
    }
    // stale transferred entries
    let next = trunk.next();
    transferred.retain(|s, _| *s >= next);
    out
}
