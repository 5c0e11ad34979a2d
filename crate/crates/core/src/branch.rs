//! The tree of live branches kept by one replica.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::paxos::BranchEngine;
use crate::types::{BranchId, Command};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchStatus {
    Speculative,
    Valid,
    Invalid,
}

impl fmt::Display for BranchStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchStatus::Speculative => "SPECULATIVE",
            BranchStatus::Valid => "VALID",
            BranchStatus::Invalid => "INVALID",
        })
    }
}

/// Status of a branch spawned at `slot` of its parent, given the command the
/// parent decided there.
pub fn status_for(bid: BranchId, decided: &Command) -> BranchStatus {
    match decided {
        Command::Recon { branch, .. } if *branch == bid => BranchStatus::Valid,
        _ => BranchStatus::Invalid,
    }
}

#[derive(Debug, Clone)]
pub struct BranchRecord {
    pub engine: BranchEngine,
    pub parent: Option<BranchId>,
    pub status: BranchStatus,
}

#[derive(Debug, Clone, Default)]
pub struct BranchTree {
    branches: BTreeMap<BranchId, BranchRecord>,
    tombstones: BTreeSet<BranchId>,
}

impl BranchTree {
    pub fn get(&self, bid: &BranchId) -> Option<&BranchRecord> {
        self.branches.get(bid)
    }

    pub fn get_mut(&mut self, bid: &BranchId) -> Option<&mut BranchRecord> {
        self.branches.get_mut(bid)
    }

    pub fn contains(&self, bid: &BranchId) -> bool {
        self.branches.contains_key(bid)
    }

    pub fn is_tombstoned(&self, bid: &BranchId) -> bool {
        self.tombstones.contains(bid)
    }

    pub fn insert(&mut self, rec: BranchRecord) {
        self.branches.insert(rec.engine.bid(), rec);
    }

    pub fn ids(&self) -> Vec<BranchId> {
        self.branches.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BranchId, &BranchRecord)> {
        self.branches.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&BranchId, &mut BranchRecord)> {
        self.branches.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    /// Live branches whose parent is `parent` and that are rooted at `slot`.
    pub fn children_at(&self, parent: BranchId, slot: u64) -> Vec<BranchId> {
        self.branches
            .iter()
            .filter(|(bid, r)| r.parent == Some(parent) && bid.slot_num == slot)
            .map(|(bid, _)| *bid)
            .collect()
    }

    /// `root` and all of its live descendants, parents before children.
    pub fn subtree(&self, root: BranchId) -> Vec<BranchId> {
        let mut out = vec![root];
        let mut i = 0;
        while i < out.len() {
            let p = out[i];
            out.extend(
                self.branches
                    .iter()
                    .filter(|(_, r)| r.parent == Some(p))
                    .map(|(bid, _)| *bid),
            );
            i += 1;
        }
        out
    }

    /// Removes a branch, terminates its engine and remembers its id so a
    /// late JOIN cannot resurrect it.
    pub fn discard(&mut self, bid: BranchId) -> Option<BranchRecord> {
        self.tombstones.insert(bid);
        self.branches.remove(&bid).map(|mut r| {
            r.engine.terminate();
            r
        })
    }

    /// Forgets tombstones rooted below `slot`; the trunk check in `on_join`
    /// already rejects those.
    pub fn prune_tombstones(&mut self, slot: u64) {
        self.tombstones.retain(|b| b.slot_num >= slot);
    }

    /// Sets the status of still-speculative children of `parent` at `slot`
    /// now that `decided` is known there. Returns the transitions.
    pub fn resolve_children(
        &mut self,
        parent: BranchId,
        slot: u64,
        decided: &Command,
    ) -> Vec<(BranchId, BranchStatus)> {
        let mut changed = Vec::new();
        for (bid, r) in self.branches.iter_mut() {
            if r.parent == Some(parent)
                && bid.slot_num == slot
                && r.status == BranchStatus::Speculative
            {
                r.status = status_for(*bid, decided);
                changed.push((*bid, r.status));
            }
        }
        changed
    }
}
