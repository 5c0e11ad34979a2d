//! Filling a replica's missing trunk prefix from peers, and the per-branch
//! leader driver.
//!
//! A transfer asks one source at a time for trunk entries, moving on to the
//! next source when a request times out or the source has nothing more. After
//! each full pass over the sources without progress it backs off
//! exponentially. Sources are ordered: members of the configuration that
//! already holds the prefix first, then the rest of the group.

use std::collections::BTreeSet;

use crate::msg::{TransferReply, TransferRequest};
use crate::paxos::{BranchEngine, EngineOutput};
use crate::trunk::Trunk;
use crate::types::{BranchId, Configuration, ProcessId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferTimers {
    /// Entries per reply.
    pub chunk: usize,
    /// Ticks to wait for a reply before trying the next source.
    pub timeout: u64,
    pub max_backoff: u64,
}

impl Default for TransferTimers {
    fn default() -> Self {
        TransferTimers {
            chunk: 64,
            timeout: 5,
            max_backoff: 40,
        }
    }
}

/// Request sources in preference order, without `me` and without repeats.
pub fn transfer_sources(
    me: ProcessId,
    preferred: impl IntoIterator<Item = ProcessId>,
    old_config: &Configuration,
    group: &BTreeSet<ProcessId>,
) -> Vec<ProcessId> {
    let mut out: Vec<ProcessId> = Vec::new();
    for p in preferred
        .into_iter()
        .chain(old_config.members())
        .chain(group.iter().copied())
    {
        if p != me && !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Transfer {
    branch: BranchId,
    want_upto: u64,
    sources: Vec<ProcessId>,
    cursor: usize,
    outstanding: Option<(ProcessId, u64)>,
    passes_without_progress: u32,
    progressed_this_pass: bool,
    retry_at: u64,
}

impl Transfer {
    pub fn begin(branch: BranchId, sources: Vec<ProcessId>, want_upto: u64) -> Self {
        Transfer {
            branch,
            want_upto,
            sources,
            cursor: 0,
            outstanding: None,
            passes_without_progress: 0,
            progressed_this_pass: false,
            retry_at: 0,
        }
    }

    pub fn branch(&self) -> BranchId {
        self.branch
    }

    pub fn want_upto(&self) -> u64 {
        self.want_upto
    }

    pub fn is_done(&self, have_upto: u64) -> bool {
        have_upto >= self.want_upto
    }

    fn next_source(&mut self, now: u64, timers: &TransferTimers) {
        self.outstanding = None;
        self.cursor += 1;
        if self.cursor.is_multiple_of(self.sources.len().max(1)) {
            if self.progressed_this_pass {
                self.passes_without_progress = 0;
            } else {
                self.passes_without_progress += 1;
                let shift = self.passes_without_progress.min(16);
                self.retry_at = now + (timers.timeout << shift).min(timers.max_backoff);
            }
            self.progressed_this_pass = false;
        }
    }

    fn request(&mut self, me: ProcessId, have_upto: u64, now: u64) -> Option<(ProcessId, TransferRequest)> {
        if self.sources.is_empty() {
            return None;
        }
        let to = self.sources[self.cursor % self.sources.len()];
        self.outstanding = Some((to, now));
        Some((
            to,
            TransferRequest {
                requester: me,
                branch: self.branch,
                have_upto,
                want_upto: self.want_upto,
            },
        ))
    }

    /// Called every tick; returns a request to send, if one is due.
    pub fn poll(
        &mut self,
        me: ProcessId,
        have_upto: u64,
        now: u64,
        timers: &TransferTimers,
    ) -> Option<(ProcessId, TransferRequest)> {
        if self.is_done(have_upto) {
            return None;
        }
        if let Some((_, sent)) = self.outstanding {
            if now.saturating_sub(sent) < timers.timeout {
                return None;
            }
            self.next_source(now, timers);
        }
        if now < self.retry_at {
            return None;
        }
        self.request(me, have_upto, now)
    }

    /// Accounts for a reply; `have_upto` is the local trunk length after the
    /// entries were absorbed. May return an immediate follow-up request.
    pub fn on_reply(
        &mut self,
        me: ProcessId,
        from: ProcessId,
        reply: &TransferReply,
        have_upto: u64,
        now: u64,
        timers: &TransferTimers,
    ) -> Option<(ProcessId, TransferRequest)> {
        // the joiner does not know how long the trunk is; responders tell it
        self.want_upto = self.want_upto.max(reply.trunk_len);
        if self.outstanding.map(|(p, _)| p) != Some(from) {
            return None;
        }
        if !reply.entries.is_empty() {
            self.progressed_this_pass = true;
        }
        if self.is_done(have_upto) {
            self.outstanding = None;
            return None;
        }
        if reply.complete || reply.entries.is_empty() {
            self.next_source(now, timers);
            if now < self.retry_at {
                return None;
            }
        }
        self.request(me, have_upto, now)
    }
}

/// Answers a transfer request from the local trunk.
pub fn serve(trunk: &Trunk, req: &TransferRequest, chunk: usize) -> TransferReply {
    let entries = trunk.entries_from(req.have_upto, chunk);
    let end = entries.last().map(|(s, _)| s + 1).unwrap_or(req.have_upto);
    // a clipped prefix cannot be served from entries
    let entries = if req.have_upto < trunk.base() {
        Vec::new()
    } else {
        entries
    };
    TransferReply {
        branch: req.branch,
        complete: entries.is_empty() || end >= trunk.next(),
        entries,
        trunk_len: trunk.next(),
    }
}

/// Drives a branch's agreement stream from the configuration manager's
/// leader verdict. A leader that inherited phase 1 from the parent branch
/// (same ballot owner) goes straight to proposals; any other leader runs
/// PREPARE with a fresh ballot first, and with no leader nothing is proposed.
pub fn leader_takeover(
    engine: &mut BranchEngine,
    me: ProcessId,
    leader: Option<ProcessId>,
    now: u64,
) -> EngineOutput {
    engine.tick(now, leader == Some(me))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paxos::{EngineEvent, EngineTimers};
    use crate::types::{initial_branch_id, Ballot, Command, CommandId};

    fn p(n: u32) -> ProcessId {
        ProcessId(n)
    }

    fn bid() -> BranchId {
        BranchId::new(3, Ballot::new(0, p(1)), p(1))
    }

    #[test]
    fn sources_prefer_old_config() {
        let group: BTreeSet<ProcessId> = (1..=5).map(ProcessId).collect();
        let s = transfer_sources(p(4), [], &Configuration::of(&[1, 2, 3]), &group);
        assert_eq!(s, vec![p(1), p(2), p(3), p(5)]);
        let s = transfer_sources(p(4), [p(5)], &Configuration::of(&[1, 2, 3]), &group);
        assert_eq!(s[0], p(5));
    }

    #[test]
    fn timeout_rotates_and_backs_off() {
        let t = TransferTimers::default();
        let mut x = Transfer::begin(bid(), vec![p(1), p(2)], 5);
        assert_eq!(x.poll(p(4), 0, 0, &t).unwrap().0, p(1));
        assert!(x.poll(p(4), 0, 4, &t).is_none());
        assert_eq!(x.poll(p(4), 0, 5, &t).unwrap().0, p(2));
        // second timeout completes a fruitless pass: back off
        assert!(x.poll(p(4), 0, 10, &t).is_none());
        assert!(x.poll(p(4), 0, 19, &t).is_none());
        assert_eq!(x.poll(p(4), 0, 20, &t).unwrap().0, p(1));
        assert!(x.poll(p(4), 5, 100, &t).is_none());
    }

    #[test]
    fn serve_and_follow_up() {
        let c0 = Configuration::of(&[1, 2, 3]);
        let mut trunk = Trunk::new(&c0);
        for i in 1..5 {
            trunk.replay(i, Command::user(CommandId::new(1, i), "x"));
        }
        let t = TransferTimers {
            chunk: 2,
            ..TransferTimers::default()
        };
        let mut x = Transfer::begin(bid(), vec![p(1)], 3);
        let (_, req) = x.poll(p(4), 1, 0, &t).unwrap();
        let rep = serve(&trunk, &req, t.chunk);
        assert_eq!(rep.entries.len(), 2);
        assert!(!rep.complete);
        assert_eq!(rep.trunk_len, 5);
        // want grows to the advertised length; ask for the rest
        let (_, req) = x.on_reply(p(4), p(1), &rep, 3, 1, &t).unwrap();
        assert_eq!(x.want_upto(), 5);
        assert_eq!(req.have_upto, 3);
        let rep = serve(&trunk, &req, t.chunk);
        assert!(rep.complete);
        assert!(x.on_reply(p(4), p(1), &rep, 5, 2, &t).is_none());
        assert!(x.is_done(5));
    }

    #[test]
    fn takeover_prepares_only_without_inherited_phase1() {
        let c0 = Configuration::of(&[1, 2, 3]);
        let b0 = initial_branch_id(&c0);
        let x = BranchId::new(3, b0.bal, p(1));
        let cfg = Configuration::of(&[1, 2, 4]);
        let mut same = BranchEngine::start(p(1), x, Some(b0), cfg.clone(), x.bal, 4, EngineTimers::default()).unwrap();
        assert!(leader_takeover(&mut same, p(1), Some(p(1)), 1).is_empty());
        let mut other = BranchEngine::start(p(2), x, Some(b0), cfg, x.bal, 4, EngineTimers::default()).unwrap();
        let out = leader_takeover(&mut other, p(2), Some(p(2)), 1);
        assert!(out.events.iter().any(|e| matches!(
            e,
            EngineEvent::PrepareSent { ballot, .. } if *ballot == Ballot::new(1, p(2))
        )));
        assert!(leader_takeover(&mut other, p(2), None, 2).is_empty());
    }
}
