//! Multi-decree Paxos scoped to a single branch.
//!
//! Phase 1 is run once per ballot and shared by every slot; phase 2 runs per
//! slot. The leader is also an acceptor and accepts its own proposals
//! locally, so a proposal is decided once `quorum - 1` remote ACCEPTED
//! replies arrive. Decisions are disseminated with DECIDE.
//!
//! The engine is a pure state machine: every entry point takes the current
//! tick and returns the messages to send plus a list of [`EngineEvent`]s that
//! the owning replica persists and traces.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Ballot, BranchId, Command, Configuration, ProcessId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("next slot {next_slot} does not follow branch slot {branch_slot}")]
    BadSlot { branch_slot: u64, next_slot: u64 },
    #[error("branch {0} was discarded")]
    BranchDead(BranchId),
    #[error("protocol violation in branch {bid}: {reason}")]
    ProtocolViolation { bid: BranchId, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PaxosMsg {
    Prepare {
        ballot: Ballot,
        from_slot: u64,
    },
    Promise {
        ballot: Ballot,
        accepted: Vec<(u64, Ballot, Command)>,
        decided: Vec<(u64, Command)>,
        low_water: u64,
    },
    Propose {
        ballot: Ballot,
        slot: u64,
        cmd: Command,
    },
    Accepted {
        ballot: Ballot,
        slot: u64,
    },
    Decide {
        slot: u64,
        cmd: Command,
    },
}

impl PaxosMsg {
    pub fn kind(&self) -> &'static str {
        match self {
            PaxosMsg::Prepare { .. } => "PREPARE",
            PaxosMsg::Promise { .. } => "PROMISE",
            PaxosMsg::Propose { .. } => "PROPOSE",
            PaxosMsg::Accepted { .. } => "ACCEPTED",
            PaxosMsg::Decide { .. } => "DECIDE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    /// Every member of the branch configuration except the local process.
    Others,
    To(ProcessId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Send {
    pub dest: Dest,
    pub msg: PaxosMsg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposeKind {
    /// A new command assigned to a fresh slot.
    Fresh,
    /// A value adopted (or a NOOP filler) after phase 1.
    Repropose,
    /// Retransmission of an outstanding proposal.
    Retransmit,
}

impl ProposeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProposeKind::Fresh => "propose",
            ProposeKind::Repropose => "repropose",
            ProposeKind::Retransmit => "retx",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineEvent {
    PrepareSent { ballot: Ballot, from_slot: u64 },
    Phase1Done { ballot: Ballot },
    /// Leader gave up on its ballot after proposals stopped making progress.
    Preempted { ballot: Ballot },
    Proposed {
        slot: u64,
        ballot: Ballot,
        cmd: Command,
        kind: ProposeKind,
    },
    /// The local acceptor raised its promise; must be durable before replying.
    Promised { ballot: Ballot },
    /// The local acceptor accepted a value; must be durable before replying.
    AcceptedValue {
        slot: u64,
        ballot: Ballot,
        cmd: Command,
    },
    Decided { slot: u64, cmd: Command },
}

#[derive(Debug, Default)]
pub struct EngineOutput {
    pub sends: Vec<Send>,
    pub events: Vec<EngineEvent>,
}

impl EngineOutput {
    pub fn decided_slots(&self) -> Vec<u64> {
        self.events
            .iter()
            .filter_map(|e| match e {
                EngineEvent::Decided { slot, .. } => Some(*slot),
                _ => None,
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.sends.is_empty() && self.events.is_empty()
    }

    fn send(&mut self, dest: Dest, msg: PaxosMsg) {
        self.sends.push(Send { dest, msg });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineTimers {
    pub retransmit: u64,
    pub prepare_retry: u64,
    /// Ticks without progress on outstanding proposals before the leader
    /// assumes its ballot was superseded and re-runs phase 1.
    pub preempt: u64,
}

impl Default for EngineTimers {
    fn default() -> Self {
        EngineTimers {
            retransmit: 8,
            prepare_retry: 10,
            preempt: 80,
        }
    }
}

/// Acceptor view of one slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptorSlotState {
    pub promised: Ballot,
    pub accepted_bal: Option<Ballot>,
    pub accepted_val: Option<Command>,
}

#[derive(Debug, Clone)]
struct Proposal {
    ballot: Ballot,
    cmd: Command,
    acks: BTreeSet<ProcessId>,
    sent_at: u64,
}

#[derive(Debug, Clone)]
struct PrepareRound {
    ballot: Ballot,
    promises: BTreeSet<ProcessId>,
    adopted: BTreeMap<u64, (Ballot, Command)>,
    decided: BTreeMap<u64, Command>,
    low_water: u64,
    sent_at: u64,
}

#[derive(Debug, Clone)]
pub struct BranchEngine {
    me: ProcessId,
    bid: BranchId,
    parent: Option<BranchId>,
    config: Configuration,
    bal: Ballot,
    phase1_complete: bool,
    next_slot: u64,
    accepted: BTreeMap<u64, (Ballot, Command)>,
    decided: BTreeMap<u64, Command>,
    first_undecided: u64,
    low_water: u64,
    proposals: BTreeMap<u64, Proposal>,
    buffered: VecDeque<Command>,
    preparing: Option<PrepareRound>,
    last_progress: u64,
    dead: bool,
    timers: EngineTimers,
}

impl BranchEngine {
    /// Starts the agreement stream for `bid`. A process that owns
    /// `init_ballot` inherits phase 1 from the parent branch.
    pub fn start(
        me: ProcessId,
        bid: BranchId,
        parent: Option<BranchId>,
        config: Configuration,
        init_ballot: Ballot,
        next_slot: u64,
        timers: EngineTimers,
    ) -> Result<Self, EngineError> {
        if next_slot != bid.first_slot() {
            return Err(EngineError::BadSlot {
                branch_slot: bid.slot_num,
                next_slot,
            });
        }
        Ok(BranchEngine {
            me,
            bid,
            parent,
            config,
            bal: init_ballot,
            phase1_complete: me == init_ballot.proposer,
            next_slot,
            accepted: BTreeMap::new(),
            decided: BTreeMap::new(),
            first_undecided: next_slot,
            low_water: next_slot,
            proposals: BTreeMap::new(),
            buffered: VecDeque::new(),
            preparing: None,
            last_progress: 0,
            dead: false,
            timers,
        })
    }

    /// Rebuilds an engine from durable acceptor state. Phase 1 is never
    /// considered complete after a restart.
    #[allow(clippy::too_many_arguments)]
    pub fn restore(
        me: ProcessId,
        bid: BranchId,
        parent: Option<BranchId>,
        config: Configuration,
        promised: Ballot,
        accepted: BTreeMap<u64, (Ballot, Command)>,
        decided: BTreeMap<u64, Command>,
        low_water: u64,
        timers: EngineTimers,
    ) -> Self {
        let low_water = low_water.max(bid.first_slot());
        let mut engine = BranchEngine {
            me,
            bid,
            parent,
            config,
            bal: promised,
            phase1_complete: false,
            next_slot: low_water,
            accepted: BTreeMap::new(),
            decided: BTreeMap::new(),
            first_undecided: low_water,
            low_water,
            proposals: BTreeMap::new(),
            buffered: VecDeque::new(),
            preparing: None,
            last_progress: 0,
            dead: false,
            timers,
        };
        for (slot, v) in accepted.into_iter().filter(|(s, _)| *s >= low_water) {
            engine.next_slot = engine.next_slot.max(slot + 1);
            engine.accepted.insert(slot, v);
        }
        for (slot, cmd) in decided.into_iter().filter(|(s, _)| *s >= low_water) {
            engine.next_slot = engine.next_slot.max(slot + 1);
            engine.decided.insert(slot, cmd);
        }
        engine.advance_first_undecided();
        engine
    }

    pub fn bid(&self) -> BranchId {
        self.bid
    }

    pub fn parent(&self) -> Option<BranchId> {
        self.parent
    }

    pub fn config(&self) -> &Configuration {
        &self.config
    }

    pub fn ballot(&self) -> Ballot {
        self.bal
    }

    pub fn phase1_complete(&self) -> bool {
        self.phase1_complete
    }

    pub fn is_preparing(&self) -> bool {
        self.preparing.is_some()
    }

    pub fn next_slot(&self) -> u64 {
        self.next_slot
    }

    pub fn is_dead(&self) -> bool {
        self.dead
    }

    /// First slot whose decision is not locally known.
    pub fn first_undecided(&self) -> u64 {
        self.first_undecided
    }

    pub fn low_water(&self) -> u64 {
        self.low_water
    }

    /// Length of the contiguous decided prefix (`cmd_log`).
    pub fn log_len(&self) -> u64 {
        self.first_undecided - self.bid.first_slot()
    }

    /// `cmd_log[idx]`, i.e. the decision at global slot `slot_num + 1 + idx`.
    pub fn log_entry(&self, idx: u64) -> Option<&Command> {
        self.decided_at(self.bid.first_slot() + idx)
    }

    pub fn decided_at(&self, slot: u64) -> Option<&Command> {
        self.decided.get(&slot)
    }

    pub fn decided(&self) -> impl Iterator<Item = (u64, &Command)> {
        self.decided.iter().map(|(s, c)| (*s, c))
    }

    pub fn decided_from(&self, slot: u64, limit: usize) -> Vec<(u64, Command)> {
        self.decided
            .range(slot..)
            .take(limit)
            .map(|(s, c)| (*s, c.clone()))
            .collect()
    }

    pub fn max_decided(&self) -> Option<u64> {
        self.decided.keys().next_back().copied()
    }

    pub fn acceptor_slot(&self, slot: u64) -> AcceptorSlotState {
        let accepted = self.accepted.get(&slot);
        AcceptorSlotState {
            promised: self.bal,
            accepted_bal: accepted.map(|(b, _)| *b),
            accepted_val: accepted.map(|(_, c)| c.clone()),
        }
    }

    pub fn has_pending_work(&self) -> bool {
        !self.proposals.is_empty() || !self.buffered.is_empty() || self.preparing.is_some()
    }

    /// Slots above the decided prefix this acceptor has seen activity for.
    pub fn has_gap(&self) -> bool {
        self.accepted.range(self.first_undecided..).next().is_some()
            || self.decided.range(self.first_undecided..).next().is_some()
    }

    pub fn terminate(&mut self) {
        self.dead = true;
        self.proposals.clear();
        self.buffered.clear();
        self.preparing = None;
    }

    /// Drops acceptor and decision state below `slot`; those slots are
    /// already folded into the trunk.
    pub fn prune_below(&mut self, slot: u64) {
        if slot <= self.low_water {
            return;
        }
        self.low_water = slot;
        self.accepted = self.accepted.split_off(&slot);
        self.decided = self.decided.split_off(&slot);
        self.proposals = self.proposals.split_off(&slot);
        self.next_slot = self.next_slot.max(slot);
        self.first_undecided = self.first_undecided.max(slot);
        self.advance_first_undecided();
    }

    /// Orders `cmd` in this branch. The caller must be the branch leader.
    pub fn propose(&mut self, cmd: Command, now: u64) -> Result<EngineOutput, EngineError> {
        if self.dead {
            return Err(EngineError::BranchDead(self.bid));
        }
        let mut out = EngineOutput::default();
        if self.phase1_complete {
            let slot = self.next_slot;
            self.next_slot += 1;
            self.send_proposal(slot, cmd, ProposeKind::Fresh, now, &mut out);
        } else {
            self.buffered.push_back(cmd);
            if self.preparing.is_none() {
                self.start_prepare(now, &mut out);
            }
        }
        Ok(out)
    }

    pub fn handle(
        &mut self,
        from: ProcessId,
        msg: PaxosMsg,
        now: u64,
    ) -> Result<EngineOutput, EngineError> {
        let mut out = EngineOutput::default();
        if self.dead {
            return Ok(out);
        }
        match msg {
            PaxosMsg::Prepare { ballot, from_slot } => {
                let retransmitted = ballot == self.bal && ballot.proposer == from;
                if ballot > self.bal || retransmitted {
                    if ballot > self.bal {
                        self.raise_ballot(ballot, &mut out);
                    }
                    let from_slot = from_slot.max(self.low_water);
                    let accepted = self
                        .accepted
                        .range(from_slot..)
                        .map(|(s, (b, c))| (*s, *b, c.clone()))
                        .collect();
                    let decided = self.decided_from(from_slot, usize::MAX);
                    out.send(
                        Dest::To(from),
                        PaxosMsg::Promise {
                            ballot,
                            accepted,
                            decided,
                            low_water: self.low_water,
                        },
                    );
                }
            }
            PaxosMsg::Promise {
                ballot,
                accepted,
                decided,
                low_water,
            } => {
                let quorum = self.config.quorum_size();
                let Some(round) = self.preparing.as_mut().filter(|r| r.ballot == ballot) else {
                    return Ok(out);
                };
                round.promises.insert(from);
                round.low_water = round.low_water.max(low_water);
                for (slot, b, cmd) in accepted {
                    match round.adopted.get(&slot) {
                        Some((have, _)) if *have >= b => {}
                        _ => {
                            round.adopted.insert(slot, (b, cmd));
                        }
                    }
                }
                for (slot, cmd) in decided {
                    round.decided.entry(slot).or_insert(cmd);
                }
                if round.promises.len() >= quorum {
                    self.complete_phase1(now, &mut out)?;
                }
            }
            PaxosMsg::Propose { ballot, slot, cmd } => {
                self.check_slot(slot)?;
                if ballot < self.bal {
                    return Ok(out);
                }
                if ballot > self.bal {
                    self.raise_ballot(ballot, &mut out);
                }
                self.next_slot = self.next_slot.max(slot + 1);
                if slot < self.low_water {
                    return Ok(out);
                }
                self.accepted.insert(slot, (ballot, cmd.clone()));
                out.events.push(EngineEvent::AcceptedValue { slot, ballot, cmd });
                out.send(Dest::To(from), PaxosMsg::Accepted { ballot, slot });
            }
            PaxosMsg::Accepted { ballot, slot } => {
                let quorum = self.config.quorum_size();
                let Some(p) = self.proposals.get_mut(&slot).filter(|p| p.ballot == ballot) else {
                    return Ok(out);
                };
                p.acks.insert(from);
                self.last_progress = now;
                if p.acks.len() >= quorum {
                    let p = self.proposals.remove(&slot).expect("present");
                    self.record_decision(slot, p.cmd.clone(), now, &mut out)?;
                    out.send(Dest::Others, PaxosMsg::Decide { slot, cmd: p.cmd });
                }
            }
            PaxosMsg::Decide { slot, cmd } => {
                self.check_slot(slot)?;
                self.record_decision(slot, cmd, now, &mut out)?;
            }
        }
        Ok(out)
    }

    /// Periodic driver. `is_leader` is the configuration manager's verdict
    /// for this branch at the local process.
    pub fn tick(&mut self, now: u64, is_leader: bool) -> EngineOutput {
        let mut out = EngineOutput::default();
        if self.dead {
            return out;
        }
        if !is_leader {
            // deposed: whatever was accepted will be adopted by the next
            // leader's phase 1, including ours if leadership comes back
            self.preparing = None;
            self.phase1_complete = false;
            self.proposals.clear();
            self.buffered.clear();
            return out;
        }
        if !self.phase1_complete {
            match &self.preparing {
                None => self.start_prepare(now, &mut out),
                Some(r) if now.saturating_sub(r.sent_at) >= self.timers.prepare_retry => {
                    self.start_prepare(now, &mut out)
                }
                Some(_) => {}
            }
            return out;
        }
        if !self.proposals.is_empty()
            && now.saturating_sub(self.last_progress) >= self.timers.preempt
        {
            out.events.push(EngineEvent::Preempted { ballot: self.bal });
            self.phase1_complete = false;
            self.start_prepare(now, &mut out);
            return out;
        }
        let members: Vec<ProcessId> = self.config.members().collect();
        for (slot, p) in self.proposals.iter_mut() {
            if now.saturating_sub(p.sent_at) < self.timers.retransmit {
                continue;
            }
            p.sent_at = now;
            out.events.push(EngineEvent::Proposed {
                slot: *slot,
                ballot: p.ballot,
                cmd: p.cmd.clone(),
                kind: ProposeKind::Retransmit,
            });
            for m in members.iter().filter(|m| !p.acks.contains(m)) {
                out.send(
                    Dest::To(*m),
                    PaxosMsg::Propose {
                        ballot: p.ballot,
                        slot: *slot,
                        cmd: p.cmd.clone(),
                    },
                );
            }
        }
        out
    }

    /// Installs a decision learned outside the normal message flow (decision
    /// sync replies).
    pub fn learn(&mut self, slot: u64, cmd: Command, now: u64) -> Result<EngineOutput, EngineError> {
        let mut out = EngineOutput::default();
        if self.dead || slot < self.bid.first_slot() {
            return Ok(out);
        }
        self.record_decision(slot, cmd, now, &mut out)?;
        Ok(out)
    }

    fn check_slot(&self, slot: u64) -> Result<(), EngineError> {
        if slot < self.bid.first_slot() {
            return Err(EngineError::ProtocolViolation {
                bid: self.bid,
                reason: format!("slot {slot} precedes the branch root"),
            });
        }
        Ok(())
    }

    fn raise_ballot(&mut self, ballot: Ballot, out: &mut EngineOutput) {
        self.bal = ballot;
        out.events.push(EngineEvent::Promised { ballot });
        if ballot.proposer != self.me {
            self.phase1_complete = false;
            self.preparing = None;
            self.proposals.clear();
        }
    }

    fn start_prepare(&mut self, now: u64, out: &mut EngineOutput) {
        let ballot = self.bal.next_for(self.me);
        self.bal = ballot;
        self.phase1_complete = false;
        self.proposals.clear();
        out.events.push(EngineEvent::Promised { ballot });
        let from_slot = self.first_undecided;
        let round = PrepareRound {
            ballot,
            promises: BTreeSet::from([self.me]),
            adopted: self.accepted.range(from_slot..).map(|(s, v)| (*s, v.clone())).collect(),
            decided: self
                .decided
                .range(from_slot..)
                .map(|(s, c)| (*s, c.clone()))
                .collect(),
            low_water: self.low_water,
            sent_at: now,
        };
        self.preparing = Some(round);
        out.events.push(EngineEvent::PrepareSent { ballot, from_slot });
        out.send(Dest::Others, PaxosMsg::Prepare { ballot, from_slot });
        if self.config.quorum_size() <= 1 {
            // a singleton configuration is its own quorum
            let _ = self.complete_phase1(now, out);
        }
    }

    fn complete_phase1(&mut self, now: u64, out: &mut EngineOutput) -> Result<(), EngineError> {
        let round = self.preparing.take().expect("phase 1 in progress");
        self.phase1_complete = true;
        self.last_progress = now;
        out.events.push(EngineEvent::Phase1Done {
            ballot: round.ballot,
        });
        for (slot, cmd) in round.decided {
            if slot >= self.low_water {
                self.record_decision(slot, cmd, now, out)?;
            }
        }
        let start = self.first_undecided.max(round.low_water).max(self.low_water);
        let top = round
            .adopted
            .keys()
            .next_back()
            .map(|s| s + 1)
            .unwrap_or(0)
            .max(self.next_slot)
            .max(start);
        for slot in start..top {
            if self.decided.contains_key(&slot) {
                continue;
            }
            let cmd = round
                .adopted
                .get(&slot)
                .map(|(_, c)| c.clone())
                .unwrap_or(Command::Noop);
            self.send_proposal(slot, cmd, ProposeKind::Repropose, now, out);
        }
        self.next_slot = top;
        while let Some(cmd) = self.buffered.pop_front() {
            let slot = self.next_slot;
            self.next_slot += 1;
            self.send_proposal(slot, cmd, ProposeKind::Fresh, now, out);
        }
        Ok(())
    }

    fn send_proposal(
        &mut self,
        slot: u64,
        cmd: Command,
        kind: ProposeKind,
        now: u64,
        out: &mut EngineOutput,
    ) {
        let ballot = self.bal;
        self.accepted.insert(slot, (ballot, cmd.clone()));
        out.events.push(EngineEvent::AcceptedValue {
            slot,
            ballot,
            cmd: cmd.clone(),
        });
        out.events.push(EngineEvent::Proposed {
            slot,
            ballot,
            cmd: cmd.clone(),
            kind,
        });
        if self.proposals.is_empty() {
            self.last_progress = now;
        }
        if self.config.quorum_size() <= 1 {
            let _ = self.record_decision(slot, cmd.clone(), now, out);
            out.send(Dest::Others, PaxosMsg::Decide { slot, cmd });
            return;
        }
        out.send(
            Dest::Others,
            PaxosMsg::Propose {
                ballot,
                slot,
                cmd: cmd.clone(),
            },
        );
        self.proposals.insert(
            slot,
            Proposal {
                ballot,
                cmd,
                acks: BTreeSet::from([self.me]),
                sent_at: now,
            },
        );
    }

    fn record_decision(
        &mut self,
        slot: u64,
        cmd: Command,
        now: u64,
        out: &mut EngineOutput,
    ) -> Result<(), EngineError> {
        if slot < self.low_water {
            return Ok(());
        }
        if let Some(existing) = self.decided.get(&slot) {
            if *existing != cmd {
                return Err(EngineError::ProtocolViolation {
                    bid: self.bid,
                    reason: format!("slot {slot} decided as {existing} and {cmd}"),
                });
            }
            return Ok(());
        }
        self.decided.insert(slot, cmd.clone());
        self.proposals.remove(&slot);
        self.next_slot = self.next_slot.max(slot + 1);
        self.last_progress = now;
        self.advance_first_undecided();
        out.events.push(EngineEvent::Decided { slot, cmd });
        Ok(())
    }

    fn advance_first_undecided(&mut self) {
        while self.decided.contains_key(&self.first_undecided) {
            self.first_undecided += 1;
        }
    }
}
