//! One replica: the set of live branches, message routing, user and
//! reconfiguration submission, JOIN handling, trunk maintenance, durability
//! and the periodic duties of the configuration manager.
//!
//! A replica is a deterministic event handler. The harness calls
//! [`Replica::handle`] for every delivered message and [`Replica::on_tick`]
//! once per tick, then drains the outbox and the trace buffer.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::branch::{status_for, BranchRecord, BranchStatus, BranchTree};
use crate::config::{
    evaluate_policy, select_leader, ConfigError, FailureDetector, GroupView, ManualPolicy,
    PolicyStats, ReconPolicy, ViewRecord,
};
use crate::msg::{Envelope, NetMsg, TransferReply, TransferRequest};
use crate::paxos::{BranchEngine, Dest, EngineEvent, EngineOutput, EngineTimers, PaxosMsg};
use crate::state::ApplyOutcome;
use crate::storage::{DurableRecord, PersistentLog, StorageError};
use crate::trace::TraceRecord;
use crate::transfer::{leader_takeover, serve, transfer_sources, Transfer, TransferTimers};
use crate::trunk::{advance, Notification, NotificationKind, NotificationSink, NullSink, Trunk};
use crate::types::{initial_branch_id, BranchId, Command, Configuration, ProcessId};

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaOptions {
    pub engine: EngineTimers,
    pub transfer: TransferTimers,
    pub heartbeat_period: u64,
    /// Heartbeat periods of silence before a peer is suspected.
    pub suspect_after: u64,
    pub gossip_period: u64,
    pub policy_period: u64,
    pub rejoin_period: u64,
    /// How often non-leaders ask the branch leader for decisions they miss.
    pub sync_period: u64,
    /// Ticks without trunk growth before catching up from a peer that
    /// advertises a longer trunk.
    pub stall_ticks: u64,
    /// Log records kept before clipping; `None` disables clipping.
    pub clip_limit: Option<usize>,
    /// Persist acceptor promises and accepted values before replying.
    pub durable_acceptor: bool,
}

impl Default for ReplicaOptions {
    fn default() -> Self {
        ReplicaOptions {
            engine: EngineTimers::default(),
            transfer: TransferTimers::default(),
            heartbeat_period: 2,
            suspect_after: 3,
            gossip_period: 4,
            policy_period: 10,
            rejoin_period: 2,
            sync_period: 6,
            stall_ticks: 10,
            clip_limit: Some(1024),
            durable_acceptor: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum ReplicaError {
    #[error("{pid} is not a member of {config}")]
    NotAMember { pid: ProcessId, config: Configuration },
    #[error("{0} leads no live branch")]
    NotLeader(ProcessId),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, Clone)]
struct JoinState {
    parent: BranchId,
    config: Configuration,
    parent_config: Configuration,
    acked: BTreeSet<ProcessId>,
}

pub struct Replica {
    me: ProcessId,
    group: BTreeSet<ProcessId>,
    opts: ReplicaOptions,
    now: u64,
    tree: BranchTree,
    trunk: Trunk,
    xfer_buf: BTreeMap<u64, Command>,
    transfers: BTreeMap<BranchId, Transfer>,
    fd: FailureDetector,
    suspected: BTreeSet<ProcessId>,
    view: ViewRecord,
    policy: Box<dyn ReconPolicy>,
    log: PersistentLog,
    clip_threshold: usize,
    storage_failure: Option<String>,
    sink: Box<dyn NotificationSink>,
    joins: BTreeMap<BranchId, JoinState>,
    queued_recons: Vec<(BranchId, Configuration)>,
    peer_trunk: BTreeMap<ProcessId, u64>,
    trunk_seen: (u64, u64),
    catching_up: BTreeSet<BranchId>,
    outbox: Vec<Envelope>,
    trace: Vec<TraceRecord>,
    announcements: Vec<ViewRecord>,
}

impl std::fmt::Debug for Replica {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Replica")
            .field("me", &self.me)
            .field("trunk", &self.trunk.next())
            .field("cur_branch", &self.trunk.cur_branch())
            .field("branches", &self.tree.ids())
            .finish()
    }
}

/// Creates a cohort member of `c0`.
pub fn init_replica(
    pid: ProcessId,
    c0: &Configuration,
    group: &BTreeSet<ProcessId>,
    opts: ReplicaOptions,
    log: PersistentLog,
) -> Result<Replica, ReplicaError> {
    if !c0.contains(pid) {
        return Err(ReplicaError::NotAMember {
            pid,
            config: c0.clone(),
        });
    }
    let mut r = Replica::blank(pid, c0, group, opts, log, 0);
    let b0 = initial_branch_id(c0);
    let engine = BranchEngine::start(pid, b0, None, c0.clone(), b0.bal, b0.first_slot(), r.opts.engine)
        .expect("root branch starts at slot 1");
    r.persist(DurableRecord::TrunkAppend {
        slot: 0,
        bid: b0,
        cmd: r.trunk.get(0).expect("initial entry").clone(),
    });
    r.persist(DurableRecord::Branch {
        bid: b0,
        parent: None,
        config: c0.clone(),
    });
    r.tree.insert(BranchRecord {
        engine,
        parent: None,
        status: BranchStatus::Valid,
    });
    r.trunk.apply_prefix(r.trunk.next());
    Ok(r)
}

/// Creates an idle group member: it orders nothing until a JOIN makes it a
/// member of some branch, but serves transfers and tracks the view.
pub fn init_idle(
    pid: ProcessId,
    c0: &Configuration,
    group: &BTreeSet<ProcessId>,
    opts: ReplicaOptions,
    log: PersistentLog,
) -> Replica {
    let mut r = Replica::blank(pid, c0, group, opts, log, 0);
    r.trunk.apply_prefix(r.trunk.next());
    r
}

impl Replica {
    fn blank(
        me: ProcessId,
        c0: &Configuration,
        group: &BTreeSet<ProcessId>,
        opts: ReplicaOptions,
        log: PersistentLog,
        now: u64,
    ) -> Self {
        let peers: Vec<ProcessId> = group.iter().copied().filter(|p| *p != me).collect();
        let fd = FailureDetector::new(peers, opts.heartbeat_period, opts.suspect_after, now);
        let clip_threshold = opts.clip_limit.unwrap_or(usize::MAX);
        Replica {
            me,
            group: group.clone(),
            now,
            tree: BranchTree::default(),
            trunk: Trunk::new(c0),
            xfer_buf: BTreeMap::new(),
            transfers: BTreeMap::new(),
            fd,
            suspected: BTreeSet::new(),
            view: ViewRecord {
                epoch: 0,
                cohort: c0.clone(),
                leader: c0.min_member(),
            },
            policy: Box::new(ManualPolicy),
            log,
            clip_threshold,
            storage_failure: None,
            sink: Box::new(NullSink),
            joins: BTreeMap::new(),
            queued_recons: Vec::new(),
            peer_trunk: BTreeMap::new(),
            trunk_seen: (0, now),
            catching_up: BTreeSet::new(),
            outbox: Vec::new(),
            trace: Vec::new(),
            announcements: Vec::new(),
            opts,
        }
    }

    /// Rebuilds a replica from its durable log after a crash. Volatile state
    /// (timers, transfers, suspicion, phase 1) starts afresh.
    pub fn recover(
        pid: ProcessId,
        c0: &Configuration,
        group: &BTreeSet<ProcessId>,
        opts: ReplicaOptions,
        mut log: PersistentLog,
        now: u64,
    ) -> Result<Replica, StorageError> {
        let rec = log.recover()?;
        let mut r = Replica::blank(pid, c0, group, opts, log, now);
        if let Some(s) = &rec.snapshot {
            r.trunk = Trunk::from_snapshot(s);
        }

        let mut branches: Vec<(BranchId, Option<BranchId>, Configuration)> = Vec::new();
        let mut promised: BTreeMap<BranchId, crate::types::Ballot> = BTreeMap::new();
        let mut accepted: BTreeMap<BranchId, BTreeMap<u64, (crate::types::Ballot, Command)>> =
            BTreeMap::new();
        let mut decided: BTreeMap<BranchId, BTreeMap<u64, Command>> = BTreeMap::new();
        for record in rec.records {
            match record {
                DurableRecord::TrunkAppend { slot, cmd, .. } => {
                    if slot == r.trunk.next() {
                        r.trunk.replay(slot, cmd);
                    }
                }
                DurableRecord::Branch { bid, parent, config } => {
                    branches.push((bid, parent, config));
                }
                DurableRecord::Promise { bid, ballot } => {
                    let e = promised.entry(bid).or_insert(ballot);
                    *e = (*e).max(ballot);
                }
                DurableRecord::Accept {
                    bid,
                    slot,
                    ballot,
                    cmd,
                } => {
                    let slots = accepted.entry(bid).or_default();
                    if slots.get(&slot).is_none_or(|(b, _)| *b <= ballot) {
                        slots.insert(slot, (ballot, cmd));
                    }
                }
                DurableRecord::Decision { bid, slot, cmd } => {
                    decided.entry(bid).or_default().insert(slot, cmd);
                }
                DurableRecord::Clip { .. } => {}
            }
        }
        r.trunk.apply_prefix(r.trunk.next());

        // live: the current branch and branches hanging off live branches
        // above the trunk
        branches.sort_by_key(|(bid, _, _)| *bid);
        let next = r.trunk.next();
        let cur = r.trunk.cur_branch();
        let mut live: BTreeSet<BranchId> = BTreeSet::new();
        for (bid, parent, config) in &branches {
            let alive = *bid == cur
                || (bid.slot_num >= next && parent.is_some_and(|p| live.contains(&p)));
            if !alive || !config.contains(pid) || live.contains(bid) {
                continue;
            }
            live.insert(*bid);
            let low_water = if *bid == cur { next } else { bid.first_slot() };
            let engine = BranchEngine::restore(
                pid,
                *bid,
                *parent,
                config.clone(),
                promised.get(bid).copied().unwrap_or(bid.bal),
                accepted.remove(bid).unwrap_or_default(),
                decided.remove(bid).unwrap_or_default(),
                low_water,
                r.opts.engine,
            );
            r.tree.insert(BranchRecord {
                engine,
                parent: *parent,
                status: BranchStatus::Speculative,
            });
            r.catching_up.insert(*bid);
        }
        for bid in r.tree.ids() {
            let status = r.initial_status(bid);
            if let Some(rec) = r.tree.get_mut(&bid) {
                rec.status = status;
            }
        }
        r.trace.push(
            TraceRecord::new(now, Some(pid), "recover")
                .with("trunk", r.trunk.next())
                .with("digest", format!("{:016x}", r.trunk.state().digest()))
                .with("branches", r.tree.len()),
        );
        r.advance_trunk();
        Ok(r)
    }

    /// Hands back the durable log; everything else is lost.
    pub fn crash(self) -> PersistentLog {
        self.log
    }

    pub fn set_policy(&mut self, policy: Box<dyn ReconPolicy>) {
        self.policy = policy;
    }

    pub fn set_sink(&mut self, sink: Box<dyn NotificationSink>) {
        self.sink = sink;
    }

    pub fn pid(&self) -> ProcessId {
        self.me
    }

    pub fn trunk(&self) -> &Trunk {
        &self.trunk
    }

    pub fn branches(&self) -> &BranchTree {
        &self.tree
    }

    pub fn view(&self) -> &ViewRecord {
        &self.view
    }

    pub fn suspected(&self) -> &BTreeSet<ProcessId> {
        &self.suspected
    }

    pub fn log_len(&self) -> usize {
        self.log.len()
    }

    /// Set once a durable write failed; the harness treats the replica as
    /// crashed.
    pub fn storage_failure(&self) -> Option<&str> {
        self.storage_failure.as_deref()
    }

    /// Member of the configuration the trunk currently runs under.
    pub fn is_active(&self) -> bool {
        self.trunk.cur_config().contains(self.me)
    }

    /// Nothing outstanding: no unfinished proposals, JOINs, transfers or
    /// queued reconfigurations.
    pub fn is_idle(&self) -> bool {
        self.joins.is_empty()
            && self.transfers.is_empty()
            && self.queued_recons.is_empty()
            && self.tree.iter().all(|(_, r)| {
                r.status == BranchStatus::Invalid || !r.engine.has_pending_work()
            })
    }

    pub fn drain_outbox(&mut self) -> Vec<Envelope> {
        std::mem::take(&mut self.outbox)
    }

    pub fn drain_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    pub fn drain_announcements(&mut self) -> Vec<ViewRecord> {
        std::mem::take(&mut self.announcements)
    }

    /// Leader of a configuration from the local failure detector's view.
    pub fn leader_of(&self, config: &Configuration) -> Option<ProcessId> {
        select_leader(config, &self.suspected).ok()
    }

    fn leads(&self, bid: &BranchId) -> bool {
        self.tree.get(bid).is_some_and(|r| {
            !r.engine.is_dead()
                && r.status != BranchStatus::Invalid
                && self.leader_of(r.engine.config()) == Some(self.me)
        })
    }

    fn led_branches(&self) -> Vec<BranchId> {
        self.tree.ids().into_iter().filter(|b| self.leads(b)).collect()
    }

    // -- plumbing ----------------------------------------------------------

    fn rec(&self, kind: &str) -> TraceRecord {
        TraceRecord::new(self.now, Some(self.me), kind)
    }

    fn emit(&mut self, r: TraceRecord) {
        self.trace.push(r);
    }

    fn send(&mut self, to: ProcessId, msg: NetMsg) {
        if to != self.me {
            self.outbox.push(Envelope {
                from: self.me,
                to,
                msg,
            });
        }
    }

    fn persist(&mut self, rec: DurableRecord) {
        if self.storage_failure.is_some() {
            return;
        }
        if let Err(e) = self.log.append(&rec) {
            self.storage_failure = Some(e.to_string());
        }
    }

    fn notify(&mut self, n: Notification) {
        self.sink.notify(&n);
        let r = self
            .rec(&n.kind.to_string())
            .with("cmd", n.cmd_id)
            .with("bid", n.bid)
            .with("slot", n.slot);
        self.emit(r);
    }

    fn initial_status(&self, bid: BranchId) -> BranchStatus {
        if bid == self.trunk.cur_branch() {
            return BranchStatus::Valid;
        }
        let parent = self.tree.get(&bid).and_then(|r| r.parent);
        let decided = parent
            .and_then(|p| self.tree.get(&p))
            .and_then(|p| p.engine.decided_at(bid.slot_num))
            .or_else(|| self.trunk.get(bid.slot_num));
        match decided {
            Some(cmd) => status_for(bid, cmd),
            None => BranchStatus::Speculative,
        }
    }

    /// Persists, traces and sends what an engine produced, then lets the
    /// trunk catch up with any new decisions.
    fn absorb(&mut self, bid: BranchId, out: EngineOutput) {
        let mut decided = false;
        for ev in out.events {
            match ev {
                EngineEvent::PrepareSent { ballot, from_slot } => {
                    let r = self
                        .rec("prepare")
                        .with("bid", bid)
                        .with("ballot", ballot)
                        .with("from", from_slot);
                    self.emit(r);
                }
                EngineEvent::Phase1Done { ballot } => {
                    let r = self.rec("p1done").with("bid", bid).with("ballot", ballot);
                    self.emit(r);
                }
                EngineEvent::Preempted { ballot } => {
                    let r = self.rec("preempt").with("bid", bid).with("ballot", ballot);
                    self.emit(r);
                }
                EngineEvent::Proposed {
                    slot,
                    ballot,
                    cmd,
                    kind,
                } => {
                    let r = self
                        .rec(kind.as_str())
                        .with("bid", bid)
                        .with("slot", slot)
                        .with("ballot", ballot)
                        .with("cmd", cmd.token());
                    self.emit(r);
                }
                EngineEvent::Promised { ballot } => {
                    if self.opts.durable_acceptor {
                        self.persist(DurableRecord::Promise { bid, ballot });
                    }
                }
                EngineEvent::AcceptedValue { slot, ballot, cmd } => {
                    if self.opts.durable_acceptor {
                        self.persist(DurableRecord::Accept {
                            bid,
                            slot,
                            ballot,
                            cmd,
                        });
                    }
                }
                EngineEvent::Decided { slot, cmd } => {
                    decided = true;
                    self.persist(DurableRecord::Decision {
                        bid,
                        slot,
                        cmd: cmd.clone(),
                    });
                    let r = self
                        .rec("decide")
                        .with("bid", bid)
                        .with("slot", slot)
                        .with("cmd", cmd.token());
                    self.emit(r);
                    for (child, status) in self.tree.resolve_children(bid, slot, &cmd) {
                        self.trace_status(child, bid, status);
                    }
                    let speculative = self
                        .tree
                        .get(&bid)
                        .is_some_and(|r| r.status == BranchStatus::Speculative);
                    if let (true, Some(id)) = (speculative, cmd.user_id()) {
                        self.notify(Notification {
                            kind: NotificationKind::Speculative,
                            cmd_id: id,
                            bid,
                            slot,
                        });
                    }
                }
            }
        }
        let members: Vec<ProcessId> = self
            .tree
            .get(&bid)
            .map(|r| r.engine.config().members().collect())
            .unwrap_or_default();
        for s in out.sends {
            let msg = NetMsg::Paxos { bid, msg: s.msg };
            match s.dest {
                Dest::To(p) => self.send(p, msg),
                Dest::Others => {
                    for m in &members {
                        self.send(*m, msg.clone());
                    }
                }
            }
        }
        if decided {
            self.advance_trunk();
        }
    }

    fn trace_status(&mut self, bid: BranchId, parent: BranchId, status: BranchStatus) {
        let r = self
            .rec("status")
            .with("bid", bid)
            .with("parent", parent)
            .with("status", status);
        self.emit(r);
    }

    /// Runs the trunk builder to a fixed point and applies what it appended.
    fn advance_trunk(&mut self) {
        loop {
            let out = advance(&mut self.trunk, &mut self.tree, &mut self.xfer_buf);
            for (bid, parent, status) in &out.status_changes {
                self.trace_status(*bid, *parent, *status);
            }
            for (from, to, slot) in &out.merges {
                let r = self
                    .rec("merge")
                    .with("from", from)
                    .with("to", to)
                    .with("slot", slot);
                self.emit(r);
            }
            let merged: BTreeMap<BranchId, u64> =
                out.merges.iter().map(|(f, _, s)| (*f, *s)).collect();
            for d in &out.discarded {
                for (slot, id) in &d.invalidated {
                    self.notify(Notification {
                        kind: NotificationKind::Invalidate,
                        cmd_id: *id,
                        bid: d.bid,
                        slot: *slot,
                    });
                }
                let mut r = self.rec("discard").with("bid", d.bid);
                r = match merged.get(&d.bid) {
                    Some(s) => r.with("merged", s),
                    None => r.with("merged", "-"),
                };
                self.emit(r.with("invalidated", d.invalidated.len()));
                self.joins.remove(&d.bid);
                self.transfers.remove(&d.bid);
                self.catching_up.remove(&d.bid);
                self.queued_recons.retain(|(b, _)| *b != d.bid);
            }
            let validated: BTreeMap<u64, Notification> = out
                .notifications
                .iter()
                .filter(|n| n.kind == NotificationKind::Validate)
                .map(|n| (n.slot, *n))
                .collect();
            for a in &out.appended {
                self.persist(DurableRecord::TrunkAppend {
                    slot: a.slot,
                    bid: a.bid,
                    cmd: a.cmd.clone(),
                });
                let r = self
                    .rec("trunk")
                    .with("slot", a.slot)
                    .with("cmd", a.cmd.token())
                    .with("bid", a.bid)
                    .with("src", a.source.as_str());
                self.emit(r);
                if let Some(n) = validated.get(&a.slot) {
                    self.notify(*n);
                }
            }
            for (slot, outcome) in self.trunk.apply_prefix(self.trunk.next()) {
                let r = match outcome {
                    ApplyOutcome::Applied(id) => self.rec("apply").with("slot", slot).with("cmd", id),
                    ApplyOutcome::Duplicate(id) => {
                        self.rec("apply-dup").with("slot", slot).with("cmd", id)
                    }
                    ApplyOutcome::Skipped => continue,
                };
                self.emit(r);
            }
            self.tree.prune_tombstones(self.trunk.next().saturating_sub(1));
            let cold = self.adopt_current_branch();
            if out.is_empty() && !cold {
                break;
            }
        }
        self.maybe_clip();
    }

    /// After following a RECON this replica never heard a JOIN for, starts
    /// a member engine for the new current branch if we belong to it.
    fn adopt_current_branch(&mut self) -> bool {
        let cur = self.trunk.cur_branch();
        let config = self.trunk.cur_config().clone();
        if self.tree.contains(&cur) || self.tree.is_tombstoned(&cur) || !config.contains(self.me) {
            return false;
        }
        let parent = match self.trunk.get(cur.slot_num) {
            Some(Command::Recon { parent, .. }) => *parent,
            _ => None,
        };
        let Ok(mut engine) = BranchEngine::start(
            self.me,
            cur,
            parent,
            config.clone(),
            cur.bal,
            cur.first_slot(),
            self.opts.engine,
        ) else {
            return false;
        };
        engine.prune_below(self.trunk.next());
        self.persist(DurableRecord::Branch {
            bid: cur,
            parent,
            config: config.clone(),
        });
        self.tree.insert(BranchRecord {
            engine,
            parent,
            status: BranchStatus::Valid,
        });
        self.catching_up.insert(cur);
        let r = self
            .rec("branch")
            .with("bid", cur)
            .with("parent", parent.map_or("-".to_string(), |p| p.to_string()))
            .with("config", &config)
            .with("status", BranchStatus::Valid)
            .with("cold", 1);
        self.emit(r);
        true
    }

    fn maybe_clip(&mut self) {
        let Some(limit) = self.opts.clip_limit else {
            return;
        };
        if self.log.len() <= self.clip_threshold || self.storage_failure.is_some() {
            return;
        }
        let watermark = self.trunk.state().watermark();
        let result = self
            .log
            .clip_point(limit, watermark, self.trunk.cur_branch())
            .and_then(|upto| {
                if upto == 0 {
                    return Ok((0, 0));
                }
                let snap = self.trunk.snapshot();
                self.log.clip(upto, watermark, &snap).map(|n| (upto, n))
            });
        match result {
            Ok((upto, removed)) => {
                if upto > 0 {
                    let r = self
                        .rec("clip")
                        .with("upto", upto)
                        .with("removed", removed)
                        .with("records", self.log.len());
                    self.emit(r);
                }
                // records that cannot be clipped yet (live speculative
                // branches) would otherwise retrigger on every append
                self.clip_threshold = if self.log.len() > limit {
                    self.log.len() + (limit / 4).max(1)
                } else {
                    limit
                };
            }
            Err(e) => self.storage_failure = Some(e.to_string()),
        }
    }

    // -- inbound -----------------------------------------------------------

    pub fn handle(&mut self, env: Envelope, now: u64) {
        self.now = now;
        let from = env.from;
        self.fd.heard(from, now);
        match env.msg {
            NetMsg::Paxos { bid, msg } => self.route(from, bid, msg, now),
            NetMsg::Join {
                parent,
                branch,
                config,
                parent_config,
            } => self.on_join(from, parent, branch, config, parent_config, now),
            NetMsg::JoinAck { branch } => {
                if let Some(j) = self.joins.get_mut(&branch) {
                    j.acked.insert(from);
                }
            }
            NetMsg::Heartbeat { trunk_len } => {
                self.peer_trunk.insert(from, trunk_len);
            }
            NetMsg::View(v) => self.adopt_view(v),
            NetMsg::TransferRequest(req) => self.on_transfer_request(from, req),
            NetMsg::TransferReply(rep) => self.on_transfer_reply(from, rep),
            NetMsg::DecisionRequest { bid, from_slot } => {
                if let Some(r) = self.tree.get(&bid) {
                    let entries = r.engine.decided_from(from_slot, self.opts.transfer.chunk);
                    let first = r.engine.first_undecided();
                    self.send(
                        from,
                        NetMsg::DecisionReply {
                            bid,
                            entries,
                            leader_first_undecided: first,
                        },
                    );
                }
            }
            NetMsg::DecisionReply {
                bid,
                entries,
                leader_first_undecided,
            } => self.on_decision_reply(bid, entries, leader_first_undecided),
        }
    }

    /// Delivers a protocol message to the engine of its branch; messages for
    /// unknown or discarded branches are dropped.
    pub fn route(&mut self, from: ProcessId, bid: BranchId, msg: PaxosMsg, now: u64) {
        self.now = now;
        let Some(rec) = self.tree.get_mut(&bid) else {
            return;
        };
        match rec.engine.handle(from, msg, now) {
            Ok(out) => self.absorb(bid, out),
            Err(e) => {
                let r = self.rec("engine-error").with("bid", bid).with("reason", sanitize(&e.to_string()));
                self.emit(r);
            }
        }
    }

    /// Proposes `cmd` in every live branch this replica leads.
    pub fn submit_user(&mut self, cmd: Command, now: u64) -> Result<usize, ReplicaError> {
        self.now = now;
        let led = self.led_branches();
        if led.is_empty() {
            return Err(ReplicaError::NotLeader(self.me));
        }
        let n = led.len();
        let id = cmd.user_id().map_or("-".to_string(), |i| i.to_string());
        let r = self.rec("submit").with("cmd", id).with("branches", n);
        self.emit(r);
        for bid in led {
            let Some(rec) = self.tree.get_mut(&bid) else {
                continue;
            };
            if let Ok(out) = rec.engine.propose(cmd.clone(), now) {
                self.absorb(bid, out);
            }
        }
        Ok(n)
    }

    /// Spawns a speculative branch running `config` off the newest branch
    /// this replica leads (its latest configuration estimate). A branch still
    /// in phase 1 queues the request until the ballot is established, so the
    /// RECON lands at the announced slot.
    ///
    /// Only one branch gets the RECON: a child that inherited its parent's
    /// ballot numbers slots exactly like the parent, so proposing in both
    /// would mint the same branch id twice.
    pub fn submit_recon(&mut self, config: Configuration, now: u64) -> Result<usize, ReplicaError> {
        self.now = now;
        let Some(bid) = self.led_branches().into_iter().max_by_key(|b| (b.slot_num, *b)) else {
            return Err(ReplicaError::NotLeader(self.me));
        };
        let ready = self
            .tree
            .get(&bid)
            .is_some_and(|r| r.engine.phase1_complete());
        if ready {
            self.spawn_branch(bid, config, now);
        } else {
            let r = self.rec("recon-queued").with("bid", bid).with("config", &config);
            self.emit(r);
            self.queued_recons.push((bid, config));
        }
        Ok(1)
    }

    fn spawn_branch(&mut self, bid: BranchId, config: Configuration, now: u64) {
        let Some(rec) = self.tree.get(&bid) else {
            return;
        };
        let parent_config = rec.engine.config().clone();
        let x = BranchId::new(rec.engine.next_slot(), rec.engine.ballot(), self.me);
        if self.tree.contains(&x) || self.tree.is_tombstoned(&x) || self.joins.contains_key(&x) {
            let r = self.rec("recon-dropped").with("bid", bid).with("config", &config).with("reason", "duplicate-id");
            self.emit(r);
            return;
        }
        let r = self
            .rec("recon")
            .with("bid", bid)
            .with("x", x)
            .with("config", &config);
        self.emit(r);
        for m in config.members() {
            self.send(
                m,
                NetMsg::Join {
                    parent: bid,
                    branch: x,
                    config: config.clone(),
                    parent_config: parent_config.clone(),
                },
            );
        }
        self.joins.insert(
            x,
            JoinState {
                parent: bid,
                config: config.clone(),
                parent_config: parent_config.clone(),
                acked: BTreeSet::from([self.me]),
            },
        );
        if config.contains(self.me) {
            self.on_join(self.me, bid, x, config.clone(), parent_config, now);
        }
        let cmd = Command::Recon {
            parent: Some(bid),
            branch: x,
            config,
        };
        if let Some(rec) = self.tree.get_mut(&bid) {
            if let Ok(out) = rec.engine.propose(cmd, now) {
                self.absorb(bid, out);
            }
        }
    }

    /// Creates the speculative branch `x` announced by a JOIN.
    pub fn on_join(
        &mut self,
        from: ProcessId,
        parent: BranchId,
        x: BranchId,
        config: Configuration,
        parent_config: Configuration,
        now: u64,
    ) {
        self.now = now;
        if !config.contains(self.me) {
            let r = self.rec("join-refused").with("bid", x).with("reason", "not-member");
            self.emit(r);
            return;
        }
        self.send(from, NetMsg::JoinAck { branch: x });
        if self.tree.contains(&x) {
            return;
        }
        let cur = self.trunk.cur_branch();
        let reason = if self.tree.is_tombstoned(&x) {
            Some("discarded")
        } else if x.slot_num < self.trunk.next() && x != cur {
            Some("stale")
        } else if !(self.tree.contains(&parent) || parent == cur) {
            Some("unknown-parent")
        } else {
            None
        };
        if let Some(reason) = reason {
            let r = self.rec("join-refused").with("bid", x).with("reason", reason);
            self.emit(r);
            return;
        }
        let Ok(engine) = BranchEngine::start(
            self.me,
            x,
            Some(parent),
            config.clone(),
            x.bal,
            x.first_slot(),
            self.opts.engine,
        ) else {
            return;
        };
        self.persist(DurableRecord::Branch {
            bid: x,
            parent: Some(parent),
            config: config.clone(),
        });
        self.tree.insert(BranchRecord {
            engine,
            parent: Some(parent),
            status: BranchStatus::Speculative,
        });
        let status = self.initial_status(x);
        if let Some(rec) = self.tree.get_mut(&x) {
            rec.status = status;
        }
        let r = self
            .rec("branch")
            .with("bid", x)
            .with("parent", parent)
            .with("config", &config)
            .with("status", status)
            .with("from", from);
        self.emit(r);
        if x.initiator != self.me {
            self.catching_up.insert(x);
        }
        if !parent_config.contains(self.me) {
            let sources = transfer_sources(self.me, [], &parent_config, &self.group);
            self.start_transfer(Transfer::begin(x, sources, x.first_slot()));
        }
        self.advance_trunk();
    }

    fn start_transfer(&mut self, mut t: Transfer) {
        let bid = t.branch();
        let poll = t.poll(self.me, self.trunk.next(), self.now, &self.opts.transfer);
        self.transfers.insert(bid, t);
        if let Some((to, req)) = poll {
            self.send_transfer_request(to, req);
        }
    }

    fn send_transfer_request(&mut self, to: ProcessId, req: TransferRequest) {
        let r = self
            .rec("xfer-req")
            .with("bid", req.branch)
            .with("to", to)
            .with("have", req.have_upto)
            .with("want", req.want_upto);
        self.emit(r);
        self.send(to, NetMsg::TransferRequest(req));
    }

    fn on_transfer_request(&mut self, from: ProcessId, req: TransferRequest) {
        let reply = serve(&self.trunk, &req, self.opts.transfer.chunk);
        self.send(from, NetMsg::TransferReply(reply));
    }

    fn on_transfer_reply(&mut self, from: ProcessId, rep: TransferReply) {
        let next = self.trunk.next();
        for (slot, cmd) in &rep.entries {
            if *slot >= next {
                self.xfer_buf.entry(*slot).or_insert_with(|| cmd.clone());
            }
        }
        self.advance_trunk();
        let have = self.trunk.next();
        let follow = self.transfers.get_mut(&rep.branch).and_then(|t| {
            t.on_reply(self.me, from, &rep, have, self.now, &self.opts.transfer)
        });
        if let Some((to, req)) = follow {
            self.send_transfer_request(to, req);
        }
        self.finish_transfers();
    }

    fn finish_transfers(&mut self) {
        let have = self.trunk.next();
        let done: Vec<BranchId> = self
            .transfers
            .iter()
            .filter(|(_, t)| t.is_done(have))
            .map(|(b, _)| *b)
            .collect();
        for bid in done {
            self.transfers.remove(&bid);
            let r = self.rec("xfer-done").with("bid", bid).with("trunk", have);
            self.emit(r);
        }
    }

    fn on_decision_reply(&mut self, bid: BranchId, entries: Vec<(u64, Command)>, leader_first: u64) {
        let now = self.now;
        let Some(rec) = self.tree.get_mut(&bid) else {
            return;
        };
        let mut out = EngineOutput::default();
        let mut error = None;
        for (slot, cmd) in entries {
            match rec.engine.learn(slot, cmd, now) {
                Ok(o) => {
                    out.sends.extend(o.sends);
                    out.events.extend(o.events);
                }
                Err(e) => {
                    error = Some(e);
                    break;
                }
            }
        }
        let caught_up = rec.engine.first_undecided() >= leader_first;
        if caught_up {
            self.catching_up.remove(&bid);
        }
        if let Some(e) = error {
            let r = self
                .rec("engine-error")
                .with("bid", bid)
                .with("reason", sanitize(&e.to_string()));
            self.emit(r);
        }
        self.absorb(bid, out);
    }

    fn adopt_view(&mut self, v: ViewRecord) {
        if v.epoch < self.view.epoch || v == self.view {
            return;
        }
        self.view = v;
        let r = self.rec("view").with("epoch", self.view.epoch).with("cohort", &self.view.cohort).with("leader", self.view.leader);
        self.emit(r);
    }

    // -- timers --------------------------------------------------------------

    pub fn on_tick(&mut self, now: u64) {
        self.now = now;
        let o = self.opts.clone();

        if now.is_multiple_of(o.heartbeat_period) {
            let len = self.trunk.next();
            for p in self.group.clone() {
                self.send(p, NetMsg::Heartbeat { trunk_len: len });
            }
        }
        let suspected = self.fd.suspected(now);
        if suspected != self.suspected {
            self.suspected = suspected;
            let set = join_ids(&self.suspected);
            let r = self.rec("suspect").with("set", set);
            self.emit(r);
        }

        for bid in self.tree.ids() {
            let Some(rec) = self.tree.get(&bid) else {
                continue;
            };
            if rec.status == BranchStatus::Invalid {
                continue;
            }
            let leader = self.leader_of(rec.engine.config());
            let me = self.me;
            let Some(rec) = self.tree.get_mut(&bid) else {
                continue;
            };
            let out = leader_takeover(&mut rec.engine, me, leader, now);
            self.absorb(bid, out);
        }

        self.retry_queued_recons(now);

        if now.is_multiple_of(o.rejoin_period) {
            self.retransmit_joins();
        }

        let cur = self.trunk.cur_branch();
        let leads_cur = self.leads(&cur) && self.is_active();
        if leads_cur && now.is_multiple_of(o.gossip_period) {
            let v = ViewRecord {
                epoch: self.trunk.epoch(),
                cohort: self.trunk.cur_config().clone(),
                leader: self.me,
            };
            for p in self.group.clone() {
                self.send(p, NetMsg::View(v.clone()));
            }
            self.adopt_view(v.clone());
            self.announcements.push(v);
        }
        if leads_cur && now.is_multiple_of(o.policy_period) {
            self.run_policy(now);
        }

        if now.is_multiple_of(o.sync_period) {
            self.sync_decisions();
        }

        self.finish_transfers();
        let have = self.trunk.next();
        let polls: Vec<(ProcessId, TransferRequest)> = self
            .transfers
            .values_mut()
            .filter_map(|t| t.poll(self.me, have, now, &o.transfer))
            .collect();
        for (to, req) in polls {
            self.send_transfer_request(to, req);
        }

        if self.trunk_seen.0 != have {
            self.trunk_seen = (have, now);
        } else if now.saturating_sub(self.trunk_seen.1) >= o.stall_ticks && self.transfers.is_empty() {
            let mut ahead: Vec<(u64, ProcessId)> = self
                .peer_trunk
                .iter()
                .filter(|(p, l)| **l > have && !self.suspected.contains(p))
                .map(|(p, l)| (*l, *p))
                .collect();
            if !ahead.is_empty() {
                ahead.sort_by(|a, b| b.cmp(a));
                let want = ahead[0].0;
                let sources = transfer_sources(
                    self.me,
                    ahead.iter().map(|(_, p)| *p),
                    &self.trunk.cur_config().clone(),
                    &self.group,
                );
                self.trunk_seen = (have, now);
                self.start_transfer(Transfer::begin(cur, sources, want));
            }
        }
    }

    fn retry_queued_recons(&mut self, now: u64) {
        if self.queued_recons.is_empty() {
            return;
        }
        let queued = std::mem::take(&mut self.queued_recons);
        for (bid, config) in queued {
            if !self.leads(&bid) {
                let r = self.rec("recon-dropped").with("bid", bid).with("config", &config);
                self.emit(r);
                continue;
            }
            let ready = self
                .tree
                .get(&bid)
                .is_some_and(|r| r.engine.phase1_complete());
            if ready {
                self.spawn_branch(bid, config, now);
            } else {
                self.queued_recons.push((bid, config));
            }
        }
    }

    fn retransmit_joins(&mut self) {
        let next = self.trunk.next();
        let resolved: Vec<BranchId> = self
            .joins
            .iter()
            .filter(|(x, j)| {
                next > x.slot_num
                    || !self.tree.contains(&j.parent)
                    || j.config.members().all(|m| j.acked.contains(&m))
            })
            .map(|(x, _)| *x)
            .collect();
        for x in resolved {
            self.joins.remove(&x);
        }
        let pending: Vec<(BranchId, JoinState)> =
            self.joins.iter().map(|(x, j)| (*x, j.clone())).collect();
        for (x, j) in pending {
            for m in j.config.members().filter(|m| !j.acked.contains(m)) {
                self.send(
                    m,
                    NetMsg::Join {
                        parent: j.parent,
                        branch: x,
                        config: j.config.clone(),
                        parent_config: j.parent_config.clone(),
                    },
                );
            }
        }
    }

    fn run_policy(&mut self, now: u64) {
        let Ok(view) = GroupView::new(
            self.group.clone(),
            self.trunk.cur_config().clone(),
            self.suspected.clone(),
        ) else {
            return;
        };
        let cur = self.trunk.cur_branch();
        let stats = PolicyStats {
            tick: now,
            trunk_len: self.trunk.next(),
            recon_pending: !self.queued_recons.is_empty()
                || !self.joins.is_empty()
                || self.tree.iter().any(|(b, _)| *b != cur),
        };
        match evaluate_policy(self.policy.as_ref(), &view, &stats) {
            Ok(Some(c)) => {
                let r = self
                    .rec("recon-trigger")
                    .with("policy", self.policy.name())
                    .with("config", &c);
                self.emit(r);
                let _ = self.submit_recon(c, now);
            }
            Ok(None) => {}
            Err(ConfigError::PolicyViolation { proposed }) => {
                let r = self
                    .rec("policy-violation")
                    .with("policy", self.policy.name())
                    .with("config", proposed);
                self.emit(r);
            }
            Err(ConfigError::NoLeader) => {}
        }
    }

    fn sync_decisions(&mut self) {
        let mut reqs = Vec::new();
        for (bid, rec) in self.tree.iter() {
            if rec.engine.is_dead() || rec.status == BranchStatus::Invalid {
                continue;
            }
            let Some(leader) = self.leader_of(rec.engine.config()) else {
                continue;
            };
            if leader == self.me {
                continue;
            }
            if rec.engine.has_gap() || self.catching_up.contains(bid) {
                reqs.push((leader, *bid, rec.engine.first_undecided()));
            }
        }
        for (leader, bid, from_slot) in reqs {
            self.send(leader, NetMsg::DecisionRequest { bid, from_slot });
        }
    }
}

fn join_ids(set: &BTreeSet<ProcessId>) -> String {
    if set.is_empty() {
        return "-".into();
    }
    set.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",")
}

fn sanitize(s: &str) -> String {
    s.replace([' ', '\t', '='], "_")
}
