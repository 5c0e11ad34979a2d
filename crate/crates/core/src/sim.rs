//! Deterministic discrete-event simulation of a replication group.
//!
//! Time advances in integer ticks. Within a tick the harness
//!
//! 1. applies the scenario events scheduled for it, in file order;
//! 2. hands pending client commands and reconfiguration requests to a
//!    replica (the registry's leader first, then live replicas by id);
//! 3. delivers the messages due, in send order;
//! 4. ticks every live replica, in id order.
//!
//! All randomness (link delays, loss) comes from one ChaCha8 stream seeded
//! by the run's seed, so a `(scenario, seed)` pair always yields the same
//! trace.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Registry;
use crate::msg::Envelope;
use crate::replica::{init_idle, init_replica, Replica, ReplicaError, ReplicaOptions};
use crate::scenario::{Scenario, ScenarioEvent};
use crate::storage::{FileBackend, PersistentLog};
use crate::trace::{render_trace, TraceRecord};
use crate::types::{BranchId, Command, CommandId, Configuration, ProcessId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backend {
    Memory,
    /// One sub-directory per replica under this root.
    Files(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub replica: ReplicaOptions,
    /// Overrides the scenario's tick limit.
    pub tick_limit: Option<u64>,
    pub backend: Backend,
    /// Quiet ticks required before a run counts as settled.
    pub quiet_window: u64,
    /// Ticks a client keeps retrying before giving up on a command.
    pub client_patience: u64,
    pub min_delay: u64,
    pub max_delay: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            replica: ReplicaOptions::default(),
            tick_limit: None,
            backend: Backend::Memory,
            quiet_window: 20,
            client_patience: 100,
            min_delay: 1,
            max_delay: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Quiescent { tick: u64 },
    /// The tick limit ran out first; the trace is still complete.
    TimeLimit { tick: u64 },
}

impl Outcome {
    pub fn tick(&self) -> u64 {
        match self {
            Outcome::Quiescent { tick } | Outcome::TimeLimit { tick } => *tick,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NetStats {
    /// Protocol (non-heartbeat, non-view) messages handed to the network.
    pub protocol_sent: u64,
    pub control_sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinalState {
    pub pid: ProcessId,
    pub live: bool,
    /// Retained trunk entries `(slot, cmd)`; empty for crashed replicas.
    pub trunk: Vec<(u64, Command)>,
    pub trunk_len: u64,
    pub digest: u64,
    pub applied: usize,
    pub cur_branch: Option<BranchId>,
    pub active: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub outcome: Outcome,
    pub trace: Vec<TraceRecord>,
    pub finals: Vec<FinalState>,
    pub net: NetStats,
}

impl RunResult {
    pub fn trace_text(&self) -> String {
        render_trace(&self.trace)
    }

    pub fn final_of(&self, pid: ProcessId) -> Option<&FinalState> {
        self.finals.iter().find(|f| f.pid == pid)
    }
}

enum Node {
    Up(Box<Replica>),
    Down(PersistentLog),
    Gone,
}

#[derive(Debug, Clone)]
enum Request {
    User(Command),
    Recon(Configuration),
}

#[derive(Debug, Clone)]
struct Pending {
    req: Request,
    via: Option<ProcessId>,
    since: u64,
}

#[derive(Debug, Clone)]
struct DelayRule {
    from: ProcessId,
    to: ProcessId,
    extra: u64,
    until: u64,
    branch_slot: Option<u64>,
}

pub struct Simulation {
    scenario: Scenario,
    opts: SimOptions,
    seed: u64,
    rng: ChaCha8Rng,
    now: u64,
    limit: u64,
    nodes: BTreeMap<ProcessId, Node>,
    queue: BTreeMap<(u64, u64), Envelope>,
    seq: u64,
    partition: Option<Vec<BTreeSet<ProcessId>>>,
    cut: BTreeSet<(ProcessId, ProcessId)>,
    loss: f64,
    delays: Vec<DelayRule>,
    registry: Registry,
    pending: Vec<Pending>,
    next_event: usize,
    client_seq: BTreeMap<ProcessId, u64>,
    trace: Vec<TraceRecord>,
    quiet_since: Option<u64>,
    outcome: Option<Outcome>,
    net: NetStats,
}

impl Simulation {
    pub fn new(scenario: &Scenario, seed: u64, opts: SimOptions) -> Result<Self, ReplicaError> {
        let limit = opts.tick_limit.unwrap_or(scenario.ticks);
        let mut sim = Simulation {
            scenario: scenario.clone(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            now: 0,
            limit,
            nodes: BTreeMap::new(),
            queue: BTreeMap::new(),
            seq: 0,
            partition: None,
            cut: BTreeSet::new(),
            loss: 0.0,
            delays: Vec::new(),
            registry: Registry::new(&scenario.cohort),
            pending: Vec::new(),
            next_event: 0,
            client_seq: BTreeMap::new(),
            trace: Vec::new(),
            quiet_since: None,
            outcome: None,
            net: NetStats::default(),
            opts,
        };
        sim.trace.push(
            TraceRecord::new(0, None, "start")
                .with("seed", seed)
                .with("group", Configuration::new(scenario.group.iter().copied()).expect("non-empty group"))
                .with("cohort", &scenario.cohort)
                .with("policy", scenario.policy.to_string().replace(' ', ":")),
        );
        for p in scenario.group.clone() {
            let log = sim.open_log(p)?;
            let mut r = if scenario.cohort.contains(p) {
                init_replica(p, &scenario.cohort, &scenario.group, sim.opts.replica.clone(), log)?
            } else {
                init_idle(p, &scenario.cohort, &scenario.group, sim.opts.replica.clone(), log)
            };
            r.set_policy(scenario.policy.build());
            sim.nodes.insert(p, Node::Up(Box::new(r)));
        }
        Ok(sim)
    }

    fn open_log(&self, p: ProcessId) -> Result<PersistentLog, ReplicaError> {
        Ok(match &self.opts.backend {
            Backend::Memory => PersistentLog::in_memory(),
            Backend::Files(root) => {
                let dir = root.join(format!("seed{}", self.seed)).join(p.to_string());
                let backend = FileBackend::open(&dir).map_err(crate::storage::StorageError::from)?;
                PersistentLog::new(Box::new(backend))
            }
        })
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn replica(&self, p: ProcessId) -> Option<&Replica> {
        match self.nodes.get(&p) {
            Some(Node::Up(r)) => Some(r),
            _ => None,
        }
    }

    pub fn live(&self) -> impl Iterator<Item = &Replica> {
        self.nodes.values().filter_map(|n| match n {
            Node::Up(r) => Some(r.as_ref()),
            _ => None,
        })
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    fn sim_rec(&self, kind: &str) -> TraceRecord {
        TraceRecord::new(self.now, None, kind)
    }

    /// Runs one tick. Returns `false` once the run has finished.
    pub fn step(&mut self) -> bool {
        if self.outcome.is_some() {
            return false;
        }
        self.now += 1;
        let now = self.now;

        while self.next_event < self.scenario.events.len()
            && self.scenario.events[self.next_event].0 <= now
        {
            let ev = self.scenario.events[self.next_event].1.clone();
            self.next_event += 1;
            self.apply_event(ev);
        }

        self.serve_pending();

        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > now {
                break;
            }
            let env = entry.remove();
            let to = env.to;
            if let Some(Node::Up(r)) = self.nodes.get_mut(&to) {
                self.net.delivered += 1;
                r.handle(env, now);
                self.collect(to);
            }
        }

        let pids: Vec<ProcessId> = self.nodes.keys().copied().collect();
        for p in pids {
            if let Some(Node::Up(r)) = self.nodes.get_mut(&p) {
                r.on_tick(now);
                self.collect(p);
            }
        }

        self.check_quiescence();
        if self.outcome.is_none() && now >= self.limit {
            self.outcome = Some(Outcome::TimeLimit { tick: now });
        }
        if self.outcome.is_some() {
            self.finish_trace();
            return false;
        }
        true
    }

    pub fn run(mut self) -> RunResult {
        while self.step() {}
        self.into_result()
    }

    pub fn into_result(self) -> RunResult {
        let finals = self
            .nodes
            .iter()
            .map(|(p, n)| match n {
                Node::Up(r) => FinalState {
                    pid: *p,
                    live: true,
                    trunk: r.trunk().entries_from(0, usize::MAX),
                    trunk_len: r.trunk().next(),
                    digest: r.trunk().state().digest(),
                    applied: r.trunk().state().applied_count(),
                    cur_branch: Some(r.trunk().cur_branch()),
                    active: r.is_active(),
                },
                _ => FinalState {
                    pid: *p,
                    live: false,
                    trunk: Vec::new(),
                    trunk_len: 0,
                    digest: 0,
                    applied: 0,
                    cur_branch: None,
                    active: false,
                },
            })
            .collect();
        RunResult {
            seed: self.seed,
            outcome: self.outcome.unwrap_or(Outcome::TimeLimit { tick: self.now }),
            trace: self.trace,
            finals,
            net: self.net,
        }
    }

    fn finish_trace(&mut self) {
        let finals: Vec<TraceRecord> = self
            .nodes
            .iter()
            .filter_map(|(p, n)| match n {
                Node::Up(r) => Some(
                    TraceRecord::new(self.now, Some(*p), "final")
                        .with("trunk", r.trunk().next())
                        .with("applied", r.trunk().state().applied_count())
                        .with("digest", format!("{:016x}", r.trunk().state().digest()))
                        .with("cur", r.trunk().cur_branch())
                        .with("active", u8::from(r.is_active())),
                ),
                _ => None,
            })
            .collect();
        self.trace.extend(finals);
        let stats = self
            .sim_rec("stats")
            .with("msgs", self.net.protocol_sent)
            .with("control", self.net.control_sent)
            .with("delivered", self.net.delivered)
            .with("dropped", self.net.dropped);
        self.trace.push(stats);
        let outcome = match self.outcome {
            Some(Outcome::Quiescent { .. }) => "quiescent",
            _ => "time-limit",
        };
        let end = self.sim_rec("end").with("outcome", outcome);
        self.trace.push(end);
    }

    fn check_quiescence(&mut self) {
        let settled = self.next_event >= self.scenario.events.len()
            && self.pending.is_empty()
            && self.queue.values().all(|e| e.msg.is_control())
            && self.live().all(|r| r.is_idle())
            && {
                let lens: BTreeSet<u64> = self
                    .live()
                    .filter(|r| r.is_active())
                    .map(|r| r.trunk().next())
                    .collect();
                lens.len() <= 1
            };
        if !settled {
            self.quiet_since = None;
            return;
        }
        let since = *self.quiet_since.get_or_insert(self.now);
        if self.now - since >= self.opts.quiet_window {
            self.outcome = Some(Outcome::Quiescent { tick: self.now });
        }
    }

    /// Moves a replica's output into the trace, the registry and the
    /// network.
    fn collect(&mut self, p: ProcessId) {
        let Some(Node::Up(r)) = self.nodes.get_mut(&p) else {
            return;
        };
        let trace = r.drain_trace();
        let out = r.drain_outbox();
        let views = r.drain_announcements();
        let failure = r.storage_failure().map(str::to_string);
        self.trace.extend(trace);
        for v in views {
            if self.registry.publish(&v) {
                let rec = self.sim_rec("registry").with("epoch", v.epoch).with("cohort", &v.cohort).with("leader", v.leader);
                self.trace.push(rec);
            }
        }
        for env in out {
            self.transmit(env);
        }
        if let Some(reason) = failure {
            self.crash(p, &reason);
        }
    }

    fn side(&self, p: ProcessId) -> Option<usize> {
        self.partition
            .as_ref()
            .map(|sides| sides.iter().position(|s| s.contains(&p)).unwrap_or(usize::MAX))
    }

    fn transmit(&mut self, env: Envelope) {
        if env.msg.is_control() {
            self.net.control_sent += 1;
        } else {
            self.net.protocol_sent += 1;
        }
        let mut delay = self.rng.random_range(self.opts.min_delay..=self.opts.max_delay);
        let lost = self.loss > 0.0 && self.rng.random_bool(self.loss);
        let blocked = self.side(env.from) != self.side(env.to)
            || self.cut.contains(&(env.from, env.to));
        if lost || blocked {
            self.net.dropped += 1;
            return;
        }
        if !env.msg.is_control() {
            let slot = env.msg.branch().map(|b| b.slot_num);
            for d in &self.delays {
                if d.from == env.from
                    && d.to == env.to
                    && self.now < d.until
                    && d.branch_slot.is_none_or(|s| Some(s) == slot)
                {
                    delay += d.extra;
                }
            }
        }
        self.seq += 1;
        self.queue.insert((self.now + delay, self.seq), env);
    }

    fn crash(&mut self, p: ProcessId, reason: &str) {
        let Some(node) = self.nodes.remove(&p) else {
            return;
        };
        match node {
            Node::Up(r) => {
                let rec = TraceRecord::new(self.now, Some(p), "crash")
                    .with("trunk", r.trunk().next())
                    .with("reason", reason);
                self.trace.push(rec);
                self.nodes.insert(p, Node::Down(r.crash()));
            }
            other => {
                self.nodes.insert(p, other);
            }
        }
    }

    fn recover(&mut self, p: ProcessId) {
        let Some(Node::Down(_)) = self.nodes.get(&p) else {
            return;
        };
        let Some(Node::Down(log)) = self.nodes.insert(p, Node::Gone) else {
            unreachable!()
        };
        let s = &self.scenario;
        match Replica::recover(p, &s.cohort, &s.group, self.opts.replica.clone(), log, self.now) {
            Ok(mut r) => {
                r.set_policy(s.policy.build());
                self.nodes.insert(p, Node::Up(Box::new(r)));
                self.collect(p);
            }
            Err(e) => {
                let rec = TraceRecord::new(self.now, Some(p), "recover-failed")
                    .with("reason", e.to_string().replace([' ', '='], "_"));
                self.trace.push(rec);
            }
        }
    }

    fn apply_event(&mut self, ev: ScenarioEvent) {
        let now = self.now;
        match ev {
            ScenarioEvent::Submit {
                client,
                payload,
                via,
            } => {
                let seq = self.client_seq.entry(client).or_insert(0);
                *seq += 1;
                let id = CommandId {
                    client,
                    sequence: *seq,
                };
                let rec = self.sim_rec("client").with("cmd", id).with("payload", &payload);
                self.trace.push(rec);
                self.pending.push(Pending {
                    req: Request::User(Command::user(id, payload.into_bytes())),
                    via,
                    since: now,
                });
            }
            ScenarioEvent::Recon { config, via } => {
                let rec = self.sim_rec("recon-request").with("config", &config);
                self.trace.push(rec);
                self.pending.push(Pending {
                    req: Request::Recon(config),
                    via,
                    since: now,
                });
            }
            ScenarioEvent::Crash(p) => self.crash(p, "scenario"),
            ScenarioEvent::Recover(p) => self.recover(p),
            ScenarioEvent::Partition(sides) => {
                let desc = sides
                    .iter()
                    .map(|s| s.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","))
                    .collect::<Vec<_>>()
                    .join("|");
                let rec = self.sim_rec("partition").with("sides", desc);
                self.trace.push(rec);
                self.partition = Some(sides);
            }
            ScenarioEvent::Heal => {
                self.partition = None;
                self.cut.clear();
                self.delays.clear();
                let rec = self.sim_rec("heal");
                self.trace.push(rec);
            }
            ScenarioEvent::Drop(a, b) => {
                self.cut.insert((a, b));
                self.cut.insert((b, a));
                let rec = self.sim_rec("drop").with("a", a).with("b", b);
                self.trace.push(rec);
            }
            ScenarioEvent::Loss(p) => {
                self.loss = p;
                let rec = self.sim_rec("loss").with("p", p);
                self.trace.push(rec);
            }
            ScenarioEvent::Delay {
                from,
                to,
                extra,
                duration,
                branch_slot,
            } => {
                let mut rec = self
                    .sim_rec("delay")
                    .with("from", from)
                    .with("to", to)
                    .with("extra", extra)
                    .with("until", now + duration);
                if let Some(s) = branch_slot {
                    rec = rec.with("branch", s);
                }
                self.trace.push(rec);
                self.delays.push(DelayRule {
                    from,
                    to,
                    extra,
                    until: now + duration,
                    branch_slot,
                });
            }
        }
    }

    fn serve_pending(&mut self) {
        let now = self.now;
        let pending = std::mem::take(&mut self.pending);
        for p in pending {
            let targets: Vec<ProcessId> = match p.via {
                Some(v) => vec![v],
                None => {
                    let leader = self.registry.lookup().leader;
                    let mut t = vec![leader];
                    t.extend(self.nodes.keys().copied().filter(|q| *q != leader));
                    t
                }
            };
            let mut accepted = false;
            for t in targets {
                let Some(Node::Up(r)) = self.nodes.get_mut(&t) else {
                    continue;
                };
                let res = match &p.req {
                    Request::User(cmd) => r.submit_user(cmd.clone(), now),
                    Request::Recon(c) => r.submit_recon(c.clone(), now),
                };
                self.collect(t);
                if res.is_ok() {
                    accepted = true;
                    break;
                }
            }
            if accepted {
                continue;
            }
            if now - p.since >= self.opts.client_patience {
                let what = match &p.req {
                    Request::User(cmd) => cmd.token(),
                    Request::Recon(c) => format!("recon:{c}"),
                };
                let rec = self.sim_rec("client-drop").with("cmd", what);
                self.trace.push(rec);
            } else {
                self.pending.push(p);
            }
        }
    }
}

/// Runs `(scenario, seed)` to completion.
pub fn run(scenario: &Scenario, seed: u64, opts: &SimOptions) -> Result<RunResult, ReplicaError> {
    Ok(Simulation::new(scenario, seed, opts.clone())?.run())
}
