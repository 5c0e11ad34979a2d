//! A textbook multi-Paxos, kept deliberately separate from the crate: one
//! fixed leader, one ballot, phase 1 once for all slots, phase 2 per slot,
//! FIFO in-memory message delivery. Used only to cross-check the order in
//! which a fault-free run decides client commands.

use std::collections::{BTreeMap, VecDeque};

use speclog::{Scenario, ScenarioEvent};

type Ballot = (u64, u32);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub client: u32,
    pub seq: u64,
    pub payload: String,
}

enum Msg {
    Prepare(Ballot),
    Promise(usize, Ballot, Vec<(u64, Ballot, Entry)>),
    Accept(Ballot, u64, Entry),
    Accepted(usize, Ballot, u64),
}

#[derive(Default)]
struct Acceptor {
    promised: Option<Ballot>,
    accepted: BTreeMap<u64, (Ballot, Entry)>,
}

impl Acceptor {
    fn on(&mut self, me: usize, m: Msg) -> Option<Msg> {
        match m {
            Msg::Prepare(b) if self.promised.is_none_or(|p| b > p) => {
                self.promised = Some(b);
                let acc = self
                    .accepted
                    .iter()
                    .map(|(s, (bb, e))| (*s, *bb, e.clone()))
                    .collect();
                Some(Msg::Promise(me, b, acc))
            }
            Msg::Accept(b, s, e) if self.promised.is_none_or(|p| b >= p) => {
                self.promised = Some(b);
                self.accepted.insert(s, (b, e));
                Some(Msg::Accepted(me, b, s))
            }
            _ => None,
        }
    }
}

pub struct Oracle {
    acceptors: Vec<Acceptor>,
    ballot: Ballot,
    promises: usize,
    next_slot: u64,
    votes: BTreeMap<u64, Vec<usize>>,
    proposals: BTreeMap<u64, Entry>,
    backlog: VecDeque<Entry>,
    decided: BTreeMap<u64, Entry>,
    net: VecDeque<(Option<usize>, Msg)>,
}

impl Oracle {
    pub fn new(n: usize, leader: u32) -> Self {
        let mut o = Oracle {
            acceptors: (0..n).map(|_| Acceptor::default()).collect(),
            ballot: (1, leader),
            promises: 0,
            next_slot: 1,
            votes: BTreeMap::new(),
            proposals: BTreeMap::new(),
            backlog: VecDeque::new(),
            decided: BTreeMap::new(),
            net: VecDeque::new(),
        };
        for a in 0..n {
            o.net.push_back((Some(a), Msg::Prepare(o.ballot)));
        }
        o
    }

    fn quorum(&self) -> usize {
        self.acceptors.len() / 2 + 1
    }

    fn phase1_done(&self) -> bool {
        self.promises >= self.quorum()
    }

    pub fn submit(&mut self, e: Entry) {
        self.backlog.push_back(e);
        self.pump();
    }

    fn pump(&mut self) {
        if !self.phase1_done() {
            return;
        }
        while let Some(e) = self.backlog.pop_front() {
            let s = self.next_slot;
            self.next_slot += 1;
            self.proposals.insert(s, e.clone());
            for a in 0..self.acceptors.len() {
                self.net.push_back((Some(a), Msg::Accept(self.ballot, s, e.clone())));
            }
        }
    }

    /// Delivers everything in flight.
    pub fn settle(&mut self) {
        while let Some((to, m)) = self.net.pop_front() {
            match to {
                Some(a) => {
                    if let Some(reply) = self.acceptors[a].on(a, m) {
                        self.net.push_back((None, reply));
                    }
                }
                None => self.leader_on(m),
            }
        }
    }

    fn leader_on(&mut self, m: Msg) {
        match m {
            Msg::Promise(_, b, accepted) if b == self.ballot => {
                // a fresh group has nothing accepted; adopt anyway for form
                for (s, _, e) in accepted {
                    self.proposals.entry(s).or_insert(e);
                    self.next_slot = self.next_slot.max(s + 1);
                }
                self.promises += 1;
                if self.promises == self.quorum() {
                    self.pump();
                }
            }
            Msg::Accepted(a, b, s) if b == self.ballot => {
                let q = self.quorum();
                let v = self.votes.entry(s).or_default();
                if !v.contains(&a) {
                    v.push(a);
                }
                if v.len() >= q && !self.decided.contains_key(&s) {
                    let e = self.proposals[&s].clone();
                    self.decided.insert(s, e);
                }
            }
            _ => {}
        }
    }

    pub fn decisions(&self) -> Vec<Entry> {
        self.decided.values().cloned().collect()
    }
}

/// Feeds a fault-free scenario's client commands to the oracle in schedule
/// order, numbering each client's commands from 1.
pub fn run_scenario(s: &Scenario) -> Vec<Entry> {
    let mut o = Oracle::new(s.cohort.len(), s.cohort.min_member().0);
    let mut seq: BTreeMap<u32, u64> = BTreeMap::new();
    o.settle();
    for (_, ev) in &s.events {
        match ev {
            ScenarioEvent::Submit { client, payload, .. } => {
                let n = seq.entry(client.0).or_insert(0);
                *n += 1;
                o.submit(Entry {
                    client: client.0,
                    seq: *n,
                    payload: payload.clone(),
                });
                o.settle();
            }
            other => panic!("oracle runs fault-free schedules only, got {other:?}"),
        }
    }
    o.decisions()
}

pub fn render(entries: &[Entry]) -> String {
    entries
        .iter()
        .map(|e| format!("c{}#{} {}\n", e.client, e.seq, e.payload))
        .collect()
}
