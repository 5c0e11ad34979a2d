//! Offline safety checker over recorded traces.
//!
//! The checker only sees the trace, never replica internals. It verifies:
//!
//! * agreement: one command per trunk slot across all replicas, and one
//!   decision per `(branch, slot)`;
//! * contiguity: each replica's trunk grows one slot at a time (resuming at
//!   the length reported by `recover`);
//! * validity: every decided user command was issued by a client, every
//!   decided RECON was initiated by some replica;
//! * notifications: VALIDATE exactly once per first trunk occurrence,
//!   INVALIDATE exactly for the discarded suffix of a branch, no occurrence
//!   both;
//! * branch status: at most one resolution per branch and replica, and it
//!   agrees with what the parent decided at the branch's slot;
//! * proposal discipline: no slot proposed twice under one ballot, no slot
//!   re-proposed once decided locally, no PREPARE after phase 1 completed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::trace::{parse_line, ParseError, TraceRecord};
use crate::types::{BranchId, ProcessId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Zero-based record index.
    pub index: usize,
    /// One-based line in the trace text (equals `index + 1` when the trace
    /// has no blank lines).
    pub line: usize,
    pub rule: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: [{}] {}", self.line, self.rule, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TraceStats {
    pub ticks: u64,
    /// Longest trunk seen, excluding slot 0.
    pub decisions: u64,
    pub user_decisions: u64,
    pub msgs: u64,
    pub msgs_per_decision: f64,
    pub merges: u64,
    /// Commands decided in a new branch before its RECON reached the trunk,
    /// summed over merges (max over replicas per merge).
    pub speculative_k: u64,
    pub proposals: u64,
    pub reproposals: u64,
    pub outcome: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub violations: Vec<Violation>,
    pub stats: TraceStats,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first(&self) -> Option<&Violation> {
        self.violations.first()
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.first() {
            None => write!(f, "PASS"),
            Some(v) => write!(f, "FAIL {v}"),
        }
    }
}

/// Parses and checks a trace. Malformed lines are an error, not a verdict.
pub fn check_trace(text: &str) -> Result<Verdict, ParseError> {
    let mut recs = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        recs.push(parse_line(line, i + 1)?);
        lines.push(i + 1);
    }
    Checker::new(lines).run(&recs)
}

/// Checks records already in memory; record `i` is reported as line `i+1`.
pub fn check_records(recs: &[TraceRecord]) -> Result<Verdict, ParseError> {
    Checker::new((1..=recs.len()).collect()).run(recs)
}

/// Caps the violation list; the first one is what matters.
const MAX_VIOLATIONS: usize = 32;

#[derive(Default)]
struct PerReplica {
    next_slot: Option<u64>,
    decided: BTreeMap<(String, u64), String>,
    seen_cmds: BTreeSet<String>,
    validated: BTreeMap<String, (String, u64)>,
    first_occurrence: BTreeMap<String, (String, u64, usize)>,
    validated_occ: BTreeSet<(String, String, u64)>,
    invalidated_occ: BTreeSet<(String, String, u64)>,
    pending_invalidations: BTreeMap<String, BTreeSet<(String, u64)>>,
    discarded: BTreeSet<String>,
    resolved: BTreeMap<String, (String, String)>,
    proposed: BTreeSet<(String, String, u64)>,
    p1done: BTreeSet<(String, String)>,
}

struct Checker {
    lines: Vec<usize>,
    violations: Vec<Violation>,
    stats: TraceStats,
    trunk: BTreeMap<u64, (String, ProcessId)>,
    decisions: BTreeMap<(String, u64), String>,
    clients: BTreeSet<String>,
    initiated: BTreeSet<String>,
    replicas: BTreeMap<ProcessId, PerReplica>,
    /// (from, to) -> max over replicas of user decisions in `to` before merge.
    merges: BTreeMap<(String, String), u64>,
    finals: BTreeMap<u64, (String, ProcessId)>,
}

fn field<'a>(r: &'a TraceRecord, key: &str, line: usize) -> Result<&'a str, ParseError> {
    r.get(key).ok_or_else(|| ParseError {
        line,
        reason: format!("{} record without {key}=", r.kind),
    })
}

fn num(r: &TraceRecord, key: &str, line: usize) -> Result<u64, ParseError> {
    r.field::<u64>(key).map_err(|reason| ParseError { line, reason })
}

fn bid_of(s: &str, line: usize) -> Result<BranchId, ParseError> {
    s.parse().map_err(|_| ParseError {
        line,
        reason: format!("bad branch id {s:?}"),
    })
}

/// The branch a `recon:` token spawns.
fn recon_branch(token: &str) -> Option<&str> {
    let rest = token.strip_prefix("recon:")?;
    let end = rest.find(')')?;
    Some(&rest[..=end])
}

fn user_id(token: &str) -> Option<&str> {
    token.strip_prefix("user:")
}

impl Checker {
    fn new(lines: Vec<usize>) -> Self {
        Checker {
            lines,
            violations: Vec::new(),
            stats: TraceStats::default(),
            trunk: BTreeMap::new(),
            decisions: BTreeMap::new(),
            clients: BTreeSet::new(),
            initiated: BTreeSet::new(),
            replicas: BTreeMap::new(),
            merges: BTreeMap::new(),
            finals: BTreeMap::new(),
        }
    }

    fn fail(&mut self, index: usize, rule: &'static str, detail: String) {
        if self.violations.len() < MAX_VIOLATIONS {
            self.violations.push(Violation {
                index,
                line: self.lines[index],
                rule,
                detail,
            });
        }
    }

    fn run(mut self, recs: &[TraceRecord]) -> Result<Verdict, ParseError> {
        for (i, r) in recs.iter().enumerate() {
            self.stats.ticks = self.stats.ticks.max(r.tick);
            self.record(i, r)?;
        }
        self.finish(recs.len());
        if self.stats.decisions > 0 {
            self.stats.msgs_per_decision = self.stats.msgs as f64 / self.stats.decisions as f64;
        }
        self.stats.merges = self.merges.len() as u64;
        self.stats.speculative_k = self.merges.values().sum();
        Ok(Verdict {
            violations: self.violations,
            stats: self.stats,
        })
    }

    fn record(&mut self, i: usize, r: &TraceRecord) -> Result<(), ParseError> {
        let line = self.lines[i];
        let Some(p) = r.replica else {
            return self.harness_record(r, line);
        };
        match r.kind.as_str() {
            "recover" => {
                let n = num(r, "trunk", line)?;
                let st = self.replicas.entry(p).or_default();
                st.next_slot = Some(n);
                // a restarted replica starts branch bookkeeping afresh
                st.resolved.clear();
                st.pending_invalidations.clear();
            }
            "recon" => {
                let x = field(r, "x", line)?;
                bid_of(x, line)?;
                self.initiated.insert(x.to_string());
            }
            "decide" => self.on_decide(i, r, p, line)?,
            "trunk" => self.on_trunk(i, r, p, line)?,
            "validate" | "invalidate" | "speculative" => self.on_notification(i, r, p, line)?,
            "discard" => self.on_discard(i, r, p, line)?,
            "status" => self.on_status(i, r, p, line)?,
            "merge" => {
                let from = field(r, "from", line)?.to_string();
                let to = field(r, "to", line)?.to_string();
                let st = self.replicas.entry(p).or_default();
                let k = st
                    .decided
                    .iter()
                    .filter(|((b, _), c)| *b == to && user_id(c).is_some())
                    .count() as u64;
                let e = self.merges.entry((from, to)).or_insert(0);
                *e = (*e).max(k);
            }
            "propose" | "repropose" | "retx" => self.on_propose(i, r, p, line)?,
            "prepare" => {
                let bid = field(r, "bid", line)?.to_string();
                let bal = field(r, "ballot", line)?.to_string();
                if self.replicas.entry(p).or_default().p1done.contains(&(bid.clone(), bal.clone())) {
                    self.fail(i, "prepare-after-phase1", format!("{p} prepares {bid} at {bal} again"));
                }
            }
            "p1done" => {
                let bid = field(r, "bid", line)?.to_string();
                let bal = field(r, "ballot", line)?.to_string();
                self.replicas.entry(p).or_default().p1done.insert((bid, bal));
            }
            "final" => {
                let n = num(r, "trunk", line)?;
                let d = field(r, "digest", line)?.to_string();
                if let Some((other, q)) = self.finals.get(&n) {
                    if *other != d {
                        let msg = format!("{p} and {q} hold {n} entries with digests {d} and {other}");
                        self.fail(i, "digest", msg);
                    }
                } else {
                    self.finals.insert(n, (d, p));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn harness_record(&mut self, r: &TraceRecord, line: usize) -> Result<(), ParseError> {
        match r.kind.as_str() {
            "client" => {
                self.clients.insert(field(r, "cmd", line)?.to_string());
            }
            "stats" => self.stats.msgs = num(r, "msgs", line)?,
            "end" => self.stats.outcome = Some(field(r, "outcome", line)?.to_string()),
            _ => {}
        }
        Ok(())
    }

    fn on_decide(&mut self, i: usize, r: &TraceRecord, p: ProcessId, line: usize) -> Result<(), ParseError> {
        let bid = field(r, "bid", line)?.to_string();
        let slot = num(r, "slot", line)?;
        let cmd = field(r, "cmd", line)?.to_string();
        let st = self.replicas.entry(p).or_default();
        let after_discard = st.discarded.contains(&bid);
        let prior = st.decided.insert((bid.clone(), slot), cmd.clone());
        if after_discard {
            self.fail(i, "decide-after-discard", format!("{p} decides {bid}@{slot} after discarding it"));
        }
        if let Some(prev) = prior {
            if prev != cmd {
                self.fail(i, "local-agreement", format!("{p} decided {bid}@{slot} as {prev} then {cmd}"));
            }
        }
        match self.decisions.get(&(bid.clone(), slot)) {
            Some(c) if *c != cmd => {
                self.fail(i, "branch-agreement", format!("{bid}@{slot}: {c} vs {cmd} at {p}"));
            }
            Some(_) => {}
            None => {
                self.decisions.insert((bid.clone(), slot), cmd.clone());
            }
        }
        if let Some(id) = user_id(&cmd) {
            if !self.clients.contains(id) {
                self.fail(i, "validity", format!("{p} decides {id}, which no client issued"));
            }
        } else if let Some(x) = recon_branch(&cmd) {
            if !self.initiated.contains(x) {
                self.fail(i, "validity", format!("{p} decides a RECON for {x}, which nobody initiated"));
            }
        }
        Ok(())
    }

    fn on_trunk(&mut self, i: usize, r: &TraceRecord, p: ProcessId, line: usize) -> Result<(), ParseError> {
        let slot = num(r, "slot", line)?;
        let cmd = field(r, "cmd", line)?.to_string();
        let bid = field(r, "bid", line)?.to_string();
        let src = field(r, "src", line)?;
        self.stats.decisions = self.stats.decisions.max(slot);

        let st = self.replicas.entry(p).or_default();
        let expect = st.next_slot.unwrap_or(1);
        st.next_slot = Some(slot + 1);
        let first = user_id(&cmd).is_some() && st.seen_cmds.insert(cmd.clone());
        if first {
            st.first_occurrence.insert(cmd.clone(), (bid.clone(), slot, i));
        }
        if slot != expect {
            self.fail(i, "contiguity", format!("{p} appends slot {slot}, expected {expect}"));
        }
        if src == "engine" {
            match self.decisions.get(&(bid.clone(), slot)) {
                Some(c) if *c == cmd => {}
                Some(c) => {
                    let msg = format!("{p} trunk {slot} = {cmd} but {bid} decided {c}");
                    self.fail(i, "trunk-source", msg);
                }
                None => {
                    let msg = format!("{p} trunk {slot} = {cmd} from {bid}, never decided");
                    self.fail(i, "trunk-source", msg);
                }
            }
        }
        match self.trunk.get(&slot) {
            Some((c, q)) if *c != cmd => {
                let msg = format!("slot {slot}: {q} has {c}, {p} has {cmd}");
                self.fail(i, "agreement", msg);
            }
            Some(_) => {}
            None => {
                if user_id(&cmd).is_some() {
                    self.stats.user_decisions += 1;
                }
                self.trunk.insert(slot, (cmd, p));
            }
        }
        Ok(())
    }

    fn on_notification(&mut self, i: usize, r: &TraceRecord, p: ProcessId, line: usize) -> Result<(), ParseError> {
        let cmd = format!("user:{}", field(r, "cmd", line)?);
        let bid = field(r, "bid", line)?.to_string();
        let slot = num(r, "slot", line)?;
        let st = self.replicas.entry(p).or_default();
        let occ = (cmd.clone(), bid.clone(), slot);
        let mut errs: Vec<(&'static str, String)> = Vec::new();
        match r.kind.as_str() {
            "validate" => {
                if let Some((b, s)) = st.validated.get(&cmd) {
                    errs.push(("validate-once", format!("{p} validates {cmd} again (first at {b}@{s})")));
                }
                match st.first_occurrence.get(&cmd) {
                    Some((b, s, _)) if *b == bid && *s == slot => {}
                    other => errs.push((
                        "validate-first",
                        format!("{p} validates {cmd} at {bid}@{slot}, first trunk occurrence {other:?}"),
                    )),
                }
                st.validated.insert(cmd.clone(), (bid.clone(), slot));
                if st.invalidated_occ.contains(&occ) {
                    errs.push(("notify-both", format!("{p}: {cmd} at {bid}@{slot} was invalidated")));
                }
                st.validated_occ.insert(occ);
            }
            "invalidate" => {
                if st.validated_occ.contains(&occ) {
                    errs.push(("notify-both", format!("{p}: {cmd} at {bid}@{slot} was validated")));
                }
                st.invalidated_occ.insert(occ);
                st.pending_invalidations.entry(bid).or_default().insert((cmd, slot));
            }
            _ => {
                if st.decided.get(&(bid.clone(), slot)) != Some(&cmd) {
                    errs.push(("speculative", format!("{p}: {cmd} not decided at {bid}@{slot}")));
                }
            }
        }
        for (rule, msg) in errs {
            self.fail(i, rule, msg);
        }
        Ok(())
    }

    fn on_discard(&mut self, i: usize, r: &TraceRecord, p: ProcessId, line: usize) -> Result<(), ParseError> {
        let bid = field(r, "bid", line)?.to_string();
        let merged = match field(r, "merged", line)? {
            "-" => None,
            _ => Some(num(r, "merged", line)?),
        };
        let n = num(r, "invalidated", line)?;
        let st = self.replicas.entry(p).or_default();
        st.discarded.insert(bid.clone());
        let got = st.pending_invalidations.remove(&bid).unwrap_or_default();
        let want: BTreeSet<(String, u64)> = st
            .decided
            .iter()
            .filter(|((b, s), c)| *b == bid && user_id(c).is_some() && merged.is_none_or(|m| *s > m))
            .map(|((_, s), c)| (c.clone(), *s))
            .collect();
        if got != want || got.len() as u64 != n {
            let msg = format!("{p} discards {bid}: invalidated {got:?}, expected {want:?}");
            self.fail(i, "invalidate-set", msg);
        }
        Ok(())
    }

    fn on_status(&mut self, i: usize, r: &TraceRecord, p: ProcessId, line: usize) -> Result<(), ParseError> {
        let bid = field(r, "bid", line)?.to_string();
        let parent = field(r, "parent", line)?.to_string();
        let status = field(r, "status", line)?.to_string();
        bid_of(&bid, line)?;
        let st = self.replicas.entry(p).or_default();
        if let Some((_, prev)) = st.resolved.insert(bid.clone(), (parent, status.clone())) {
            self.fail(i, "status-once", format!("{p} resolves {bid} as {prev} then {status}"));
        }
        Ok(())
    }

    fn on_propose(&mut self, i: usize, r: &TraceRecord, p: ProcessId, line: usize) -> Result<(), ParseError> {
        let bid = field(r, "bid", line)?.to_string();
        let slot = num(r, "slot", line)?;
        let bal = field(r, "ballot", line)?.to_string();
        let kind = r.kind.as_str();
        match kind {
            "propose" => self.stats.proposals += 1,
            "repropose" => self.stats.reproposals += 1,
            _ => {}
        }
        let st = self.replicas.entry(p).or_default();
        let decided = st.decided.contains_key(&(bid.clone(), slot));
        let dup = kind != "retx" && !st.proposed.insert((bid.clone(), bal.clone(), slot));
        if decided {
            self.fail(i, "propose-decided", format!("{p} sends {kind} for {bid}@{slot}, already decided"));
        }
        if dup {
            self.fail(i, "propose-once", format!("{p} proposes {bid}@{slot} twice at {bal}"));
        }
        Ok(())
    }

    fn finish(&mut self, end: usize) {
        let last = end.saturating_sub(1);
        let mut errs: Vec<(usize, &'static str, String)> = Vec::new();
        for (p, st) in &self.replicas {
            for (cmd, (bid, slot, at)) in &st.first_occurrence {
                if !st.validated.contains_key(cmd) {
                    errs.push((*at, "validate-missing", format!("{p} never validates {cmd} ({bid}@{slot})")));
                }
            }
            for (bid, (parent, status)) in &st.resolved {
                let Ok(b) = bid.parse::<BranchId>() else { continue };
                let Some(cmd) = self.decisions.get(&(parent.clone(), b.slot_num)) else {
                    continue;
                };
                let valid = recon_branch(cmd) == Some(bid.as_str());
                if valid != (status == "VALID") {
                    let msg = format!("{p} marks {bid} {status} but {parent} decided {cmd} at {}", b.slot_num);
                    errs.push((last, "status", msg));
                }
            }
        }
        errs.sort_by_key(|e| e.0);
        for (at, rule, msg) in errs {
            if end > 0 {
                self.fail(at, rule, msg);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OK: &str = "\
0\t-\tclient\tcmd=c1#1 payload=a
1\tp1\tpropose\tbid=(0,0.1,p1) slot=1 ballot=0.1 cmd=user:c1#1
3\tp1\tdecide\tbid=(0,0.1,p1) slot=1 cmd=user:c1#1
3\tp1\ttrunk\tslot=1 cmd=user:c1#1 bid=(0,0.1,p1) src=engine
3\tp1\tvalidate\tcmd=c1#1 bid=(0,0.1,p1) slot=1
5\tp2\ttrunk\tslot=1 cmd=user:c1#1 bid=(0,0.1,p1) src=xfer
5\tp2\tvalidate\tcmd=c1#1 bid=(0,0.1,p1) slot=1
";

    #[test]
    fn accepts_a_clean_trace() {
        let v = check_trace(OK).unwrap();
        assert!(v.passed(), "{v}");
        assert_eq!(v.stats.decisions, 1);
    }

    #[test]
    fn disagreement_points_at_the_line() {
        let bad = OK.replace("5\tp2\ttrunk\tslot=1 cmd=user:c1#1", "5\tp2\ttrunk\tslot=1 cmd=user:c1#9");
        let v = check_trace(&bad).unwrap();
        assert_eq!(v.first().unwrap().rule, "agreement");
        assert_eq!(v.first().unwrap().line, 6);
    }

    #[test]
    fn missing_validate_fails() {
        let bad: String = OK.lines().take(6).map(|l| format!("{l}\n")).collect();
        let v = check_trace(&bad).unwrap();
        assert_eq!(v.first().unwrap().rule, "validate-missing");
    }

    #[test]
    fn gaps_fail() {
        let bad = OK.replace("5\tp2\ttrunk\tslot=1", "5\tp2\ttrunk\tslot=2");
        let v = check_trace(&bad).unwrap();
        assert!(v.violations.iter().any(|x| x.rule == "contiguity"));
    }

    #[test]
    fn repropose_of_decided_slot_fails() {
        let bad = format!("{OK}6\tp1\tretx\tbid=(0,0.1,p1) slot=1 ballot=0.1 cmd=user:c1#1\n");
        let v = check_trace(&bad).unwrap();
        assert_eq!(v.first().unwrap().rule, "propose-decided");
    }

    #[test]
    fn malformed_is_an_error() {
        assert!(check_trace("3\tp1\tdecide\tbid=(0,0.1,p1) cmd=x\n").is_err());
        assert!(check_trace("x\tp1\tdecide\n").is_err());
    }
}
