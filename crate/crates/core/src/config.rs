//! Cohort membership, leader selection, failure detection and the pluggable
//! reconfiguration policy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::types::{Configuration, ProcessId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("every cohort member is suspected")]
    NoLeader,
    #[error("policy proposed {proposed}, which is not drawn from the group")]
    PolicyViolation { proposed: Configuration },
}

/// The minimum unsuspected member of `cohort`.
pub fn select_leader(
    cohort: &Configuration,
    suspected: &BTreeSet<ProcessId>,
) -> Result<ProcessId, ConfigError> {
    cohort
        .members()
        .find(|m| !suspected.contains(m))
        .ok_or(ConfigError::NoLeader)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupView {
    pub group_members: BTreeSet<ProcessId>,
    pub cohort: Configuration,
    pub leader: ProcessId,
    pub suspected: BTreeSet<ProcessId>,
}

impl GroupView {
    pub fn new(
        group_members: BTreeSet<ProcessId>,
        cohort: Configuration,
        suspected: BTreeSet<ProcessId>,
    ) -> Result<Self, ConfigError> {
        let leader = select_leader(&cohort, &suspected)?;
        Ok(GroupView {
            group_members,
            cohort,
            leader,
            suspected,
        })
    }

    pub fn idle_members(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.group_members
            .iter()
            .copied()
            .filter(|m| !self.cohort.contains(*m))
    }
}

/// Inputs to a policy besides the view.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PolicyStats {
    pub tick: u64,
    pub trunk_len: u64,
    /// A reconfiguration initiated here is still unresolved.
    pub recon_pending: bool,
}

pub trait ReconPolicy: Send + Sync {
    fn name(&self) -> &'static str;
    fn propose(&self, view: &GroupView, stats: &PolicyStats) -> Option<Configuration>;
}

/// Reconfigurations only come from explicit scenario events.
#[derive(Debug, Clone, Copy, Default)]
pub struct ManualPolicy;

impl ReconPolicy for ManualPolicy {
    fn name(&self) -> &'static str {
        "manual"
    }
    fn propose(&self, _: &GroupView, _: &PolicyStats) -> Option<Configuration> {
        None
    }
}

/// Swaps every suspected cohort member for the smallest unsuspected idle
/// member. Does nothing when no replacement is available.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReplaceSuspected;

impl ReconPolicy for ReplaceSuspected {
    fn name(&self) -> &'static str {
        "replace-suspected"
    }
    fn propose(&self, view: &GroupView, stats: &PolicyStats) -> Option<Configuration> {
        if stats.recon_pending {
            return None;
        }
        let dead: Vec<ProcessId> = view
            .cohort
            .members()
            .filter(|m| view.suspected.contains(m))
            .collect();
        if dead.is_empty() {
            return None;
        }
        let mut spares = view.idle_members().filter(|m| !view.suspected.contains(m));
        let mut members: BTreeSet<ProcessId> = view.cohort.member_set().clone();
        let mut changed = false;
        for d in dead {
            if let Some(s) = spares.next() {
                members.remove(&d);
                members.insert(s);
                changed = true;
            }
        }
        changed.then(|| Configuration::new(members).expect("non-empty"))
    }
}

/// Grows or shrinks the cohort to `target` members, recruiting idle members
/// in id order and retiring the largest non-leader ids.
#[derive(Debug, Clone, Copy)]
pub struct ScaleTo(pub usize);

impl ReconPolicy for ScaleTo {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn propose(&self, view: &GroupView, stats: &PolicyStats) -> Option<Configuration> {
        let target = self.0.max(1);
        if stats.recon_pending || view.cohort.len() == target {
            return None;
        }
        let mut members: BTreeSet<ProcessId> = view.cohort.member_set().clone();
        if members.len() < target {
            let spares: Vec<ProcessId> = view
                .idle_members()
                .filter(|m| !view.suspected.contains(m))
                .collect();
            for s in spares {
                if members.len() == target {
                    break;
                }
                members.insert(s);
            }
        } else {
            while members.len() > target {
                let victim = members
                    .iter()
                    .rev()
                    .copied()
                    .find(|m| *m != view.leader)
                    .expect("more than one member");
                members.remove(&victim);
            }
        }
        let c = Configuration::new(members).expect("non-empty");
        (c != view.cohort).then_some(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Manual,
    ReplaceSuspected,
    ScaleTo(usize),
}

impl PolicyKind {
    pub fn build(self) -> Box<dyn ReconPolicy> {
        match self {
            PolicyKind::Manual => Box::new(ManualPolicy),
            PolicyKind::ReplaceSuspected => Box::new(ReplaceSuspected),
            PolicyKind::ScaleTo(n) => Box::new(ScaleTo(n)),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::Manual => f.write_str("manual"),
            PolicyKind::ReplaceSuspected => f.write_str("replace-suspected"),
            PolicyKind::ScaleTo(n) => write!(f, "scale {n}"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut it = s.split_whitespace();
        match (it.next(), it.next()) {
            (Some("manual"), None) => Ok(PolicyKind::Manual),
            (Some("replace-suspected"), None) => Ok(PolicyKind::ReplaceSuspected),
            (Some("scale"), Some(n)) => n
                .parse()
                .map(PolicyKind::ScaleTo)
                .map_err(|_| format!("bad scale target {n:?}")),
            _ => Err(format!("unknown policy {s:?}")),
        }
    }
}

/// Runs the policy and validates its output. `Ok(None)` means no change.
pub fn evaluate_policy(
    policy: &dyn ReconPolicy,
    view: &GroupView,
    stats: &PolicyStats,
) -> Result<Option<Configuration>, ConfigError> {
    let Some(proposed) = policy.propose(view, stats) else {
        return Ok(None);
    };
    if proposed == view.cohort {
        return Ok(None);
    }
    if !proposed.is_subset(&view.group_members) {
        return Err(ConfigError::PolicyViolation { proposed });
    }
    Ok(Some(proposed))
}

/// Heartbeat-based failure detector: a peer is suspected once nothing has
/// been heard from it for `missed` heartbeat periods.
#[derive(Debug, Clone)]
pub struct FailureDetector {
    period: u64,
    missed: u64,
    last_heard: BTreeMap<ProcessId, u64>,
}

impl FailureDetector {
    pub fn new(peers: impl IntoIterator<Item = ProcessId>, period: u64, missed: u64, now: u64) -> Self {
        FailureDetector {
            period,
            missed,
            last_heard: peers.into_iter().map(|p| (p, now)).collect(),
        }
    }

    pub fn heard(&mut self, from: ProcessId, now: u64) {
        self.last_heard.insert(from, now);
    }

    pub fn suspected(&self, now: u64) -> BTreeSet<ProcessId> {
        let limit = self.period * self.missed;
        self.last_heard
            .iter()
            .filter(|(_, t)| now.saturating_sub(**t) > limit)
            .map(|(p, _)| *p)
            .collect()
    }
}

/// Cohort and leader as last advertised by a leader, tagged with the trunk
/// slot of the RECON that installed the cohort.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewRecord {
    pub epoch: u64,
    pub cohort: Configuration,
    pub leader: ProcessId,
}

impl fmt::Display for ViewRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} cohort={} leader={}",
            self.epoch, self.cohort, self.leader
        )
    }
}

/// In-process stand-in for an external name service: maps the group to its
/// last advertised cohort and leader. Older epochs never overwrite newer.
#[derive(Debug, Clone)]
pub struct Registry {
    view: ViewRecord,
}

impl Registry {
    pub fn new(c0: &Configuration) -> Self {
        Registry {
            view: ViewRecord {
                epoch: 0,
                cohort: c0.clone(),
                leader: c0.min_member(),
            },
        }
    }

    pub fn publish(&mut self, v: &ViewRecord) -> bool {
        if v.epoch >= self.view.epoch && *v != self.view {
            self.view = v.clone();
            return true;
        }
        false
    }

    pub fn lookup(&self) -> &ViewRecord {
        &self.view
    }
}
