//! Value types shared by every layer of the replica: process ids, ballots,
//! configurations, commands and branch identifiers.
//!
//! Everything here is immutable once built and has a canonical textual form
//! that is used verbatim in traces, so `Display` and `FromStr` must stay in
//! sync.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeError {
    #[error("configuration has no members")]
    EmptyConfiguration,
    #[error("cannot parse {what} from {input:?}")]
    Parse { what: &'static str, input: String },
}

fn parse_err(what: &'static str, input: &str) -> TypeError {
    TypeError::Parse {
        what,
        input: input.to_string(),
    }
}

/// Identity of a replica (or of a client, in `CommandId`).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ProcessId(pub u32);

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

impl FromStr for ProcessId {
    type Err = TypeError;

    /// Accepts `p3`, `c3` or a bare `3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s
            .strip_prefix('p')
            .or_else(|| s.strip_prefix('c'))
            .unwrap_or(s);
        digits
            .parse()
            .map(ProcessId)
            .map_err(|_| parse_err("process id", s))
    }
}

/// Proposal number. Ordered by round, then by proposer, so ballots issued by
/// distinct processes never compare equal.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Ballot {
    pub round: u64,
    pub proposer: ProcessId,
}

impl Ballot {
    pub fn new(round: u64, proposer: ProcessId) -> Self {
        Ballot { round, proposer }
    }

    /// The smallest ballot owned by `proposer` that is strictly above `self`.
    pub fn next_for(&self, proposer: ProcessId) -> Ballot {
        Ballot::new(self.round + 1, proposer)
    }
}

pub fn ballot_less(a: Ballot, b: Ballot) -> bool {
    (a.round, a.proposer) < (b.round, b.proposer)
}

impl fmt::Display for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.round, self.proposer.0)
    }
}

impl FromStr for Ballot {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, p) = s.split_once('.').ok_or_else(|| parse_err("ballot", s))?;
        Ok(Ballot {
            round: r.parse().map_err(|_| parse_err("ballot", s))?,
            proposer: p.parse().map_err(|_| parse_err("ballot", s))?,
        })
    }
}

/// A non-empty ordered set of members.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Configuration {
    members: BTreeSet<ProcessId>,
}

impl Configuration {
    pub fn new<I: IntoIterator<Item = ProcessId>>(members: I) -> Result<Self, TypeError> {
        let members: BTreeSet<_> = members.into_iter().collect();
        if members.is_empty() {
            return Err(TypeError::EmptyConfiguration);
        }
        Ok(Configuration { members })
    }

    /// Convenience for tests and scenarios: `Configuration::of(&[1, 2, 3])`.
    pub fn of(ids: &[u32]) -> Self {
        Configuration::new(ids.iter().copied().map(ProcessId)).expect("non-empty member list")
    }

    pub fn members(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.members.iter().copied()
    }

    pub fn member_set(&self) -> &BTreeSet<ProcessId> {
        &self.members
    }

    pub fn contains(&self, p: ProcessId) -> bool {
        self.members.contains(&p)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Simple majority.
    pub fn quorum_size(&self) -> usize {
        self.members.len() / 2 + 1
    }

    pub fn min_member(&self) -> ProcessId {
        *self.members.iter().next().expect("configuration is never empty")
    }

    pub fn is_subset(&self, other: &BTreeSet<ProcessId>) -> bool {
        self.members.is_subset(other)
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, m) in self.members.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{m}")?;
        }
        Ok(())
    }
}

impl FromStr for Configuration {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let members = s
            .split(',')
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<ProcessId>, _>>()?;
        Configuration::new(members)
    }
}

/// Client-assigned identity of a user command.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct CommandId {
    pub client: ProcessId,
    pub sequence: u64,
}

impl CommandId {
    pub fn new(client: u32, sequence: u64) -> Self {
        CommandId {
            client: ProcessId(client),
            sequence,
        }
    }
}

impl fmt::Display for CommandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}#{}", self.client.0, self.sequence)
    }
}

impl FromStr for CommandId {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (c, n) = s.split_once('#').ok_or_else(|| parse_err("command id", s))?;
        Ok(CommandId {
            client: c.parse()?,
            sequence: n.parse().map_err(|_| parse_err("command id", s))?,
        })
    }
}

/// Identifier of a speculative branch: the slot of the spawning RECON in the
/// parent branch, the ballot it was proposed under, and the proposing leader.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct BranchId {
    pub slot_num: u64,
    pub bal: Ballot,
    pub initiator: ProcessId,
}

impl BranchId {
    pub fn new(slot_num: u64, bal: Ballot, initiator: ProcessId) -> Self {
        BranchId {
            slot_num,
            bal,
            initiator,
        }
    }

    /// First global slot ordered by this branch.
    pub fn first_slot(&self) -> u64 {
        self.slot_num + 1
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.slot_num, self.bal, self.initiator)
    }
}

impl FromStr for BranchId {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = s
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| parse_err("branch id", s))?;
        let mut parts = inner.split(',');
        let (Some(slot), Some(bal), Some(init), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(parse_err("branch id", s));
        };
        Ok(BranchId {
            slot_num: slot.parse().map_err(|_| parse_err("branch id", s))?,
            bal: bal.parse()?,
            initiator: init.parse()?,
        })
    }
}

/// The root branch id: slot 0, ballot `(0, q)`, initiator `q`, where `q` is
/// the smallest member of the initial configuration.
pub fn initial_branch_id(c0: &Configuration) -> BranchId {
    let q = c0.min_member();
    BranchId::new(0, Ballot::new(0, q), q)
}

/// Same as [`initial_branch_id`] but starting from a raw member list.
pub fn initial_branch_id_of<I: IntoIterator<Item = ProcessId>>(
    members: I,
) -> Result<BranchId, TypeError> {
    Ok(initial_branch_id(&Configuration::new(members)?))
}

/// A log entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Command {
    User {
        id: CommandId,
        payload: Vec<u8>,
    },
    /// Reconfiguration to `config`, spawning branch `branch` out of `parent`.
    /// The initial trunk entry is the only RECON without a parent.
    Recon {
        parent: Option<BranchId>,
        branch: BranchId,
        config: Configuration,
    },
    Noop,
}

impl Command {
    pub fn user(id: CommandId, payload: impl Into<Vec<u8>>) -> Self {
        Command::User {
            id,
            payload: payload.into(),
        }
    }

    pub fn user_id(&self) -> Option<CommandId> {
        match self {
            Command::User { id, .. } => Some(*id),
            _ => None,
        }
    }

    pub fn is_recon(&self) -> bool {
        matches!(self, Command::Recon { .. })
    }

    /// Trace token. Payloads are omitted; ids are unique.
    pub fn token(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::User { id, .. } => write!(f, "user:{id}"),
            Command::Recon { branch, config, .. } => write!(f, "recon:{branch}:{config}"),
            Command::Noop => f.write_str("noop"),
        }
    }
}
