//! Speculative, reconfigurable state-machine replication.
//!
//! A replicated log is kept as a tree of branches. Each branch runs its own
//! multi-decree Paxos instance over one configuration. A reconfiguration
//! spawns a child branch at the slot where its RECON is proposed, and the
//! child starts deciding commands straight away, before the parent has
//! decided that slot. When the parent decides it, the child is either merged
//! into the trunk (the RECON won) or discarded together with everything it
//! decided.
//!
//! The crate also ships a deterministic simulator ([`sim`]), a trace checker
//! ([`check`]) and a seed sweep ([`sweep`]).

pub mod branch;
pub mod check;
pub mod config;
pub mod msg;
pub mod paxos;
pub mod replica;
pub mod scenario;
pub mod sim;
pub mod state;
pub mod storage;
pub mod sweep;
pub mod trace;
pub mod transfer;
pub mod trunk;
pub mod types;

pub use check::{check_records, check_trace, TraceStats, Verdict, Violation};
pub use replica::{init_idle, init_replica, Replica, ReplicaError, ReplicaOptions};
pub use scenario::{parse_scenario, Scenario, ScenarioError, ScenarioEvent};
pub use sim::{Backend, Outcome, RunResult, SimOptions, Simulation};
pub use sweep::{sweep, sweep_sequential, SweepReport};
pub use trace::{parse_trace, ParseError, TraceRecord};
pub use trunk::{Notification, NotificationKind, NotificationSink};
pub use types::{BranchId, Command, CommandId, Configuration, ProcessId};
