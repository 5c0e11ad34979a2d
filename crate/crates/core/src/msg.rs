//! Everything replicas say to each other over the simulated network.

use crate::config::ViewRecord;
use crate::paxos::PaxosMsg;
use crate::types::{BranchId, Command, Configuration, ProcessId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferRequest {
    pub requester: ProcessId,
    pub branch: BranchId,
    /// First trunk slot the requester is missing.
    pub have_upto: u64,
    /// Trunk length the requester is trying to reach.
    pub want_upto: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferReply {
    pub branch: BranchId,
    /// Contiguous ascending trunk entries starting at the request's
    /// `have_upto`.
    pub entries: Vec<(u64, Command)>,
    /// The responder had nothing beyond the last entry.
    pub complete: bool,
    /// Responder's trunk length.
    pub trunk_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetMsg {
    Paxos {
        bid: BranchId,
        msg: PaxosMsg,
    },
    Join {
        parent: BranchId,
        branch: BranchId,
        config: Configuration,
        /// Configuration of the parent branch, so receivers can tell whether
        /// they are new members that need the trunk prefix.
        parent_config: Configuration,
    },
    JoinAck {
        branch: BranchId,
    },
    Heartbeat {
        trunk_len: u64,
    },
    View(ViewRecord),
    TransferRequest(TransferRequest),
    TransferReply(TransferReply),
    DecisionRequest {
        bid: BranchId,
        from_slot: u64,
    },
    DecisionReply {
        bid: BranchId,
        entries: Vec<(u64, Command)>,
        leader_first_undecided: u64,
    },
}

impl NetMsg {
    pub fn kind(&self) -> &'static str {
        match self {
            NetMsg::Paxos { msg, .. } => msg.kind(),
            NetMsg::Join { .. } => "JOIN",
            NetMsg::JoinAck { .. } => "JOIN_ACK",
            NetMsg::Heartbeat { .. } => "HEARTBEAT",
            NetMsg::View(_) => "VIEW",
            NetMsg::TransferRequest(_) => "XFER_REQ",
            NetMsg::TransferReply(_) => "XFER_REPLY",
            NetMsg::DecisionRequest { .. } => "DEC_REQ",
            NetMsg::DecisionReply { .. } => "DEC_REPLY",
        }
    }

    /// Failure detection and view dissemination.
    pub fn is_control(&self) -> bool {
        matches!(self, NetMsg::Heartbeat { .. } | NetMsg::View(_))
    }

    /// Branch the message is about, if any.
    pub fn branch(&self) -> Option<BranchId> {
        match self {
            NetMsg::Paxos { bid, .. }
            | NetMsg::DecisionRequest { bid, .. }
            | NetMsg::DecisionReply { bid, .. } => Some(*bid),
            NetMsg::Join { branch, .. }
            | NetMsg::JoinAck { branch }
            | NetMsg::TransferReply(TransferReply { branch, .. })
            | NetMsg::TransferRequest(TransferRequest { branch, .. }) => Some(*branch),
            NetMsg::Heartbeat { .. } | NetMsg::View(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub from: ProcessId,
    pub to: ProcessId,
    pub msg: NetMsg,
}
