//! Over-the-air message types.

use serde::{Deserialize, Serialize};

use crate::protocol::schedule::ScheduleSummary;
use crate::protocol::segment::SegmentId;
use crate::protocol::Phase;
use crate::time::{SimDuration, SimTime};
use crate::topology::NodeId;

/// Message family, used for accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Hello,
    Sync,
}

/// Everything a HELLO announces about its sender. A HELLO with `reply_to`
/// set is the unicast acknowledgment half of the discovery handshake and is
/// only processed by the addressee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HelloPayload {
    pub phase: Phase,
    pub segment: Option<SegmentId>,
    pub schedule: ScheduleSummary,
    /// When the sender's current active window closes; a replying node must
    /// land its acknowledgment before this.
    pub window_until: SimTime,
    pub reply_to: Option<NodeId>,
}

/// Coordination directive flooded across a segment after a discovery: every
/// member bursts HELLOs so the hidden links around the newcomer surface
/// quickly. Deduplicated by `(origin, seq)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncDirective {
    pub origin: NodeId,
    pub seq: u64,
    pub segment: SegmentId,
    pub burst_window: SimDuration,
    pub burst_period: SimDuration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    Hello { sender: NodeId, payload: HelloPayload },
    Sync { sender: NodeId, directive: SyncDirective },
}

impl Message {
    pub fn sender(&self) -> NodeId {
        match self {
            Message::Hello { sender, .. } | Message::Sync { sender, .. } => *sender,
        }
    }

    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Hello { .. } => MessageKind::Hello,
            Message::Sync { .. } => MessageKind::Sync,
        }
    }

    /// Unicast addressee, if any; broadcasts return `None`.
    pub fn addressee(&self) -> Option<NodeId> {
        match self {
            Message::Hello { payload, .. } => payload.reply_to,
            Message::Sync { .. } => None,
        }
    }
}
