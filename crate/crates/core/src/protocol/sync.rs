//! Coordination floods.
//!
//! When a member discovers a new node, it announces the change to its whole
//! segment so every member can adjust its HELLO rate and join the welcome
//! burst. The announcement travels hop by hop over known links only; each
//! member forwards a given flood once, relaying to every known-link neighbor
//! except the one it heard it from.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::protocol::message::SyncDirective;
use crate::protocol::segment::Segment;
use crate::protocol::ProtocolError;
use crate::topology::NodeId;

/// The reach of one flood: which member hears it at which hop, and who
/// transmits to whom. Forwarding order is deterministic (ascending neighbor
/// id), so the plan doubles as a replayable schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FloodPlan {
    pub origin: NodeId,
    pub seq: u64,
    /// Hop count at which each member first hears the flood; the origin is
    /// at hop 0.
    pub deliveries: BTreeMap<NodeId, u32>,
    /// Every (sender, receiver) relay, in breadth-first issue order.
    pub transmissions: Vec<(NodeId, NodeId)>,
}

impl FloodPlan {
    /// Hops needed until the last member hears the flood.
    pub fn depth(&self) -> u32 {
        self.deliveries.values().copied().max().unwrap_or(0)
    }
}

/// Plans the flood a discovery at `origin` triggers across `segment`:
/// breadth-first over known links, every member forwarding once to all its
/// link neighbors except its parent.
pub fn issue_sync(origin: NodeId, seq: u64, segment: &Segment) -> Result<FloodPlan, ProtocolError> {
    if !segment.members.contains(&origin) {
        return Err(ProtocolError::NotAMember {
            node: origin,
            segment: segment.id,
        });
    }
    let mut deliveries: BTreeMap<NodeId, u32> = BTreeMap::new();
    let mut transmissions = Vec::new();
    deliveries.insert(origin, 0);
    let mut queue: VecDeque<(NodeId, Option<NodeId>, u32)> = VecDeque::new();
    queue.push_back((origin, None, 0));
    while let Some((at, parent, hop)) = queue.pop_front() {
        // link_neighbors is derived from a BTreeSet of pairs, so relays go
        // out in ascending id order.
        for peer in segment.link_neighbors(at) {
            if Some(peer) == parent {
                continue;
            }
            transmissions.push((at, peer));
            if let std::collections::btree_map::Entry::Vacant(slot) = deliveries.entry(peer) {
                slot.insert(hop + 1);
                queue.push_back((peer, Some(at), hop + 1));
            }
        }
    }
    Ok(FloodPlan {
        origin,
        seq,
        deliveries,
        transmissions,
    })
}

/// Per-node duplicate filter: a member forwards a flood only the first time
/// it hears a given (origin, seq).
#[derive(Debug, Clone, Default)]
pub struct SyncDedup {
    seen: BTreeSet<(NodeId, u64)>,
}

impl SyncDedup {
    pub fn new() -> SyncDedup {
        SyncDedup::default()
    }

    /// Returns true exactly once per (origin, seq).
    pub fn should_process(&mut self, directive: &SyncDirective) -> bool {
        self.seen.insert((directive.origin, directive.seq))
    }
}
