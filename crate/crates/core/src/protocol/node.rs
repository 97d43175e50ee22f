//! Per-node runtime state and the wake/HELLO handlers.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::protocol::message::{HelloPayload, Message};
use crate::protocol::schedule::{ScheduleSummary, WakeSchedule};
use crate::protocol::segment::SegmentId;
use crate::protocol::{Phase, ProtocolError, ProtocolParams};
use crate::time::SimTime;
use crate::topology::NodeId;

/// What a node does upon waking.
#[derive(Debug, Clone, PartialEq)]
pub enum WakeAction {
    /// Transmit a HELLO starting now.
    Broadcast(Message),
    /// Keep the radio listening until the given instant.
    Listen { until: SimTime },
    /// Wake again at the given instant.
    Reschedule { at: SimTime },
}

/// How a node reacts to a HELLO it hears.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HelloReaction {
    /// Known neighbor, consistent state: refresh its schedule and liveness.
    Refresh,
    /// New or out-of-date peer: answer with a handshake acknowledgment.
    /// `purge_stale` is set when an existing record contradicts the HELLO
    /// (the peer has lost its state since we last met) and must be dropped.
    Acknowledge { purge_stale: bool },
}

/// Mutable per-node protocol state.
#[derive(Debug, Clone)]
pub struct NodeRuntime {
    pub id: NodeId,
    pub phase: Phase,
    pub schedule: WakeSchedule,
    /// Peers this node has completed a handshake with.
    pub known_neighbors: BTreeSet<NodeId>,
    /// Wake schedules learned from those peers.
    pub known_schedules: BTreeMap<NodeId, ScheduleSummary>,
    /// Last instant each known neighbor was heard from or confirmed at a
    /// scheduled rendezvous.
    pub last_confirmed: BTreeMap<NodeId, SimTime>,
    pub segment_id: Option<SegmentId>,
    /// While set, the node bursts HELLOs at `burst_period` and listens
    /// continuously.
    pub hello_burst_until: Option<SimTime>,
    /// Assigned load-shared HELLO rate (Hz); `None` while hidden.
    pub hello_rate: Option<f64>,
    /// Invalidates queued wake events when the schedule is replaced.
    pub wake_epoch: u64,
    /// Start of the current Init period, for timeout restarts.
    pub init_anchor: SimTime,
    trial_seed: u64,
    resync_count: u32,
    rng: ChaCha8Rng,
}

fn derive_rng(trial_seed: u64, id: NodeId, resync_count: u32) -> ChaCha8Rng {
    let mix = trial_seed
        ^ (id.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((resync_count as u64) << 48);
    ChaCha8Rng::seed_from_u64(mix)
}

impl NodeRuntime {
    /// A fresh node starts hidden, cycling at the Init period from `now`.
    pub fn new(id: NodeId, trial_seed: u64, params: &ProtocolParams, now: SimTime) -> NodeRuntime {
        NodeRuntime {
            id,
            phase: Phase::Init,
            schedule: WakeSchedule::new(params.t_init, params.active_init, now),
            known_neighbors: BTreeSet::new(),
            known_schedules: BTreeMap::new(),
            last_confirmed: BTreeMap::new(),
            segment_id: None,
            hello_burst_until: None,
            hello_rate: None,
            wake_epoch: 0,
            init_anchor: now,
            trial_seed,
            resync_count: 0,
            rng: derive_rng(trial_seed, id, 0),
        }
    }

    pub fn is_bursting(&self, now: SimTime) -> bool {
        matches!(self.hello_burst_until, Some(until) if now < until)
    }

    /// The state invariant `segment_id.is_some() == (phase == Normal)` holds
    /// at every event boundary.
    pub fn invariant_holds(&self) -> bool {
        (self.segment_id.is_some()) == (self.phase == Phase::Normal)
            && self
                .known_schedules
                .keys()
                .all(|k| self.known_neighbors.contains(k))
    }

    /// Wake handler: broadcast a HELLO, listen for the active window (burst
    /// listening is managed by the burst machinery), and draw the next wake.
    /// Inside a burst the node cycles at `burst_period` and stops drawing
    /// wakes once the next one would land beyond the burst.
    pub fn on_wake(&mut self, now: SimTime, _params: &ProtocolParams) -> Vec<WakeAction> {
        let mut actions = Vec::with_capacity(3);
        if let Some(burst_until) = self.hello_burst_until {
            if now < burst_until {
                actions.push(WakeAction::Broadcast(self.hello(now, None)));
                let next = self.schedule.next_wake(now, &mut self.rng);
                if next <= burst_until {
                    actions.push(WakeAction::Reschedule { at: next });
                }
                return actions;
            }
        }
        let window_until = now + self.schedule.active_len;
        actions.push(WakeAction::Broadcast(self.hello(now, None)));
        actions.push(WakeAction::Listen { until: window_until });
        let next = self.schedule.next_wake(now, &mut self.rng);
        actions.push(WakeAction::Reschedule { at: next });
        actions
    }

    /// Builds a HELLO (or, with `reply_to`, the unicast handshake reply)
    /// describing the current state.
    pub fn hello(&self, now: SimTime, reply_to: Option<NodeId>) -> Message {
        let window_until = match self.hello_burst_until {
            Some(until) if now < until => until,
            _ => now + self.schedule.active_len,
        };
        Message::Hello {
            sender: self.id,
            payload: HelloPayload {
                phase: self.phase,
                segment: self.segment_id,
                schedule: self.schedule.summary(),
                window_until,
                reply_to,
            },
        }
    }

    /// Classifies a heard HELLO. Hearing our own transmission is a protocol
    /// violation the channel should have made impossible.
    pub fn classify_hello(
        &self,
        sender: NodeId,
        payload: &HelloPayload,
    ) -> Result<HelloReaction, ProtocolError> {
        if sender == self.id {
            return Err(ProtocolError::HelloLoopback(self.id));
        }
        if self.known_neighbors.contains(&sender) {
            // The peer announcing a segment other than the one we remember it
            // in means it lost or changed its state since the handshake.
            let consistent = payload.segment.is_some() && payload.segment == self.segment_id;
            if consistent {
                Ok(HelloReaction::Refresh)
            } else {
                Ok(HelloReaction::Acknowledge { purge_stale: true })
            }
        } else {
            Ok(HelloReaction::Acknowledge { purge_stale: false })
        }
    }

    /// Records a completed handshake with `peer`.
    pub fn record_neighbor(&mut self, peer: NodeId, schedule: ScheduleSummary, now: SimTime) {
        self.known_neighbors.insert(peer);
        self.known_schedules.insert(peer, schedule);
        self.last_confirmed.insert(peer, now);
    }

    /// Forgets `peer` entirely (stale entry or timed-out neighbor).
    pub fn purge_neighbor(&mut self, peer: NodeId) {
        self.known_neighbors.remove(&peer);
        self.known_schedules.remove(&peer);
        self.last_confirmed.remove(&peer);
    }

    pub fn refresh_neighbor(&mut self, peer: NodeId, schedule: ScheduleSummary, now: SimTime) {
        if self.known_neighbors.contains(&peer) {
            self.known_schedules.insert(peer, schedule);
            self.last_confirmed.insert(peer, now);
        }
    }

    /// Promotes a hidden node into a segment. Joining is immediate: there is
    /// no second Init pass once at least one link exists. The caller follows
    /// up with a rate assignment; until then the node cycles at the base
    /// Normal period.
    pub fn promote_to_normal(
        &mut self,
        segment: SegmentId,
        now: SimTime,
        params: &ProtocolParams,
    ) {
        if self.phase == Phase::Normal {
            self.segment_id = Some(segment);
            return;
        }
        self.phase = Phase::Normal;
        self.segment_id = Some(segment);
        self.schedule = WakeSchedule::new(params.t_normal_base, params.active_normal, now);
        self.wake_epoch += 1;
    }

    /// Drops back to hidden state. `forget_peers` wipes the neighbor tables
    /// (a desynchronized node loses everything); a node squeezed out of a
    /// segment keeps its tables and lets staleness clean them up.
    pub fn revert_to_init(
        &mut self,
        now: SimTime,
        params: &ProtocolParams,
        forget_peers: bool,
    ) {
        self.phase = Phase::Init;
        self.segment_id = None;
        self.hello_rate = None;
        self.hello_burst_until = None;
        self.init_anchor = now;
        self.schedule = WakeSchedule::new(params.t_init, params.active_init, now);
        self.wake_epoch += 1;
        if forget_peers {
            self.known_neighbors.clear();
            self.known_schedules.clear();
            self.last_confirmed.clear();
            self.resync_count += 1;
            self.rng = derive_rng(self.trial_seed, self.id, self.resync_count);
        }
    }

    /// Applies a new wake cadence (rate change or burst entry/exit).
    pub fn replace_schedule(&mut self, schedule: WakeSchedule) {
        self.schedule = schedule;
        self.wake_epoch += 1;
    }

    /// An isolated hidden node restarts its Init period once `init_timeout`
    /// elapses without a single discovery. Returns true when that happened.
    pub fn maybe_restart_init(&mut self, now: SimTime, params: &ProtocolParams) -> bool {
        if self.phase == Phase::Init
            && self.known_neighbors.is_empty()
            && now.since(self.init_anchor) >= params.init_timeout
        {
            self.init_anchor = now;
            self.schedule.reanchor(now);
            true
        } else {
            false
        }
    }

    /// Draws the next wake instant from this node's own offset stream.
    pub fn draw_next_wake(&mut self, now: SimTime) -> SimTime {
        self.schedule.next_wake(now, &mut self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
