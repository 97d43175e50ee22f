//! Shared radio channel: who hears a transmission, and at what cost.
//!
//! A HELLO occupies the channel for its airtime. A node receives it only if
//! its radio was on for the whole transmission, the link is physically
//! present and not disrupted, nothing else audible transmitted concurrently
//! (a collision), and it was not itself transmitting (radios are
//! half-duplex). Collision loss can be switched off for idealized runs;
//! half-duplex loss cannot, because a single radio can never hear itself
//! talk over someone.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::protocol::Message;
use crate::time::{SimDuration, SimTime};
use crate::topology::{NodeId, Pair, RadioGraph};

/// Physical-layer knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// How long one HELLO occupies the channel.
    pub hello_airtime: SimDuration,
    /// Per-hop relay latency of a coordination flood.
    pub sync_hop_latency: SimDuration,
    /// Upper bound on the random delay before a handshake reply.
    pub ack_jitter_cap: SimDuration,
    /// Whether concurrent audible transmissions destroy each other.
    pub collisions: bool,
}

impl Default for ChannelConfig {
    fn default() -> ChannelConfig {
        ChannelConfig {
            hello_airtime: SimDuration::from_secs_f64(0.001),
            sync_hop_latency: SimDuration::from_secs_f64(0.005),
            ack_jitter_cap: SimDuration::from_secs_f64(0.020),
            collisions: true,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.hello_airtime.is_zero() {
            return Err("hello_airtime must be positive".into());
        }
        if self.sync_hop_latency.is_zero() {
            return Err("sync_hop_latency must be positive".into());
        }
        Ok(())
    }
}

/// One HELLO on the air.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub sender: NodeId,
    pub start: SimTime,
    pub end: SimTime,
    pub message: Message,
}

/// Channel state: per-node listening intervals, disrupted links, and the
/// recent transmission log used for collision checks.
#[derive(Debug, Clone)]
pub struct ChannelState {
    cfg: ChannelConfig,
    /// Current (or most recent) listening interval per node. A fresh
    /// interval replaces an expired one; overlapping ones merge.
    listen_from: Vec<SimTime>,
    listen_until: Vec<SimTime>,
    /// Disruption depth per link: overlapping disruptions stack, and the
    /// link is up only when no disruption holds it down.
    down: BTreeMap<Pair, u32>,
    log: VecDeque<Transmission>,
}

impl ChannelState {
    pub fn new(cfg: ChannelConfig, nodes: usize) -> ChannelState {
        ChannelState {
            cfg,
            listen_from: vec![SimTime::ZERO; nodes],
            listen_until: vec![SimTime::ZERO; nodes],
            down: BTreeMap::new(),
            log: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    /// Grows the per-node state when nodes join mid-trial.
    pub fn ensure_nodes(&mut self, nodes: usize) {
        while self.listen_from.len() < nodes {
            self.listen_from.push(SimTime::ZERO);
            self.listen_until.push(SimTime::ZERO);
        }
    }

    /// Turns the radio on from `now` until `until`, merging with any interval
    /// still open. Returns the seconds of awake time this adds.
    pub fn open_listen(&mut self, node: NodeId, now: SimTime, until: SimTime) -> f64 {
        let i = node.index();
        if until <= now {
            return 0.0;
        }
        let prev_until = self.listen_until[i];
        if now > prev_until {
            // The previous interval is over; start a fresh one.
            self.listen_from[i] = now;
            self.listen_until[i] = until;
            return until.since(now).as_secs_f64();
        }
        if until <= prev_until {
            return 0.0;
        }
        self.listen_until[i] = until;
        until.since(prev_until).as_secs_f64()
    }

    /// True when the node's radio was on over the whole [start, end] span.
    pub fn covers(&self, node: NodeId, start: SimTime, end: SimTime) -> bool {
        let i = node.index();
        self.listen_from[i] <= start && end <= self.listen_until[i]
    }

    pub fn link_down(&mut self, link: Pair) {
        *self.down.entry(link).or_insert(0) += 1;
    }

    pub fn link_up(&mut self, link: Pair) {
        if let Some(depth) = self.down.get_mut(&link) {
            *depth -= 1;
            if *depth == 0 {
                self.down.remove(&link);
            }
        }
    }

    pub fn is_up(&self, link: Pair) -> bool {
        !self.down.contains_key(&link)
    }

    /// True when `node` has a transmission on the air at `at`.
    pub fn is_transmitting(&self, node: NodeId, at: SimTime) -> bool {
        self.log
            .iter()
            .any(|tx| tx.sender == node && tx.start <= at && at < tx.end)
    }

    /// Records a transmission. Entries too old to overlap any future
    /// delivery are dropped; all HELLOs share one airtime, so anything that
    /// ended a full airtime ago can never collide again.
    pub fn note_tx(&mut self, tx: Transmission) {
        let cutoff = tx.start;
        while let Some(front) = self.log.front() {
            if front.end + self.cfg.hello_airtime <= cutoff {
                self.log.pop_front();
            } else {
                break;
            }
        }
        self.log.push_back(tx);
    }

    fn blocked(&self, graph: &RadioGraph, receiver: NodeId, tx: &Transmission) -> bool {
        for other in &self.log {
            if other.sender == tx.sender {
                continue;
            }
            let overlaps = other.start < tx.end && tx.start < other.end;
            if !overlaps {
                continue;
            }
            if other.sender == receiver {
                // Half-duplex: the receiver was talking itself.
                return true;
            }
            if self.cfg.collisions
                && graph.is_adjacent(other.sender, receiver)
                && self.is_up(Pair::new(other.sender, receiver))
            {
                return true;
            }
        }
        false
    }

    /// Which nodes receive `tx` intact: broadcast reaches every adjacent
    /// listener, a handshake reply only its addressee. Receivers come out in
    /// ascending id order.
    pub fn deliver(&self, graph: &RadioGraph, tx: &Transmission) -> Vec<NodeId> {
        let candidates: Vec<NodeId> = match tx.message.addressee() {
            Some(addr) => vec![addr],
            None => graph
                .neighbors(tx.sender)
                .map(|set| set.iter().copied().collect())
                .unwrap_or_default(),
        };
        candidates
            .into_iter()
            .filter(|&r| {
                r != tx.sender
                    && graph.is_adjacent(tx.sender, r)
                    && self.is_up(Pair::new(tx.sender, r))
                    && self.covers(r, tx.start, tx.end)
                    && !self.blocked(graph, r, tx)
            })
            .collect()
    }
}
