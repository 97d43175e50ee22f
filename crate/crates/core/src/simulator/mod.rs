//! Discrete-event trial engine.
//!
//! A trial advances through a priority queue of timestamped events: node
//! wake-ups, transmission completions, handshake replies, flood relays,
//! burst expirations, and scheduled topology changes. Ties break on
//! insertion order, every random draw comes from a per-node generator seeded
//! from the trial seed, and all collections iterate in key order, so a trial
//! is a pure function of its spec.
//!
//! The protocol cycle realized here: nodes wake once per period at a random
//! offset, broadcast a HELLO and listen briefly. A hearer answers unknown or
//! out-of-date senders with a unicast reply after a small random delay; the
//! link is committed on both ends if and only if that reply lands. A
//! committed discovery updates the segment registry, announces any new
//! member through a hop-by-hop flood over known links, and pulls every
//! member into a high-rate HELLO burst with continuous listening, which
//! sweeps up the remaining hidden links around the newcomer. Members
//! re-derive their HELLO rate from the configured degree estimator whenever
//! their segment changes. Scheduled rendezvous keepalives refresh link
//! liveness at each wake; links unheard for three base periods are dropped
//! on both ends and their segments re-form from the surviving links.

pub mod channel;
pub mod scenario;
pub mod trace;

pub use channel::{ChannelConfig, ChannelState, Transmission};
pub use scenario::{Scenario, TimedEvent, TopologyChange};
pub use trace::TraceRecord;

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::Rng;
use thiserror::Error;

use crate::metrics::{LinkEpisode, TargetOutcome, TrialMetrics};
use crate::protocol::{
    assign_hello_rate, establish_link, estimate_degree_combined, estimate_degree_leader_avg,
    estimate_degree_self, wake_period, DiscoveryOutcome, EstimatorKind, HelloReaction, Message,
    NodeRuntime, Phase, Policy, ProtocolError, ProtocolParams, SegmentId, SegmentTable,
    SegmentUpdate, SyncDedup, SyncDirective, WakeAction, WakeSchedule,
};
use crate::time::{SimDuration, SimTime};
use crate::topology::{NodeId, Pair, RadioGraph, TopologyError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid trial spec: {0}")]
    InvalidSpec(String),
    #[error("scenario rejected:\n{0}")]
    Scenario(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// How much of the topology is already discovered at trial start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    /// Everyone starts hidden.
    Off,
    /// Every link not involving the target is known; segments are the
    /// connected components.
    Full,
    /// A spanning tree per component is known; off-tree links stay hidden.
    Tree,
}

/// Everything a trial depends on.
#[derive(Debug, Clone)]
pub struct TrialSpec {
    pub graph: RadioGraph,
    pub params: ProtocolParams,
    pub policy: Policy,
    pub channel: ChannelConfig,
    pub scenario: Scenario,
    pub warm_start: WarmStart,
    /// Node whose detection latency is measured. Warm starts leave it
    /// hidden; the oracle policy divides rates by its true member degree.
    pub target: Option<NodeId>,
    pub horizon: SimDuration,
    pub seed: u64,
    pub record_trace: bool,
}

impl TrialSpec {
    pub fn new(graph: RadioGraph, params: ProtocolParams, horizon_s: f64, seed: u64) -> TrialSpec {
        TrialSpec {
            graph,
            params,
            policy: Policy::LoadShared,
            channel: ChannelConfig::default(),
            scenario: Scenario::empty(),
            warm_start: WarmStart::Off,
            target: None,
            horizon: SimDuration::from_secs_f64(horizon_s),
            seed,
            record_trace: false,
        }
    }
}

/// Reach record of one coordination flood, for auditing against the
/// breadth-first plan over the segment at issue time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FloodStats {
    pub origin: NodeId,
    pub seq: u64,
    pub members_at_issue: BTreeSet<NodeId>,
    pub links_at_issue: BTreeSet<Pair>,
    /// First-receipt hop per member (origin at hop 0).
    pub receipts: BTreeMap<NodeId, u32>,
    pub tx_count: u64,
}

/// Hidden intra-segment link count taken when the last member of a segment
/// finished bursting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BurstSnapshot {
    pub at: SimTime,
    pub segment: SegmentId,
    pub hidden_intra: u64,
}

/// Everything a finished trial hands back.
#[derive(Debug)]
pub struct TrialResult {
    pub metrics: TrialMetrics,
    pub floods: Vec<FloodStats>,
    pub burst_snapshots: Vec<BurstSnapshot>,
    /// Present when the spec asked for a trace.
    pub trace: Vec<TraceRecord>,
    pub nodes: Vec<NodeRuntime>,
    pub segments: SegmentTable,
    pub graph: RadioGraph,
    pub active: Vec<bool>,
}

#[derive(Debug, Clone)]
enum EventKind {
    Wake { node: NodeId, epoch: u64 },
    TxEnd { tx: usize },
    AckSend { from: NodeId, to: NodeId },
    SyncHop { from: NodeId, to: NodeId, directive: SyncDirective, hop: u32 },
    BurstEnd { node: NodeId, until: SimTime },
    Change { index: usize },
    Restore { link: Pair },
}

#[derive(Debug)]
struct QueuedEvent {
    at: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for QueuedEvent {}
impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEvent {
    // Reversed so the max-heap pops the earliest (at, seq) first.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.at.cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

struct Trial {
    params: ProtocolParams,
    policy: Policy,
    scenario: Scenario,
    target: Option<NodeId>,
    horizon_end: SimTime,
    seed: u64,

    graph: RadioGraph,
    nodes: Vec<NodeRuntime>,
    active: Vec<bool>,
    segments: SegmentTable,
    channel: ChannelState,
    dedup: Vec<SyncDedup>,

    queue: BinaryHeap<QueuedEvent>,
    seq: u64,
    now: SimTime,
    transmissions: Vec<Transmission>,
    sync_seq: u64,

    metrics: TrialMetrics,
    open_episodes: BTreeMap<Pair, SimTime>,
    closed_episodes: Vec<LinkEpisode>,
    target_appeared: Option<SimTime>,
    target_detected: Option<SimTime>,
    floods: Vec<FloodStats>,
    flood_index: BTreeMap<(NodeId, u64), usize>,
    burst_snapshots: Vec<BurstSnapshot>,
    trace: Option<Vec<TraceRecord>>,
}

impl Trial {
    fn new(spec: TrialSpec) -> Result<Trial, SimError> {
        spec.params.validate()?;
        spec.channel.validate().map_err(SimError::InvalidSpec)?;
        if spec.horizon.is_zero() {
            return Err(SimError::InvalidSpec("horizon must be positive".into()));
        }
        if spec.channel.hello_airtime >= spec.params.active_init
            || spec.channel.hello_airtime >= spec.params.active_normal
        {
            return Err(SimError::InvalidSpec(
                "active windows must exceed the HELLO airtime".into(),
            ));
        }
        spec.scenario
            .validate(&spec.graph, spec.horizon)
            .map_err(|d| SimError::Scenario(d.join("\n")))?;

        // Joining nodes take the ids after the initial layout, in event
        // order; they stay inactive until their join fires.
        let mut graph = spec.graph.clone();
        let mut join_ids: BTreeMap<usize, NodeId> = BTreeMap::new();
        for (i, event) in spec.scenario.events().iter().enumerate() {
            if let TopologyChange::NodeJoin { position } = event.change {
                join_ids.insert(i, graph.add_node(position));
            }
        }
        let total = graph.node_count();
        if let Some(t) = spec.target {
            if !graph.contains(t) {
                return Err(SimError::InvalidSpec(format!(
                    "target {t} does not name a node (have {total})"
                )));
            }
        }
        if spec.policy == Policy::OracleDegree && spec.target.is_none() {
            return Err(SimError::InvalidSpec(
                "the oracle policy needs a configured target".into(),
            ));
        }

        let nodes: Vec<NodeRuntime> = (0..total)
            .map(|i| NodeRuntime::new(NodeId(i as u32), spec.seed, &spec.params, SimTime::ZERO))
            .collect();
        let mut active = vec![true; total];
        for id in join_ids.values() {
            active[id.index()] = false;
        }
        let channel = ChannelState::new(spec.channel, total);
        let metrics = TrialMetrics {
            horizon_s: spec.horizon.as_secs_f64(),
            nodes: vec![Default::default(); total],
            ..TrialMetrics::default()
        };

        let mut trial = Trial {
            params: spec.params,
            policy: spec.policy,
            scenario: spec.scenario,
            target: spec.target,
            horizon_end: SimTime::ZERO + spec.horizon,
            seed: spec.seed,
            graph,
            nodes,
            active,
            segments: SegmentTable::new(),
            channel,
            dedup: vec![SyncDedup::new(); total],
            queue: BinaryHeap::new(),
            seq: 0,
            now: SimTime::ZERO,
            transmissions: Vec::new(),
            sync_seq: 0,
            metrics,
            open_episodes: BTreeMap::new(),
            closed_episodes: Vec::new(),
            target_appeared: None,
            target_detected: None,
            floods: Vec::new(),
            flood_index: BTreeMap::new(),
            burst_snapshots: Vec::new(),
            trace: spec.record_trace.then(Vec::new),
        };

        trial.apply_warm_start(spec.warm_start)?;
        for u in 0..total {
            let u = NodeId(u as u32);
            if !trial.active[u.index()] {
                continue;
            }
            for &v in trial.graph.neighbors(u)?.clone().iter() {
                if v > u && trial.active[v.index()] && !trial.mutually_known(u, v) {
                    trial.open_episode(Pair::new(u, v));
                }
            }
        }
        trial.mark_target_appeared();
        for i in 0..trial.scenario.events().len() {
            let at = trial.scenario.events()[i].at;
            trial.push(at, EventKind::Change { index: i });
        }
        for i in 0..total {
            if trial.active[i] {
                trial.schedule_wake(NodeId(i as u32));
            }
        }
        Ok(trial)
    }

    // ------------------------------------------------------------------
    // Small helpers
    // ------------------------------------------------------------------

    fn push(&mut self, at: SimTime, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(QueuedEvent { at, seq, kind });
    }

    fn record(&mut self, rec: TraceRecord) {
        if let Some(trace) = &mut self.trace {
            trace.push(rec);
        }
    }

    fn mutually_known(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a.index()].known_neighbors.contains(&b)
            && self.nodes[b.index()].known_neighbors.contains(&a)
    }

    /// A link is present when it could carry traffic right now.
    fn present(&self, link: Pair) -> bool {
        self.active[link.low().index()]
            && self.active[link.high().index()]
            && self.graph.is_adjacent(link.low(), link.high())
            && self.channel.is_up(link)
    }

    fn open_episode(&mut self, link: Pair) {
        self.open_episodes.entry(link).or_insert(self.now);
    }

    fn cancel_episode(&mut self, link: Pair) {
        self.open_episodes.remove(&link);
    }

    fn close_episode(&mut self, link: Pair) {
        if let Some(hidden_from) = self.open_episodes.remove(&link) {
            self.closed_episodes.push(LinkEpisode {
                link,
                hidden_from,
                discovered_at: Some(self.now),
            });
            self.metrics.links_discovered += 1;
        }
    }

    fn mark_target_appeared(&mut self) {
        let Some(t) = self.target else { return };
        if self.target_appeared.is_some() || !self.active[t.index()] {
            return;
        }
        let has_link = self
            .graph
            .neighbors(t)
            .map(|peers| {
                peers
                    .iter()
                    .any(|&v| self.active[v.index()] && self.channel.is_up(Pair::new(t, v)))
            })
            .unwrap_or(false);
        if has_link {
            self.target_appeared = Some(self.now);
        }
    }

    fn schedule_wake(&mut self, node: NodeId) {
        let at = self.nodes[node.index()].draw_next_wake(self.now);
        let epoch = self.nodes[node.index()].wake_epoch;
        self.push(at, EventKind::Wake { node, epoch });
    }

    /// Radio on for `node` until `until` (clamped to the horizon), with
    /// awake-time accounting and tracing.
    fn open_listen(&mut self, node: NodeId, until: SimTime) {
        let until = until.min(self.horizon_end);
        if until <= self.now {
            return;
        }
        let added = self.channel.open_listen(node, self.now, until);
        self.metrics.nodes[node.index()].awake_s += added;
        self.record(TraceRecord::Listen {
            t: self.now,
            node,
            until,
        });
    }

    fn start_hello(&mut self, node: NodeId, message: Message) {
        if self.channel.is_transmitting(node, self.now) {
            // The radio is mid-transmission (an earlier handshake reply);
            // this HELLO is lost.
            return;
        }
        let end = self.now + self.channel.config().hello_airtime;
        let tx = Transmission {
            sender: node,
            start: self.now,
            end,
            message,
        };
        self.record(TraceRecord::Hello {
            t: self.now,
            node,
            reply_to: tx.message.addressee(),
        });
        self.channel.note_tx(tx.clone());
        let index = self.transmissions.len();
        self.transmissions.push(tx);
        self.metrics.nodes[node.index()].hello_tx += 1;
        self.push(end, EventKind::TxEnd { tx: index });
    }

    // ------------------------------------------------------------------
    // Rates and estimators
    // ------------------------------------------------------------------

    /// The degree figure the policy plugs into the rate law for member `m`.
    fn policy_estimate(&self, m: NodeId) -> Result<f64, SimError> {
        let sid = self.nodes[m.index()]
            .segment_id
            .ok_or(ProtocolError::EstimatorUnavailable(m))?;
        let segment = self.segments.get(sid)?;
        let value = match self.policy {
            Policy::LoadShared => match self.params.estimator {
                EstimatorKind::LeaderAverage => estimate_degree_leader_avg(segment)?.value,
                EstimatorKind::SelfDegree => {
                    estimate_degree_self(m, Phase::Normal, segment)?.value
                }
                EstimatorKind::Combined => {
                    estimate_degree_combined(m, Phase::Normal, segment, self.params.correlation_weight)?
                        .value
                }
            },
            Policy::OracleDegree => {
                let target = self.target.expect("oracle policy is validated to have a target");
                self.graph.in_segment_degree(target, &segment.members)? as f64
            }
            Policy::AllInit => unreachable!("the all-init policy never assigns rates"),
        };
        Ok(value)
    }

    fn reassign_rate(&mut self, m: NodeId) -> Result<(), SimError> {
        if self.policy == Policy::AllInit || self.nodes[m.index()].segment_id.is_none() {
            return Ok(());
        }
        let estimate = self.policy_estimate(m)?;
        let rate = assign_hello_rate(estimate, &self.params)?;
        if self.nodes[m.index()].hello_rate == Some(rate) {
            return Ok(());
        }
        self.nodes[m.index()].hello_rate = Some(rate);
        self.record(TraceRecord::RateAssign {
            t: self.now,
            node: m,
            rate_hz: rate,
        });
        if !self.nodes[m.index()].is_bursting(self.now) {
            let period = wake_period(Phase::Normal, Some(rate), &self.params);
            self.nodes[m.index()].replace_schedule(WakeSchedule::new(
                period,
                self.params.active_normal,
                self.now,
            ));
            self.schedule_wake(m);
        }
        Ok(())
    }

    fn reassign_segment_rates(&mut self, sid: SegmentId) -> Result<(), SimError> {
        let members: Vec<NodeId> = self.segments.get(sid)?.members.iter().copied().collect();
        for m in members {
            self.reassign_rate(m)?;
        }
        Ok(())
    }

    /// Applies the node-level fallout of a split or removal: reassigned ids,
    /// reverted members, and refreshed rates for the touched segments.
    fn apply_segment_update(&mut self, update: SegmentUpdate) -> Result<(), SimError> {
        for (&m, &sid) in &update.reassigned {
            self.nodes[m.index()].segment_id = Some(sid);
        }
        for &m in &update.reverted {
            self.nodes[m.index()].revert_to_init(self.now, &self.params, false);
            self.record(TraceRecord::Revert { t: self.now, node: m });
            self.schedule_wake(m);
        }
        for &sid in &update.touched {
            self.reassign_segment_rates(sid)?;
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Floods and bursts
    // ------------------------------------------------------------------

    fn enter_burst(&mut self, m: NodeId, window: SimDuration, period: SimDuration) {
        let proposed = self.now + window;
        let until = match self.nodes[m.index()].hello_burst_until {
            Some(current) => current.max(proposed),
            None => proposed,
        };
        self.nodes[m.index()].hello_burst_until = Some(until);
        self.open_listen(m, until);
        self.record(TraceRecord::BurstStart {
            t: self.now,
            node: m,
            until,
        });
        self.push(until, EventKind::BurstEnd { node: m, until });
        self.nodes[m.index()].replace_schedule(WakeSchedule::new(
            period,
            self.params.active_normal,
            self.now,
        ));
        self.schedule_wake(m);
    }

    fn apply_directive(&mut self, m: NodeId, directive: &SyncDirective) -> Result<(), SimError> {
        self.enter_burst(m, directive.burst_window, directive.burst_period);
        self.reassign_rate(m)
    }

    /// Relays a flood one hop outward from `from` to all its known-link
    /// neighbors except the one it heard it from.
    fn relay_flood(
        &mut self,
        from: NodeId,
        parent: Option<NodeId>,
        hop: u32,
        directive: &SyncDirective,
    ) -> Result<(), SimError> {
        let Some(sid) = self.nodes[from.index()].segment_id else {
            return Ok(());
        };
        let peers = self.segments.get(sid)?.link_neighbors(from);
        let latency = self.channel.config().sync_hop_latency;
        for peer in peers {
            if Some(peer) == parent {
                continue;
            }
            self.metrics.nodes[from.index()].sync_tx += 1;
            if let Some(&i) = self.flood_index.get(&(directive.origin, directive.seq)) {
                self.floods[i].tx_count += 1;
            }
            self.record(TraceRecord::SyncTx {
                t: self.now,
                from,
                to: peer,
                origin: directive.origin,
                seq: directive.seq,
            });
            self.push(
                self.now + latency,
                EventKind::SyncHop {
                    from,
                    to: peer,
                    directive: *directive,
                    hop,
                },
            );
        }
        Ok(())
    }

    fn issue_flood(&mut self, origin: NodeId) -> Result<(), SimError> {
        let sid = self.nodes[origin.index()]
            .segment_id
            .expect("flood origins are members");
        let seq = self.sync_seq;
        self.sync_seq += 1;
        let directive = SyncDirective {
            origin,
            seq,
            segment: sid,
            burst_window: self.params.burst_window,
            burst_period: self.params.burst_period,
        };
        let segment = self.segments.get(sid)?;
        self.flood_index.insert((origin, seq), self.floods.len());
        self.floods.push(FloodStats {
            origin,
            seq,
            members_at_issue: segment.members.clone(),
            links_at_issue: segment.known_links.clone(),
            receipts: BTreeMap::from([(origin, 0)]),
            tx_count: 0,
        });
        self.dedup[origin.index()].should_process(&directive);
        self.apply_directive(origin, &directive)?;
        self.relay_flood(origin, None, 1, &directive)
    }

    // ------------------------------------------------------------------
    // Discovery
    // ------------------------------------------------------------------

    fn note_detection(&mut self, a: NodeId, b: NodeId) {
        if let Some(t) = self.target {
            if (a == t || b == t) && self.target_detected.is_none() {
                self.target_detected = Some(self.now);
            }
        }
    }

    /// A handshake reply landed: both ends commit the link.
    fn complete_handshake(&mut self, a: NodeId, b: NodeId) -> Result<(), SimError> {
        let epoch_a = self.nodes[a.index()].wake_epoch;
        let epoch_b = self.nodes[b.index()].wake_epoch;
        let (outcome, update) = establish_link(
            &mut self.nodes,
            &mut self.segments,
            a,
            b,
            self.now,
            &self.params,
        )?;
        // A first promotion replaces the schedule; re-arm the wake chain.
        if self.nodes[a.index()].wake_epoch != epoch_a {
            self.schedule_wake(a);
        }
        if self.nodes[b.index()].wake_epoch != epoch_b {
            self.schedule_wake(b);
        }
        debug_assert!(update.reverted.is_empty(), "a discovery never reverts members");
        if outcome == DiscoveryOutcome::Refreshed {
            return Ok(());
        }
        let link = Pair::new(a, b);
        self.record(TraceRecord::Discover {
            t: self.now,
            link,
            outcome: match outcome {
                DiscoveryOutcome::NewPairSegment { .. } => "new_pair".into(),
                DiscoveryOutcome::Joined { .. } => "joined".into(),
                DiscoveryOutcome::Merged { .. } => "merged".into(),
                DiscoveryOutcome::IntraSegmentLink { .. } => "intra".into(),
                DiscoveryOutcome::Refreshed => unreachable!(),
            },
        });
        self.close_episode(link);
        self.note_detection(a, b);
        match outcome {
            DiscoveryOutcome::IntraSegmentLink { segment } => {
                // No member changed, so no flood: the rate adjustment rides
                // on local bookkeeping.
                self.reassign_segment_rates(segment)?;
            }
            _ if self.policy.bursts_enabled() => {
                self.issue_flood(a.min(b))?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Baseline establishment: mutual records only, no segments, no rates,
    /// no bursts. Nodes stay on their Init cadence forever.
    fn baseline_establish(&mut self, a: NodeId, b: NodeId) {
        let link = Pair::new(a, b);
        let sched_a = self.nodes[a.index()].schedule.summary();
        let sched_b = self.nodes[b.index()].schedule.summary();
        let fresh = !self.mutually_known(a, b);
        self.nodes[a.index()].record_neighbor(b, sched_b, self.now);
        self.nodes[b.index()].record_neighbor(a, sched_a, self.now);
        if fresh {
            self.record(TraceRecord::Discover {
                t: self.now,
                link,
                outcome: "baseline".into(),
            });
            self.close_episode(link);
            self.note_detection(a, b);
        }
    }

    /// Both ends of a stale or contradicted link forget each other, and the
    /// segment re-forms if the link was load-bearing.
    fn forget_link(&mut self, u: NodeId, v: NodeId) -> Result<(), SimError> {
        let link = Pair::new(u, v);
        let in_segment = self.segments.linked_in_segment(u, v);
        self.nodes[u.index()].purge_neighbor(v);
        self.nodes[v.index()].purge_neighbor(u);
        self.record(TraceRecord::Forget { t: self.now, link });
        if in_segment {
            let update = self.segments.remove_link(link);
            self.apply_segment_update(update)?;
        }
        if self.present(link) {
            self.open_episode(link);
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Keepalives and staleness
    // ------------------------------------------------------------------

    /// Scheduled rendezvous keepalives: a wake confirms liveness with every
    /// neighbor that still lists us back and whose link can carry traffic.
    fn run_keepalives(&mut self, u: NodeId) {
        let peers: Vec<NodeId> = self.nodes[u.index()].known_neighbors.iter().copied().collect();
        let sched_u = self.nodes[u.index()].schedule.summary();
        for v in peers {
            if !self.active[v.index()]
                || !self.nodes[v.index()].known_neighbors.contains(&u)
                || !self.graph.is_adjacent(u, v)
                || !self.channel.is_up(Pair::new(u, v))
            {
                continue;
            }
            let sched_v = self.nodes[v.index()].schedule.summary();
            self.nodes[u.index()].refresh_neighbor(v, sched_v, self.now);
            self.nodes[v.index()].refresh_neighbor(u, sched_u, self.now);
        }
    }

    fn sweep_stale(&mut self, u: NodeId) -> Result<(), SimError> {
        let timeout = self.params.stale_timeout();
        let stale: Vec<NodeId> = self.nodes[u.index()]
            .last_confirmed
            .iter()
            .filter(|&(_, &last)| self.now.since(last) > timeout)
            .map(|(&v, _)| v)
            .collect();
        for v in stale {
            self.forget_link(u, v)?;
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Event handlers
    // ------------------------------------------------------------------

    fn handle_wake(&mut self, node: NodeId, epoch: u64) -> Result<(), SimError> {
        if !self.active[node.index()] || self.nodes[node.index()].wake_epoch != epoch {
            return Ok(());
        }
        self.record(TraceRecord::Wake { t: self.now, node });
        let actions = self.nodes[node.index()].on_wake(self.now, &self.params);
        for action in actions {
            match action {
                WakeAction::Broadcast(message) => self.start_hello(node, message),
                WakeAction::Listen { until } => self.open_listen(node, until),
                WakeAction::Reschedule { at } => {
                    let epoch = self.nodes[node.index()].wake_epoch;
                    self.push(at, EventKind::Wake { node, epoch });
                }
            }
        }
        self.run_keepalives(node);
        self.sweep_stale(node)?;
        self.nodes[node.index()].maybe_restart_init(self.now, &self.params);
        Ok(())
    }

    fn handle_tx_end(&mut self, index: usize) -> Result<(), SimError> {
        let tx = self.transmissions[index].clone();
        let receivers = self.channel.deliver(&self.graph, &tx);
        let Message::Hello { sender, payload } = &tx.message else {
            debug_assert!(false, "only HELLOs travel the broadcast channel");
            return Ok(());
        };
        let sender = *sender;
        for r in receivers {
            self.metrics.nodes[r.index()].hello_rx += 1;
            self.record(TraceRecord::Receive {
                t: self.now,
                node: r,
                from: sender,
            });
            if payload.reply_to == Some(r) {
                // The reply we solicited: commit on both ends.
                if self.policy == Policy::AllInit {
                    self.baseline_establish(sender, r);
                } else {
                    self.complete_handshake(sender, r)?;
                }
                continue;
            }
            debug_assert!(payload.reply_to.is_none(), "replies reach only their addressee");
            let reaction = if self.policy == Policy::AllInit {
                if self.nodes[r.index()].known_neighbors.contains(&sender) {
                    HelloReaction::Refresh
                } else {
                    HelloReaction::Acknowledge { purge_stale: false }
                }
            } else {
                self.nodes[r.index()].classify_hello(sender, payload)?
            };
            match reaction {
                HelloReaction::Refresh => {
                    let schedule = payload.schedule;
                    self.nodes[r.index()].refresh_neighbor(sender, schedule, self.now);
                }
                HelloReaction::Acknowledge { purge_stale } => {
                    if purge_stale {
                        self.forget_link(r, sender)?;
                    }
                    // Reply after a small random delay, as long as the whole
                    // reply still fits into the sender's listening window.
                    let available = payload.window_until.since(self.now);
                    let airtime = self.channel.config().hello_airtime;
                    if available > airtime {
                        let cap = self.channel.config().ack_jitter_cap.min(available - airtime);
                        let jitter = SimDuration(self.nodes[r.index()].rng().gen_range(0..=cap.0));
                        self.push(self.now + jitter, EventKind::AckSend { from: r, to: sender });
                    }
                }
            }
        }
        Ok(())
    }

    fn handle_ack_send(&mut self, from: NodeId, to: NodeId) {
        if !self.active[from.index()] {
            return;
        }
        let message = self.nodes[from.index()].hello(self.now, Some(to));
        self.start_hello(from, message);
    }

    fn handle_sync_hop(
        &mut self,
        from: NodeId,
        to: NodeId,
        directive: SyncDirective,
        hop: u32,
    ) -> Result<(), SimError> {
        if !self.active[to.index()] || self.nodes[to.index()].segment_id.is_none() {
            return Ok(());
        }
        if !self.dedup[to.index()].should_process(&directive) {
            return Ok(());
        }
        if let Some(&i) = self.flood_index.get(&(directive.origin, directive.seq)) {
            self.floods[i].receipts.entry(to).or_insert(hop);
        }
        self.apply_directive(to, &directive)?;
        self.relay_flood(to, Some(from), hop + 1, &directive)
    }

    fn handle_burst_end(&mut self, node: NodeId, until: SimTime) -> Result<(), SimError> {
        if !self.active[node.index()]
            || self.nodes[node.index()].hello_burst_until != Some(until)
        {
            return Ok(()); // superseded by an extension or a revert
        }
        self.nodes[node.index()].hello_burst_until = None;
        self.record(TraceRecord::BurstStop { t: self.now, node });
        let phase = self.nodes[node.index()].phase;
        let rate = self.nodes[node.index()].hello_rate;
        let period = wake_period(phase, rate, &self.params);
        let active_len = match phase {
            Phase::Init => self.params.active_init,
            Phase::Normal => self.params.active_normal,
        };
        self.nodes[node.index()].replace_schedule(WakeSchedule::new(period, active_len, self.now));
        self.schedule_wake(node);

        // When the last burst of a segment ends, note how many of its
        // physical links the welcome sweep left hidden.
        if !self.policy.bursts_enabled() {
            return Ok(());
        }
        let Some(sid) = self.nodes[node.index()].segment_id else {
            return Ok(());
        };
        let segment = self.segments.get(sid)?;
        let still_bursting = segment
            .members
            .iter()
            .any(|&m| m != node && self.nodes[m.index()].is_bursting(self.now));
        if still_bursting {
            return Ok(());
        }
        let members: Vec<NodeId> = segment.members.iter().copied().collect();
        let mut hidden = 0u64;
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                let link = Pair::new(a, b);
                if self.graph.is_adjacent(a, b)
                    && self.channel.is_up(link)
                    && !self.mutually_known(a, b)
                {
                    hidden += 1;
                }
            }
        }
        self.burst_snapshots.push(BurstSnapshot {
            at: self.now,
            segment: sid,
            hidden_intra: hidden,
        });
        Ok(())
    }

    fn handle_change(&mut self, index: usize) -> Result<(), SimError> {
        let change = self.scenario.events()[index].change.clone();
        match change {
            TopologyChange::Disrupt { link, until } => {
                self.channel.link_down(link);
                self.record(TraceRecord::LinkDown { t: self.now, link });
                // A blocked link is not discoverable: a pending hidden spell
                // is voided rather than left ticking.
                self.cancel_episode(link);
                self.push(until.max(self.now), EventKind::Restore { link });
            }
            TopologyChange::NodeJoin { .. } => {
                // Joiner ids were assigned in event order at setup.
                let node = self.join_id_for(index).expect("join events own an id");
                self.active[node.index()] = true;
                self.nodes[node.index()] =
                    NodeRuntime::new(node, self.seed, &self.params, self.now);
                self.record(TraceRecord::NodeJoin { t: self.now, node });
                self.schedule_wake(node);
                for &v in self.graph.neighbors(node)?.clone().iter() {
                    let link = Pair::new(node, v);
                    if self.active[v.index()] && self.channel.is_up(link) {
                        self.open_episode(link);
                    }
                }
                self.mark_target_appeared();
            }
            TopologyChange::PowerIncrease { node, range } => {
                let added = self.graph.increase_range(node, range)?;
                self.record(TraceRecord::PowerIncrease {
                    t: self.now,
                    node,
                    range,
                });
                for link in added {
                    if self.active[link.low().index()]
                        && self.active[link.high().index()]
                        && self.channel.is_up(link)
                    {
                        self.open_episode(link);
                    }
                }
                self.mark_target_appeared();
            }
            TopologyChange::Desync { node } => {
                if !self.active[node.index()] {
                    return Ok(());
                }
                self.record(TraceRecord::Desync { t: self.now, node });
                // Links the node mutually knew become hidden again; its
                // neighbors keep stale one-sided records until they time out.
                let known: Vec<NodeId> =
                    self.nodes[node.index()].known_neighbors.iter().copied().collect();
                for v in known {
                    let link = Pair::new(node, v);
                    if self.nodes[v.index()].known_neighbors.contains(&node) && self.present(link) {
                        self.open_episode(link);
                    }
                }
                let update = self.segments.remove_member(node);
                self.apply_segment_update(update)?;
                self.nodes[node.index()].revert_to_init(self.now, &self.params, true);
                self.dedup[node.index()] = SyncDedup::new();
                self.schedule_wake(node);
            }
        }
        Ok(())
    }

    /// Id assigned at setup to the joiner declared by scenario event `index`.
    fn join_id_for(&self, index: usize) -> Option<NodeId> {
        let joins: Vec<usize> = self
            .scenario
            .events()
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e.change, TopologyChange::NodeJoin { .. }))
            .map(|(i, _)| i)
            .collect();
        let first_join_id = self.nodes.len() - joins.len();
        joins
            .iter()
            .position(|&i| i == index)
            .map(|k| NodeId((first_join_id + k) as u32))
    }

    fn handle_restore(&mut self, link: Pair) {
        self.channel.link_up(link);
        self.record(TraceRecord::LinkUp { t: self.now, link });
        if self.present(link) && !self.mutually_known(link.low(), link.high()) {
            self.open_episode(link);
        }
        self.mark_target_appeared();
    }

    // ------------------------------------------------------------------
    // Warm start and finish
    // ------------------------------------------------------------------

    fn apply_warm_start(&mut self, mode: WarmStart) -> Result<(), SimError> {
        if mode == WarmStart::Off {
            return Ok(());
        }
        let eligible: BTreeSet<NodeId> = (0..self.nodes.len())
            .map(|i| NodeId(i as u32))
            .filter(|&n| self.active[n.index()] && Some(n) != self.target)
            .collect();
        let mut seen: BTreeSet<NodeId> = BTreeSet::new();
        for &start in &eligible {
            if seen.contains(&start) {
                continue;
            }
            // Component of `start` over present links among eligible nodes.
            let mut component: BTreeSet<NodeId> = BTreeSet::new();
            let mut queue = vec![start];
            while let Some(u) = queue.pop() {
                if !component.insert(u) {
                    continue;
                }
                seen.insert(u);
                for &v in self.graph.neighbors(u)? {
                    if eligible.contains(&v)
                        && !component.contains(&v)
                        && self.channel.is_up(Pair::new(u, v))
                    {
                        queue.push(v);
                    }
                }
            }
            if component.len() < 2 {
                continue;
            }
            let links = match mode {
                WarmStart::Full => {
                    let mut links = BTreeSet::new();
                    for &u in &component {
                        for &v in self.graph.neighbors(u)? {
                            if v > u && component.contains(&v) && self.channel.is_up(Pair::new(u, v))
                            {
                                links.insert(Pair::new(u, v));
                            }
                        }
                    }
                    links
                }
                WarmStart::Tree => {
                    // Breadth-first tree from the smallest member.
                    let root = *component.iter().next().expect("non-empty");
                    let mut links = BTreeSet::new();
                    let mut reached = BTreeSet::from([root]);
                    let mut frontier = std::collections::VecDeque::from([root]);
                    while let Some(u) = frontier.pop_front() {
                        for &v in self.graph.neighbors(u)? {
                            if component.contains(&v)
                                && self.channel.is_up(Pair::new(u, v))
                                && reached.insert(v)
                            {
                                links.insert(Pair::new(u, v));
                                frontier.push_back(v);
                            }
                        }
                    }
                    links
                }
                WarmStart::Off => unreachable!(),
            };
            // Mutual knowledge along every known link.
            for &link in &links {
                let (u, v) = (link.low(), link.high());
                let sched_u = self.nodes[u.index()].schedule.summary();
                let sched_v = self.nodes[v.index()].schedule.summary();
                self.nodes[u.index()].record_neighbor(v, sched_v, self.now);
                self.nodes[v.index()].record_neighbor(u, sched_u, self.now);
            }
            if self.policy == Policy::AllInit {
                continue; // the baseline keeps its Init cadence and no segments
            }
            let sid = self.segments.seed(component.clone(), links);
            for &m in &component {
                self.nodes[m.index()].promote_to_normal(sid, self.now, &self.params);
            }
            for &m in &component {
                let estimate = self.policy_estimate(m)?;
                let rate = assign_hello_rate(estimate, &self.params)?;
                self.nodes[m.index()].hello_rate = Some(rate);
                let period = wake_period(Phase::Normal, Some(rate), &self.params);
                self.nodes[m.index()].replace_schedule(WakeSchedule::new(
                    period,
                    self.params.active_normal,
                    self.now,
                ));
                self.record(TraceRecord::RateAssign {
                    t: self.now,
                    node: m,
                    rate_hz: rate,
                });
            }
        }
        Ok(())
    }

    fn run(mut self) -> Result<TrialResult, SimError> {
        while let Some(event) = self.queue.pop() {
            if event.at > self.horizon_end {
                break;
            }
            debug_assert!(event.at >= self.now, "time never runs backwards");
            self.now = event.at;
            match event.kind {
                EventKind::Wake { node, epoch } => self.handle_wake(node, epoch)?,
                EventKind::TxEnd { tx } => self.handle_tx_end(tx)?,
                EventKind::AckSend { from, to } => self.handle_ack_send(from, to),
                EventKind::SyncHop {
                    from,
                    to,
                    directive,
                    hop,
                } => self.handle_sync_hop(from, to, directive, hop)?,
                EventKind::BurstEnd { node, until } => self.handle_burst_end(node, until)?,
                EventKind::Change { index } => self.handle_change(index)?,
                EventKind::Restore { link } => self.handle_restore(link),
            }
        }
        self.now = self.horizon_end;
        self.finalize()
    }

    fn finalize(mut self) -> Result<TrialResult, SimError> {
        let mut complete = true;
        for i in 0..self.nodes.len() {
            let u = NodeId(i as u32);
            if !self.active[u.index()] {
                continue;
            }
            debug_assert!(self.nodes[u.index()].invariant_holds());
            for &v in self.graph.neighbors(u)? {
                if v > u && self.present(Pair::new(u, v)) && !self.mutually_known(u, v) {
                    complete = false;
                }
            }
        }
        self.metrics.links_complete_at_end = complete;
        self.metrics.segment_count_at_end = self.segments.len();
        let mut episodes = std::mem::take(&mut self.closed_episodes);
        for (&link, &hidden_from) in &self.open_episodes {
            episodes.push(LinkEpisode {
                link,
                hidden_from,
                discovered_at: None,
            });
        }
        self.metrics.link_episodes = episodes;
        self.metrics.target = self.target.map(|_| TargetOutcome {
            appeared_at: self.target_appeared.unwrap_or(SimTime::ZERO),
            detected_at: self.target_detected,
        });
        Ok(TrialResult {
            metrics: self.metrics,
            floods: self.floods,
            burst_snapshots: self.burst_snapshots,
            trace: self.trace.unwrap_or_default(),
            nodes: self.nodes,
            segments: self.segments,
            graph: self.graph,
            active: self.active,
        })
    }
}

/// Runs one trial to completion. Identical specs produce identical results.
pub fn run_trial(spec: TrialSpec) -> Result<TrialResult, SimError> {
    Trial::new(spec)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::Position;

    fn two_node_spec(seed: u64) -> TrialSpec {
        let graph = RadioGraph::build_graph(
            &[Position::new(0.0, 0.0), Position::new(5.0, 0.0)],
            10.0,
        )
        .unwrap();
        let params = ProtocolParams::new(1.0, 10.0, 0.1, 0.1);
        TrialSpec::new(graph, params, 60.0, seed)
    }

    #[test]
    fn rejects_zero_horizon() {
        let mut spec = two_node_spec(1);
        spec.horizon = SimDuration::ZERO;
        assert!(matches!(run_trial(spec), Err(SimError::InvalidSpec(_))));
    }

    #[test]
    fn rejects_oracle_policy_without_target() {
        let mut spec = two_node_spec(1);
        spec.policy = Policy::OracleDegree;
        assert!(matches!(run_trial(spec), Err(SimError::InvalidSpec(_))));
    }

    #[test]
    fn rejects_airtime_wider_than_the_listen_window() {
        let mut spec = two_node_spec(1);
        spec.channel.hello_airtime = SimDuration::from_secs_f64(0.2);
        assert!(matches!(run_trial(spec), Err(SimError::InvalidSpec(_))));
    }

    #[test]
    fn rejects_target_outside_the_graph() {
        let mut spec = two_node_spec(1);
        spec.target = Some(NodeId(9));
        assert!(matches!(run_trial(spec), Err(SimError::InvalidSpec(_))));
    }

    #[test]
    fn rejects_invalid_scenarios_with_all_diagnostics() {
        let mut spec = two_node_spec(1);
        spec.scenario = Scenario::new(vec![TimedEvent {
            at: SimTime::from_secs_f64(1.0),
            change: TopologyChange::Desync { node: NodeId(17) },
        }]);
        match run_trial(spec) {
            Err(SimError::Scenario(text)) => assert!(text.contains("unknown node 17")),
            other => panic!("expected a scenario rejection, got {other:?}"),
        }
    }

    #[test]
    fn two_adjacent_nodes_discover_each_other() {
        let result = run_trial(two_node_spec(7)).unwrap();
        assert!(result.metrics.links_complete_at_end);
        assert_eq!(result.metrics.links_discovered, 1);
        assert_eq!(result.segments.len(), 1);
        for node in &result.nodes {
            assert_eq!(node.phase, Phase::Normal);
            assert!(node.hello_rate.is_some());
        }
    }

    #[test]
    fn identical_seeds_reproduce_identical_metrics() {
        let mut a = two_node_spec(42);
        a.record_trace = true;
        let mut b = two_node_spec(42);
        b.record_trace = true;
        let ra = run_trial(a).unwrap();
        let rb = run_trial(b).unwrap();
        assert_eq!(ra.metrics, rb.metrics);
        assert_eq!(ra.trace, rb.trace);
    }

    #[test]
    fn different_seeds_diverge() {
        let ra = run_trial(two_node_spec(1)).unwrap();
        let rb = run_trial(two_node_spec(2)).unwrap();
        let la = ra.metrics.link_episodes[0].latency_s();
        let lb = rb.metrics.link_episodes[0].latency_s();
        assert_ne!(la, lb, "independent offset streams should differ");
    }
}
