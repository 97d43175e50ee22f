//! Segments: maximal groups of mutually discovered nodes.
//!
//! A segment is a set of nodes connected through discovered (known) links.
//! The member with the smallest id acts as leader and aggregates in-segment
//! degree reports. Segments merge when a link between two of them is
//! discovered and are recomputed from the surviving links when a link or
//! member drops out; members left without any known link fall back to Init.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::protocol::node::NodeRuntime;
use crate::protocol::{ProtocolError, ProtocolParams};
use crate::time::SimTime;
use crate::topology::{NodeId, Pair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub u64);

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A connected group of mutually discovered nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: SegmentId,
    /// Smallest member id; recomputed after every membership change.
    pub leader: NodeId,
    pub members: BTreeSet<NodeId>,
    /// Discovered links, both endpoints members.
    pub known_links: BTreeSet<Pair>,
    /// Per-member in-segment degree, aggregated at the leader from reports
    /// piggybacked on coordination floods.
    pub degree_reports: BTreeMap<NodeId, u32>,
    /// Mean reported degree; equals 2 * |known_links| / |members| when the
    /// report set is complete.
    pub avg_degree: f64,
    /// Average retained from the last complete report round.
    pub last_complete_avg: Option<f64>,
}

impl Segment {
    /// Builds a segment directly from a member set and its known links,
    /// recomputing leader and degree reports.
    pub fn assemble(id: SegmentId, members: BTreeSet<NodeId>, known_links: BTreeSet<Pair>) -> Segment {
        let mut seg = Segment {
            id,
            leader: *members.iter().next().expect("segments are never empty"),
            members,
            known_links,
            degree_reports: BTreeMap::new(),
            avg_degree: 0.0,
            last_complete_avg: None,
        };
        seg.refresh_reports();
        seg
    }

    /// Recomputes the per-member degree reports and their mean from the
    /// current link set, as a completed report round would.
    pub fn refresh_reports(&mut self) {
        self.leader = *self.members.iter().next().expect("segments are never empty");
        self.degree_reports = self
            .members
            .iter()
            .map(|&m| {
                let d = self.known_links.iter().filter(|l| l.contains(m)).count() as u32;
                (m, d)
            })
            .collect();
        let sum: f64 = self.degree_reports.values().map(|&d| d as f64).sum();
        self.avg_degree = sum / self.members.len() as f64;
        self.last_complete_avg = Some(self.avg_degree);
    }

    /// Degree of `member` under the current known links.
    pub fn link_degree(&self, member: NodeId) -> Result<u32, ProtocolError> {
        if !self.members.contains(&member) {
            return Err(ProtocolError::NotAMember {
                node: member,
                segment: self.id,
            });
        }
        Ok(self.known_links.iter().filter(|l| l.contains(member)).count() as u32)
    }

    /// Known-link neighbors of `member` inside this segment.
    pub fn link_neighbors(&self, member: NodeId) -> Vec<NodeId> {
        self.known_links
            .iter()
            .filter_map(|l| l.other(member))
            .collect()
    }

    /// Members grouped into connected components under the known links.
    fn components(&self) -> Vec<BTreeSet<NodeId>> {
        let mut adjacency: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for &link in &self.known_links {
            adjacency.entry(link.low()).or_default().push(link.high());
            adjacency.entry(link.high()).or_default().push(link.low());
        }
        let mut seen: BTreeSet<NodeId> = BTreeSet::new();
        let mut components = Vec::new();
        for &start in &self.members {
            if seen.contains(&start) {
                continue;
            }
            let mut component = BTreeSet::new();
            let mut stack = vec![start];
            while let Some(v) = stack.pop() {
                if !component.insert(v) {
                    continue;
                }
                seen.insert(v);
                if let Some(next) = adjacency.get(&v) {
                    stack.extend(next.iter().copied().filter(|n| !component.contains(n)));
                }
            }
            components.push(component);
        }
        components
    }
}

/// Merges two disjoint segments across a newly discovered bridge link. The
/// merged segment keeps the smaller of the two ids and elects the smallest
/// member id as leader.
pub fn merge_segments(a: &Segment, b: &Segment, bridge: Pair) -> Result<Segment, ProtocolError> {
    if a.members.intersection(&b.members).next().is_some() {
        return Err(ProtocolError::OverlappingSegments(a.id, b.id));
    }
    let bridges_them = (a.members.contains(&bridge.low()) && b.members.contains(&bridge.high()))
        || (b.members.contains(&bridge.low()) && a.members.contains(&bridge.high()));
    if !bridges_them {
        return Err(ProtocolError::NotAMember {
            node: bridge.low(),
            segment: a.id,
        });
    }
    let members: BTreeSet<NodeId> = a.members.union(&b.members).copied().collect();
    let mut links: BTreeSet<Pair> = a.known_links.union(&b.known_links).copied().collect();
    links.insert(bridge);
    Ok(Segment::assemble(a.id.min(b.id), members, links))
}

/// Node-level consequences of a registry change that the caller must apply.
#[derive(Debug, Default, PartialEq)]
pub struct SegmentUpdate {
    /// Members whose segment id changed (splits assign fresh ids).
    pub reassigned: BTreeMap<NodeId, SegmentId>,
    /// Members left without any known link; they fall back to Init.
    pub reverted: Vec<NodeId>,
    /// Segments whose membership or links changed and need rates reassigned.
    pub touched: BTreeSet<SegmentId>,
}

/// Registry of all live segments in a trial.
#[derive(Debug, Clone, Default)]
pub struct SegmentTable {
    segments: BTreeMap<SegmentId, Segment>,
    next_id: u64,
}

impl SegmentTable {
    pub fn new() -> SegmentTable {
        SegmentTable::default()
    }

    fn fresh_id(&mut self) -> SegmentId {
        let id = SegmentId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn get(&self, id: SegmentId) -> Result<&Segment, ProtocolError> {
        self.segments.get(&id).ok_or(ProtocolError::UnknownSegment(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Segment> {
        self.segments.values()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segment_of(&self, node: NodeId) -> Option<&Segment> {
        self.segments.values().find(|s| s.members.contains(&node))
    }

    /// Union of every segment's known links.
    pub fn all_known_links(&self) -> BTreeSet<Pair> {
        self.segments
            .values()
            .flat_map(|s| s.known_links.iter().copied())
            .collect()
    }

    /// Two members of the same segment joined by a known link can relay
    /// coordination traffic to each other.
    pub fn linked_in_segment(&self, a: NodeId, b: NodeId) -> bool {
        a != b
            && self
                .segment_of(a)
                .map(|s| s.known_links.contains(&Pair::new(a, b)))
                .unwrap_or(false)
    }

    /// Creates a two-node segment from a first discovery.
    pub fn create_pair(&mut self, link: Pair) -> SegmentId {
        let id = self.fresh_id();
        let members = [link.low(), link.high()].into_iter().collect();
        let links = [link].into_iter().collect();
        self.segments.insert(id, Segment::assemble(id, members, links));
        id
    }

    /// Seeds a pre-discovered segment (used for warm starts). Links must form
    /// a connected graph over the members.
    pub fn seed(&mut self, members: BTreeSet<NodeId>, links: BTreeSet<Pair>) -> SegmentId {
        let id = self.fresh_id();
        let seg = Segment::assemble(id, members, links);
        debug_assert_eq!(seg.components().len(), 1, "seeded segments must be connected");
        self.segments.insert(id, seg);
        id
    }

    /// Adds a hidden node to an existing segment through one discovered link.
    pub fn admit(
        &mut self,
        segment: SegmentId,
        joiner: NodeId,
        link: Pair,
    ) -> Result<(), ProtocolError> {
        let seg = self
            .segments
            .get_mut(&segment)
            .ok_or(ProtocolError::UnknownSegment(segment))?;
        debug_assert!(link.contains(joiner));
        seg.members.insert(joiner);
        seg.known_links.insert(link);
        seg.refresh_reports();
        Ok(())
    }

    /// Records a newly discovered link between two members of one segment.
    pub fn add_intra_link(&mut self, segment: SegmentId, link: Pair) -> Result<(), ProtocolError> {
        let seg = self
            .segments
            .get_mut(&segment)
            .ok_or(ProtocolError::UnknownSegment(segment))?;
        for end in [link.low(), link.high()] {
            if !seg.members.contains(&end) {
                return Err(ProtocolError::NotAMember {
                    node: end,
                    segment,
                });
            }
        }
        seg.known_links.insert(link);
        seg.refresh_reports();
        Ok(())
    }

    /// Merges the segments with ids `a` and `b` across `bridge` and rewires
    /// the registry. Returns the update to apply to node runtimes.
    pub fn apply_merge(
        &mut self,
        a: SegmentId,
        b: SegmentId,
        bridge: Pair,
    ) -> Result<(SegmentId, SegmentUpdate), ProtocolError> {
        let seg_a = self.get(a)?.clone();
        let seg_b = self.get(b)?.clone();
        let merged = merge_segments(&seg_a, &seg_b, bridge)?;
        let winner = merged.id;
        let mut update = SegmentUpdate::default();
        for &m in &merged.members {
            update.reassigned.insert(m, winner);
        }
        update.touched.insert(winner);
        self.segments.remove(&a);
        self.segments.remove(&b);
        self.segments.insert(winner, merged);
        Ok((winner, update))
    }

    /// Removes a member (desync or departure) and re-forms its segment from
    /// the surviving links.
    pub fn remove_member(&mut self, node: NodeId) -> SegmentUpdate {
        let Some(id) = self.segment_of(node).map(|s| s.id) else {
            return SegmentUpdate::default();
        };
        let mut seg = self.segments.remove(&id).expect("segment_of returned a live id");
        seg.members.remove(&node);
        seg.known_links.retain(|l| !l.contains(node));
        self.reform(id, seg)
    }

    /// Removes a known link (staleness drop) and re-forms the segment.
    pub fn remove_link(&mut self, link: Pair) -> SegmentUpdate {
        let Some(id) = self
            .segments
            .values()
            .find(|s| s.known_links.contains(&link))
            .map(|s| s.id)
        else {
            return SegmentUpdate::default();
        };
        let mut seg = self.segments.remove(&id).expect("lookup returned a live id");
        seg.known_links.remove(&link);
        self.reform(id, seg)
    }

    /// Rebuilds segments from the connected components of a mutated segment.
    /// The component containing the smallest surviving member keeps the old
    /// id; other multi-node components get fresh ids; singletons revert.
    fn reform(&mut self, old_id: SegmentId, seg: Segment) -> SegmentUpdate {
        let mut update = SegmentUpdate::default();
        if seg.members.is_empty() {
            return update;
        }
        let components = seg.components();
        let keeper = components
            .iter()
            .filter(|c| c.len() >= 2)
            .map(|c| *c.iter().next().expect("components are non-empty"))
            .min();
        for component in components {
            if component.len() < 2 {
                update.reverted.extend(component);
                continue;
            }
            let first = *component.iter().next().expect("non-empty");
            let id = if Some(first) == keeper { old_id } else { self.fresh_id() };
            let links: BTreeSet<Pair> = seg
                .known_links
                .iter()
                .copied()
                .filter(|l| component.contains(&l.low()))
                .collect();
            for &m in &component {
                if id != old_id {
                    update.reassigned.insert(m, id);
                }
            }
            update.touched.insert(id);
            self.segments.insert(id, Segment::assemble(id, component, links));
        }
        update
    }
}

/// Everything that can come out of a completed discovery handshake.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscoveryOutcome {
    /// The pair already knew each other; schedules were refreshed.
    Refreshed,
    /// Two hidden nodes formed a fresh two-node segment.
    NewPairSegment { segment: SegmentId },
    /// A hidden node joined an existing segment.
    Joined { segment: SegmentId, joiner: NodeId },
    /// Two segments merged across the new link.
    Merged { into: SegmentId, absorbed: SegmentId },
    /// A hidden link between two members of one segment surfaced.
    IntraSegmentLink { segment: SegmentId },
}

impl DiscoveryOutcome {
    /// A coordination flood announces every newly discovered *node*; a link
    /// between already-known members stays quiet.
    pub fn announces_new_node(self) -> bool {
        matches!(
            self,
            DiscoveryOutcome::NewPairSegment { .. }
                | DiscoveryOutcome::Joined { .. }
                | DiscoveryOutcome::Merged { .. }
        )
    }
}

/// Completes a mutual discovery between `a` and `b`: both record each other,
/// and segment membership is reconciled. The returned update carries segment
/// reassignments for any merge; rate reassignment is the caller's job.
pub fn establish_link(
    nodes: &mut [NodeRuntime],
    table: &mut SegmentTable,
    a: NodeId,
    b: NodeId,
    now: SimTime,
    params: &ProtocolParams,
) -> Result<(DiscoveryOutcome, SegmentUpdate), ProtocolError> {
    if a == b {
        return Err(ProtocolError::HelloLoopback(a));
    }
    let link = Pair::new(a, b);
    let (ai, bi) = (a.index(), b.index());

    let mutual = nodes[ai].known_neighbors.contains(&b) && nodes[bi].known_neighbors.contains(&a);
    if mutual && table.linked_in_segment(a, b) {
        let sched_a = nodes[ai].schedule.summary();
        let sched_b = nodes[bi].schedule.summary();
        nodes[ai].refresh_neighbor(b, sched_b, now);
        nodes[bi].refresh_neighbor(a, sched_a, now);
        return Ok((DiscoveryOutcome::Refreshed, SegmentUpdate::default()));
    }

    let sched_a = nodes[ai].schedule.summary();
    let sched_b = nodes[bi].schedule.summary();
    nodes[ai].record_neighbor(b, sched_b, now);
    nodes[bi].record_neighbor(a, sched_a, now);

    let seg_a = nodes[ai].segment_id;
    let seg_b = nodes[bi].segment_id;
    let mut update = SegmentUpdate::default();
    let outcome = match (seg_a, seg_b) {
        (None, None) => {
            let segment = table.create_pair(link);
            nodes[ai].promote_to_normal(segment, now, params);
            nodes[bi].promote_to_normal(segment, now, params);
            update.touched.insert(segment);
            DiscoveryOutcome::NewPairSegment { segment }
        }
        (Some(segment), None) => {
            table.admit(segment, b, link)?;
            nodes[bi].promote_to_normal(segment, now, params);
            update.touched.insert(segment);
            DiscoveryOutcome::Joined { segment, joiner: b }
        }
        (None, Some(segment)) => {
            table.admit(segment, a, link)?;
            nodes[ai].promote_to_normal(segment, now, params);
            update.touched.insert(segment);
            DiscoveryOutcome::Joined { segment, joiner: a }
        }
        (Some(sa), Some(sb)) if sa == sb => {
            table.add_intra_link(sa, link)?;
            update.touched.insert(sa);
            DiscoveryOutcome::IntraSegmentLink { segment: sa }
        }
        (Some(sa), Some(sb)) => {
            let (winner, merge_update) = table.apply_merge(sa, sb, link)?;
            update = merge_update;
            for (&member, &seg) in &update.reassigned {
                nodes[member.index()].segment_id = Some(seg);
            }
            DiscoveryOutcome::Merged {
                into: winner,
                absorbed: if winner == sa { sb } else { sa },
            }
        }
    };
    Ok((outcome, update))
}
