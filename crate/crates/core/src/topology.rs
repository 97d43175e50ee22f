//! Planar radio topology: node placement and the unit-disk adjacency graph.
//!
//! Two nodes share a physical link iff the Euclidean distance between them is
//! within the range of *both* endpoints (closed disk, min-range rule), so every
//! link is bidirectional by construction. Per-node ranges start uniform and
//! can only grow through power-increase events.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense node identifier: nodes are numbered 0..n-1 and new nodes take the
/// next free index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Planar coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Position {
        Position { x, y }
    }

    pub fn distance(self, other: Position) -> f64 {
        self.distance_sq(other).sqrt()
    }

    fn distance_sq(self, other: Position) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Unordered node pair stored in canonical (low, high) order so link sets have
/// a single representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pair(NodeId, NodeId);

impl Pair {
    /// Canonicalizes the endpoint order. Panics on a self-pair, which no
    /// caller can legitimately produce.
    pub fn new(a: NodeId, b: NodeId) -> Pair {
        assert_ne!(a, b, "a link needs two distinct endpoints");
        if a <= b {
            Pair(a, b)
        } else {
            Pair(b, a)
        }
    }

    pub fn low(self) -> NodeId {
        self.0
    }

    pub fn high(self) -> NodeId {
        self.1
    }

    pub fn contains(self, n: NodeId) -> bool {
        self.0 == n || self.1 == n
    }

    /// The endpoint opposite `n`, if `n` is an endpoint.
    pub fn other(self, n: NodeId) -> Option<NodeId> {
        if self.0 == n {
            Some(self.1)
        } else if self.1 == n {
            Some(self.0)
        } else {
            None
        }
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.0, self.1)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("invalid topology configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("discovered link {0} is not present in the physical adjacency")]
    InconsistentLink(Pair),
}

/// Draws `n` node positions independently and uniformly over the
/// `width x height` rectangle. The same seed always yields the same layout.
pub fn place_uniform(
    n: usize,
    width: f64,
    height: f64,
    seed: u64,
) -> Result<Vec<Position>, TopologyError> {
    if n == 0 {
        return Err(TopologyError::InvalidConfig(
            "node count must be at least 1".into(),
        ));
    }
    if !(width.is_finite() && width > 0.0) || !(height.is_finite() && height > 0.0) {
        return Err(TopologyError::InvalidConfig(format!(
            "deployment region must have positive area, got {width} x {height}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| Position::new(rng.gen_range(0.0..=width), rng.gen_range(0.0..=height)))
        .collect())
}

/// Physical radio graph over placed nodes.
#[derive(Debug, Clone)]
pub struct RadioGraph {
    positions: Vec<Position>,
    ranges: Vec<f64>,
    adjacency: Vec<BTreeSet<NodeId>>,
    default_range: f64,
}

impl RadioGraph {
    /// Builds the unit-disk graph for a uniform communication range. Boundary
    /// distances count as adjacent (closed disk).
    pub fn build_graph(positions: &[Position], range: f64) -> Result<RadioGraph, TopologyError> {
        if positions.is_empty() {
            return Err(TopologyError::InvalidConfig(
                "cannot build a graph over zero nodes".into(),
            ));
        }
        if !range.is_finite() || range <= 0.0 {
            return Err(TopologyError::InvalidConfig(format!(
                "communication range must be positive and finite, got {range}"
            )));
        }
        let mut graph = RadioGraph {
            positions: positions.to_vec(),
            ranges: vec![range; positions.len()],
            adjacency: vec![BTreeSet::new(); positions.len()],
            default_range: range,
        };
        for i in 0..positions.len() {
            for j in (i + 1)..positions.len() {
                let (u, v) = (NodeId(i as u32), NodeId(j as u32));
                if graph.within_mutual_range(u, v) {
                    graph.adjacency[i].insert(v);
                    graph.adjacency[j].insert(u);
                }
            }
        }
        Ok(graph)
    }

    fn within_mutual_range(&self, u: NodeId, v: NodeId) -> bool {
        let r = self.ranges[u.index()].min(self.ranges[v.index()]);
        self.positions[u.index()].distance_sq(self.positions[v.index()]) <= r * r
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node.index() < self.positions.len()
    }

    pub fn position(&self, node: NodeId) -> Result<Position, TopologyError> {
        self.check(node)?;
        Ok(self.positions[node.index()])
    }

    pub fn range(&self, node: NodeId) -> Result<f64, TopologyError> {
        self.check(node)?;
        Ok(self.ranges[node.index()])
    }

    pub fn default_range(&self) -> f64 {
        self.default_range
    }

    fn check(&self, node: NodeId) -> Result<(), TopologyError> {
        if self.contains(node) {
            Ok(())
        } else {
            Err(TopologyError::UnknownNode(node))
        }
    }

    pub fn is_adjacent(&self, u: NodeId, v: NodeId) -> bool {
        u != v
            && self
                .adjacency
                .get(u.index())
                .map(|s| s.contains(&v))
                .unwrap_or(false)
    }

    pub fn neighbors(&self, node: NodeId) -> Result<&BTreeSet<NodeId>, TopologyError> {
        self.check(node)?;
        Ok(&self.adjacency[node.index()])
    }

    /// All physical links in canonical order.
    pub fn all_links(&self) -> BTreeSet<Pair> {
        let mut links = BTreeSet::new();
        for (i, neigh) in self.adjacency.iter().enumerate() {
            let u = NodeId(i as u32);
            for &v in neigh.iter() {
                if u < v {
                    links.insert(Pair::new(u, v));
                }
            }
        }
        links
    }

    /// Adds a node at `position` with the default range and links it to every
    /// node within mutual range. Returns the new node's id.
    pub fn add_node(&mut self, position: Position) -> NodeId {
        let id = NodeId(self.positions.len() as u32);
        self.positions.push(position);
        self.ranges.push(self.default_range);
        self.adjacency.push(BTreeSet::new());
        for i in 0..(self.positions.len() - 1) {
            let other = NodeId(i as u32);
            if self.within_mutual_range(id, other) {
                self.adjacency[id.index()].insert(other);
                self.adjacency[other.index()].insert(id);
            }
        }
        id
    }

    /// Raises a node's transmit/receive range and returns the links that the
    /// change creates. Ranges never shrink, so links are never removed.
    pub fn increase_range(
        &mut self,
        node: NodeId,
        new_range: f64,
    ) -> Result<Vec<Pair>, TopologyError> {
        self.check(node)?;
        let current = self.ranges[node.index()];
        if !new_range.is_finite() || new_range <= current {
            return Err(TopologyError::InvalidConfig(format!(
                "range of node {node} must strictly increase ({current} -> {new_range})"
            )));
        }
        self.ranges[node.index()] = new_range;
        let mut added = Vec::new();
        for i in 0..self.positions.len() {
            let other = NodeId(i as u32);
            if other == node || self.is_adjacent(node, other) {
                continue;
            }
            if self.within_mutual_range(node, other) {
                self.adjacency[node.index()].insert(other);
                self.adjacency[other.index()].insert(node);
                added.push(Pair::new(node, other));
            }
        }
        added.sort();
        Ok(added)
    }

    /// Number of segment members physically adjacent to `u`. `u` itself never
    /// counts, whether or not it appears in `members`.
    pub fn in_segment_degree(
        &self,
        u: NodeId,
        members: &BTreeSet<NodeId>,
    ) -> Result<usize, TopologyError> {
        self.check(u)?;
        for &m in members {
            self.check(m)?;
        }
        Ok(members
            .iter()
            .filter(|&&m| m != u && self.is_adjacent(u, m))
            .count())
    }

    /// Physical links not yet discovered, in canonical order. Every discovered
    /// link must exist physically; a stray entry is a consistency error.
    pub fn hidden_links(&self, discovered: &BTreeSet<Pair>) -> Result<BTreeSet<Pair>, TopologyError> {
        let all = self.all_links();
        for &link in discovered {
            if !all.contains(&link) {
                return Err(TopologyError::InconsistentLink(link));
            }
        }
        Ok(all.difference(discovered).copied().collect())
    }
}
