//! In-segment degree estimation.
//!
//! A member's HELLO rate is its share of the segment-wide aggregate rate,
//! split by the number of neighbors it is expected to still discover — which
//! is unknown, so it is estimated. Three estimators are provided: the mean
//! reported in-segment degree (computed at the leader), the node's own
//! in-segment degree, and a convex combination of the two for deployments
//! where a node's hidden degree correlates with its visible one.

use crate::protocol::segment::Segment;
use crate::protocol::{Phase, ProtocolError};
use crate::topology::NodeId;

/// An estimate of how many in-segment neighbors a node has.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegreeEstimate {
    pub value: f64,
    /// True when the backing report round was incomplete and the value was
    /// carried over from the last complete one.
    pub stale: bool,
}

/// Mean in-segment degree over the leader's report table. With a complete
/// round of reports this equals `2 * |links| / |members|`; with reports
/// missing it falls back to the last complete round.
pub fn estimate_degree_leader_avg(segment: &Segment) -> Result<DegreeEstimate, ProtocolError> {
    if segment.degree_reports.len() == segment.members.len() && !segment.members.is_empty() {
        let sum: f64 = segment.degree_reports.values().map(|&d| d as f64).sum();
        return Ok(DegreeEstimate {
            value: sum / segment.members.len() as f64,
            stale: false,
        });
    }
    match segment.last_complete_avg {
        Some(value) => Ok(DegreeEstimate { value, stale: true }),
        None => Err(ProtocolError::MissingReports),
    }
}

/// The node's own in-segment degree. Only members estimate; a node still in
/// Init has no segment to count against.
pub fn estimate_degree_self(
    node: NodeId,
    phase: Phase,
    segment: &Segment,
) -> Result<DegreeEstimate, ProtocolError> {
    if phase != Phase::Normal {
        return Err(ProtocolError::EstimatorUnavailable(node));
    }
    let degree = segment.link_degree(node)?;
    Ok(DegreeEstimate {
        value: degree as f64,
        stale: false,
    })
}

/// Convex combination `w * self + (1 - w) * leader_avg`. At `w = 0` this is
/// the leader average, at `w = 1` the node's own degree.
pub fn estimate_degree_combined(
    node: NodeId,
    phase: Phase,
    segment: &Segment,
    weight: f64,
) -> Result<DegreeEstimate, ProtocolError> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(ProtocolError::InvalidParameter(format!(
            "correlation_weight must lie in [0, 1], got {weight}"
        )));
    }
    let own = estimate_degree_self(node, phase, segment)?;
    let avg = estimate_degree_leader_avg(segment)?;
    Ok(DegreeEstimate {
        value: weight * own.value + (1.0 - weight) * avg.value,
        stale: own.stale || avg.stale,
    })
}
