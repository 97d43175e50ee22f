//! Neighbor-discovery protocol state and rules.
//!
//! Nodes run one of two phases. A hidden node in `Init` cycles aggressively
//! (period `t_init`) until it joins a segment; a segment member in `Normal`
//! cycles at a relaxed period derived from its assigned HELLO rate. Segment
//! members share the burden of discovering the hidden nodes around them: the
//! aggregate HELLO rate needed for a (P, T) detection guarantee is divided by
//! an estimate of how many members the hidden node can hear.

mod estimator;
mod message;
mod node;
mod schedule;
mod segment;
mod sync;

pub use estimator::{
    estimate_degree_combined, estimate_degree_leader_avg, estimate_degree_self, DegreeEstimate,
};
pub use message::{HelloPayload, Message, MessageKind, SyncDirective};
pub use node::{HelloReaction, NodeRuntime, WakeAction};
pub use schedule::{ScheduleSummary, WakeSchedule};
pub use segment::{
    establish_link, merge_segments, DiscoveryOutcome, Segment, SegmentId, SegmentTable,
    SegmentUpdate,
};
pub use sync::{issue_sync, FloodPlan, SyncDedup};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimDuration;
use crate::topology::NodeId;

/// Discovery phase of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Hidden: not yet part of any segment, discovering aggressively.
    Init,
    /// Segment member with load-shared discovery duties.
    Normal,
}

/// Which in-segment degree estimator feeds rate assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    LeaderAverage,
    SelfDegree,
    Combined,
}

/// Discovery policy a trial runs under. `LoadShared` is the full protocol;
/// `AllInit` keeps every member at Init cadence with no coordination bursts;
/// `OracleDegree` divides load by the true degree of the targeted hidden node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    LoadShared,
    AllInit,
    OracleDegree,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::LoadShared => "load_shared",
            Policy::AllInit => "all_init",
            Policy::OracleDegree => "oracle_degree",
        }
    }

    /// Coordination bursts are part of the cooperative protocol; the naive
    /// baseline runs without them.
    pub fn bursts_enabled(self) -> bool {
        !matches!(self, Policy::AllInit)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("invalid protocol parameter: {0}")]
    InvalidParameter(String),
    #[error("node {0} heard its own HELLO")]
    HelloLoopback(NodeId),
    #[error("node {node} is not a member of segment {segment}")]
    NotAMember { node: NodeId, segment: SegmentId },
    #[error("segments {0} and {1} overlap and cannot merge")]
    OverlappingSegments(SegmentId, SegmentId),
    #[error("estimator needs segment membership, node {0} is still hidden")]
    EstimatorUnavailable(NodeId),
    #[error("degree reports incomplete and no previous average is available")]
    MissingReports,
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),
}

/// Protocol timing and guarantee parameters, all durations in simulation
/// ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    /// Wake period while hidden (Init).
    pub t_init: SimDuration,
    /// Upper bound on the Normal wake period.
    pub t_normal_base: SimDuration,
    /// Active-window length per Init cycle.
    pub active_init: SimDuration,
    /// Active-window length per Normal cycle.
    pub active_normal: SimDuration,
    /// How long an isolated node waits before restarting its Init period.
    pub init_timeout: SimDuration,
    /// Target probability of detecting a hidden node within `detection_t`.
    pub detection_p: f64,
    /// Detection deadline backing the guarantee.
    pub detection_t: SimDuration,
    /// Length of a coordination burst window.
    pub burst_window: SimDuration,
    /// HELLO cadence inside a burst window.
    pub burst_period: SimDuration,
    /// Estimator used by the load-shared policy.
    pub estimator: EstimatorKind,
    /// Weight on the self estimate in the combined estimator.
    pub correlation_weight: f64,
}

impl ProtocolParams {
    /// Multiplier on `t_normal_base` after which an unheard neighbor is
    /// dropped and its links become hidden again.
    pub const STALE_TIMEOUT_PERIODS: u64 = 3;

    /// Defaults leave `burst_window`/`burst_period` tied to the base periods:
    /// a burst window of twice the Normal period and burst HELLOs at Init
    /// cadence.
    pub fn new(t_init_s: f64, t_normal_base_s: f64, active_init_s: f64, active_normal_s: f64) -> ProtocolParams {
        let t_init = SimDuration::from_secs_f64(t_init_s);
        let t_normal_base = SimDuration::from_secs_f64(t_normal_base_s);
        ProtocolParams {
            t_init,
            t_normal_base,
            active_init: SimDuration::from_secs_f64(active_init_s),
            active_normal: SimDuration::from_secs_f64(active_normal_s),
            init_timeout: t_init.saturating_mul(5),
            detection_p: 0.9,
            detection_t: SimDuration::from_secs_f64(100.0),
            burst_window: t_normal_base.saturating_mul(2),
            burst_period: t_init,
            estimator: EstimatorKind::LeaderAverage,
            correlation_weight: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(ProtocolError::InvalidParameter(msg.to_string()))
            }
        };
        check(!self.t_init.is_zero(), "t_init must be positive")?;
        check(!self.t_normal_base.is_zero(), "t_normal_base must be positive")?;
        check(!self.active_init.is_zero(), "active_init must be positive")?;
        check(!self.active_normal.is_zero(), "active_normal must be positive")?;
        check(
            self.active_init <= self.t_init,
            "active_init cannot exceed t_init",
        )?;
        check(
            self.active_normal <= self.t_normal_base,
            "active_normal cannot exceed t_normal_base",
        )?;
        check(
            self.t_init <= self.t_normal_base,
            "t_init cannot exceed t_normal_base",
        )?;
        check(
            self.detection_p > 0.0 && self.detection_p < 1.0,
            "detection_p must lie strictly between 0 and 1",
        )?;
        check(!self.detection_t.is_zero(), "detection_t must be positive")?;
        check(!self.burst_window.is_zero(), "burst_window must be positive")?;
        check(!self.burst_period.is_zero(), "burst_period must be positive")?;
        check(
            (0.0..=1.0).contains(&self.correlation_weight),
            "correlation_weight must lie in [0, 1]",
        )?;
        Ok(())
    }

    /// Listening duty cycle of a hidden node: active_init / t_init.
    pub fn init_duty_cycle(&self) -> f64 {
        self.active_init.as_secs_f64() / self.t_init.as_secs_f64()
    }

    /// Aggregate HELLO rate (Hz) that the neighbors of a hidden node must
    /// sustain so it is detected within `detection_t` with probability at
    /// least `detection_p`: ln(1/(1-P)) / (d * T) for listening duty cycle d.
    pub fn aggregate_hello_rate(&self) -> Result<f64, ProtocolError> {
        self.validate()?;
        let d = self.init_duty_cycle();
        let t = self.detection_t.as_secs_f64();
        Ok((1.0 / (1.0 - self.detection_p)).ln() / (d * t))
    }

    /// Neighbors drop an unheard peer after this long.
    pub fn stale_timeout(&self) -> SimDuration {
        self.t_normal_base.saturating_mul(Self::STALE_TIMEOUT_PERIODS)
    }
}

/// Per-member HELLO rate (Hz): the aggregate requirement divided by the
/// (rounded-up) estimate of how many members share the load. Estimates below
/// one clamp to one so the divisor never vanishes.
pub fn assign_hello_rate(estimate: f64, params: &ProtocolParams) -> Result<f64, ProtocolError> {
    if !estimate.is_finite() {
        return Err(ProtocolError::InvalidParameter(format!(
            "degree estimate must be finite, got {estimate}"
        )));
    }
    let divisor = estimate.max(1.0).ceil();
    Ok(params.aggregate_hello_rate()? / divisor)
}

/// Wake period for a phase: Init cycles at `t_init`; Normal honors the
/// assigned HELLO rate but never cycles slower than `t_normal_base`.
pub fn wake_period(phase: Phase, hello_rate: Option<f64>, params: &ProtocolParams) -> SimDuration {
    match phase {
        Phase::Init => params.t_init,
        Phase::Normal => match hello_rate {
            Some(rate) if rate > 0.0 => params
                .t_normal_base
                .min(SimDuration::from_secs_f64(1.0 / rate)),
            _ => params.t_normal_base,
        },
    }
}
