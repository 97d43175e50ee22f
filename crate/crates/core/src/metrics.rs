//! Per-trial accounting and cross-policy aggregation.
//!
//! The engine records radio-on time and message counts per node, one episode
//! per hidden link (opened when the link becomes physically present and
//! undiscovered, closed at discovery), and the detection outcome for an
//! optional target node. This module turns those raw counts into energy
//! figures, empirical detection probabilities with confidence halfwidths,
//! and policy comparison rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;
use crate::topology::Pair;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid energy model: {0}")]
    InvalidModel(String),
    #[error("trial {0} has no target outcome to aggregate")]
    MissingTarget(usize),
    #[error("no trials supplied")]
    NoTrials,
    #[error("policy {0} has {1} trials but {2} has {3}; comparisons must be paired")]
    UnpairedPolicies(String, usize, String, usize),
}

/// Radio accounting for one node over one trial.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    /// Total time the radio was on (listening or in a burst window), seconds.
    pub awake_s: f64,
    pub hello_tx: u64,
    pub sync_tx: u64,
    pub hello_rx: u64,
}

/// One interval during which a physically present link was hidden.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkEpisode {
    pub link: Pair,
    pub hidden_from: SimTime,
    /// None when the link was still hidden at the horizon.
    pub discovered_at: Option<SimTime>,
}

impl LinkEpisode {
    pub fn latency_s(&self) -> Option<f64> {
        self.discovered_at.map(|d| d.since(self.hidden_from).as_secs_f64())
    }
}

/// Detection record for the designated target node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    /// When the target became eligible for discovery.
    pub appeared_at: SimTime,
    /// First completed handshake involving the target, if any.
    pub detected_at: Option<SimTime>,
}

impl TargetOutcome {
    pub fn latency_s(&self) -> Option<f64> {
        self.detected_at.map(|d| d.since(self.appeared_at).as_secs_f64())
    }

    pub fn detected_within(&self, deadline_s: f64) -> bool {
        self.latency_s().map(|l| l <= deadline_s).unwrap_or(false)
    }
}

/// Everything measured over one trial.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub horizon_s: f64,
    pub nodes: Vec<NodeMetrics>,
    pub link_episodes: Vec<LinkEpisode>,
    pub target: Option<TargetOutcome>,
    /// Links discovered during the trial (episodes closed).
    pub links_discovered: u64,
    /// True when no physically present link was still hidden at the horizon.
    pub links_complete_at_end: bool,
    pub segment_count_at_end: usize,
}

impl TrialMetrics {
    pub fn hello_count(&self) -> u64 {
        self.nodes.iter().map(|n| n.hello_tx).sum()
    }

    pub fn sync_count(&self) -> u64 {
        self.nodes.iter().map(|n| n.sync_tx).sum()
    }
}

/// Linear energy model: listening costs per second, transmitting per message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub listen_per_s: f64,
    pub per_tx: f64,
}

impl Default for EnergyModel {
    fn default() -> EnergyModel {
        // Idle listening dominates real sensor radios; a transmission is
        // charged half a listen-second.
        EnergyModel {
            listen_per_s: 1.0,
            per_tx: 0.5,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for (name, v) in [("listen_per_s", self.listen_per_s), ("per_tx", self.per_tx)] {
            if !v.is_finite() || v < 0.0 {
                return Err(MetricsError::InvalidModel(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn node_energy(&self, node: &NodeMetrics) -> Result<f64, MetricsError> {
        self.validate()?;
        Ok(node.awake_s * self.listen_per_s + (node.hello_tx + node.sync_tx) as f64 * self.per_tx)
    }

    pub fn trial_energy(&self, trial: &TrialMetrics) -> Result<f64, MetricsError> {
        self.validate()?;
        let mut total = 0.0;
        for node in &trial.nodes {
            total += self.node_energy(node)?;
        }
        Ok(total)
    }

    /// Total energy normalized by links discovered (at least one, so trials
    /// that discover nothing are charged in full).
    pub fn energy_per_link(&self, trial: &TrialMetrics) -> Result<f64, MetricsError> {
        Ok(self.trial_energy(trial)? / trial.links_discovered.max(1) as f64)
    }
}

/// Fraction of trials whose target was detected within `deadline_s`, with a
/// three-sigma binomial halfwidth.
pub fn empirical_detection(
    trials: &[TrialMetrics],
    deadline_s: f64,
) -> Result<(f64, f64), MetricsError> {
    if trials.is_empty() {
        return Err(MetricsError::NoTrials);
    }
    let mut hits = 0usize;
    for (i, trial) in trials.iter().enumerate() {
        let outcome = trial.target.as_ref().ok_or(MetricsError::MissingTarget(i))?;
        if outcome.detected_within(deadline_s) {
            hits += 1;
        }
    }
    let n = trials.len() as f64;
    let p = hits as f64 / n;
    let halfwidth = 3.0 * (p * (1.0 - p) / n).sqrt();
    Ok((p, halfwidth))
}

/// Aggregate row for one policy across its trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyRow {
    pub policy: String,
    pub trials: usize,
    pub mean_energy_per_link: f64,
    /// Present only when every trial tracked a target.
    pub detection_fraction: Option<f64>,
    pub detection_halfwidth: Option<f64>,
    pub mean_latency_s: Option<f64>,
}

/// Builds one aggregate row per policy, in the map's (insertion-independent,
/// name-sorted) order. All policies must have run the same number of trials
/// so rows are comparable seed for seed.
pub fn compare_policies(
    per_policy: &BTreeMap<String, Vec<TrialMetrics>>,
    model: &EnergyModel,
    deadline_s: f64,
) -> Result<Vec<PolicyRow>, MetricsError> {
    model.validate()?;
    let mut sizes = per_policy.iter().map(|(name, t)| (name, t.len()));
    if let Some((first_name, first_len)) = sizes.next() {
        for (name, len) in sizes {
            if len != first_len {
                return Err(MetricsError::UnpairedPolicies(
                    first_name.clone(),
                    first_len,
                    name.clone(),
                    len,
                ));
            }
        }
    }
    let mut rows = Vec::new();
    for (name, trials) in per_policy {
        if trials.is_empty() {
            return Err(MetricsError::NoTrials);
        }
        let mut energy_sum = 0.0;
        for trial in trials {
            energy_sum += model.energy_per_link(trial)?;
        }
        let with_target = trials.iter().all(|t| t.target.is_some());
        let (fraction, halfwidth) = if with_target {
            let (f, h) = empirical_detection(trials, deadline_s)?;
            (Some(f), Some(h))
        } else {
            (None, None)
        };
        let latencies: Vec<f64> = trials
            .iter()
            .filter_map(|t| t.target.as_ref().and_then(|o| o.latency_s()))
            .collect();
        let mean_latency = if latencies.is_empty() {
            None
        } else {
            Some(latencies.iter().sum::<f64>() / latencies.len() as f64)
        };
        rows.push(PolicyRow {
            policy: name.clone(),
            trials: trials.len(),
            mean_energy_per_link: energy_sum / trials.len() as f64,
            detection_fraction: fraction,
            detection_halfwidth: halfwidth,
            mean_latency_s: mean_latency,
        });
    }
    Ok(rows)
}
