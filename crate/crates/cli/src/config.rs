//! TOML experiment configuration: schema, exhaustive validation, and the
//! build step that turns a file into runnable trial ingredients.
//!
//! Validation never stops at the first problem: every violation is collected
//! and reported with the config key it belongs to, so a bad file is fixed in
//! one round trip.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use cnd_core::protocol::{EstimatorKind, Policy, ProtocolParams};
use cnd_core::simulator::{ChannelConfig, Scenario, TimedEvent, TopologyChange, WarmStart};
use cnd_core::time::{SimDuration, SimTime};
use cnd_core::topology::{place_uniform, NodeId, Pair, Position, RadioGraph};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config does not parse: {0}")]
    Parse(#[from] toml::de::Error),
    /// One line per violation, each naming the offending key.
    #[error("invalid config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

/// Top-level TOML schema.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub topology: TopologySection,
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub channel: ChannelSection,
    pub run: RunSection,
    #[serde(default)]
    pub events: Vec<EventSection>,
}

/// Either an explicit position list or a seeded uniform placement.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub nodes: Option<usize>,
    pub width: Option<f64>,
    pub height: Option<f64>,
    pub seed: Option<u64>,
    pub positions: Option<Vec<[f64; 2]>>,
    pub range: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub t_init_s: f64,
    pub t_normal_base_s: f64,
    pub active_init_s: f64,
    pub active_normal_s: f64,
    pub init_timeout_s: Option<f64>,
    pub detection_p: Option<f64>,
    pub detection_t_s: Option<f64>,
    pub burst_window_s: Option<f64>,
    pub burst_period_s: Option<f64>,
    /// "leader_average" (default), "self_degree", or "combined".
    pub estimator: Option<String>,
    pub correlation_weight: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub hello_airtime_ms: f64,
    pub sync_hop_latency_ms: f64,
    pub ack_jitter_cap_ms: f64,
    pub collisions: bool,
}

impl Default for ChannelSection {
    fn default() -> ChannelSection {
        ChannelSection {
            hello_airtime_ms: 1.0,
            sync_hop_latency_ms: 5.0,
            ack_jitter_cap_ms: 20.0,
            collisions: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub horizon_s: f64,
    pub trials: usize,
    pub seed: u64,
    /// Policies run side by side on identical seeds; any of "load_shared",
    /// "all_init", "oracle_degree".
    pub policies: Option<Vec<String>>,
    /// "off" (default), "full", or "tree".
    pub warm_start: Option<String>,
    pub target: Option<u32>,
    #[serde(default)]
    pub trace: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventSection {
    LinkDown {
        at_s: f64,
        a: u32,
        b: u32,
        until_s: f64,
    },
    NodeJoin {
        at_s: f64,
        x: f64,
        y: f64,
    },
    PowerIncrease {
        at_s: f64,
        node: u32,
        range: f64,
    },
    Desync {
        at_s: f64,
        node: u32,
    },
}

impl EventSection {
    fn at_s(&self) -> f64 {
        match *self {
            EventSection::LinkDown { at_s, .. }
            | EventSection::NodeJoin { at_s, .. }
            | EventSection::PowerIncrease { at_s, .. }
            | EventSection::Desync { at_s, .. } => at_s,
        }
    }
}

/// Everything needed to run the configured experiment.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub graph: RadioGraph,
    pub params: ProtocolParams,
    pub channel: ChannelConfig,
    pub scenario: Scenario,
    pub policies: Vec<Policy>,
    pub warm_start: WarmStart,
    pub target: Option<NodeId>,
    pub horizon: SimDuration,
    pub trials: usize,
    pub seed: u64,
    pub trace: bool,
}

impl ScenarioConfig {
    pub fn from_path(path: &Path) -> Result<ScenarioConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(toml::from_str(&text)?)
    }

    /// Validates every section and assembles the plan. All violations are
    /// reported together.
    pub fn build(&self) -> Result<ExperimentPlan, ConfigError> {
        let mut problems = Vec::new();

        let positions = self.checked_positions(&mut problems);
        self.check_protocol(&mut problems);
        self.check_channel(&mut problems);
        let policies = self.checked_policies(&mut problems);
        let warm_start = self.checked_warm_start(&mut problems);
        self.check_run(&mut problems);

        // Structural checks need an actual graph; skip them if the layout
        // itself is already broken.
        let graph = positions.and_then(|p| match RadioGraph::build_graph(&p, self.topology.range)
        {
            Ok(g) => Some(g),
            Err(e) => {
                problems.push(format!("topology: {e}"));
                None
            }
        });

        let params = self.assemble_params();
        if let Err(e) = params.validate() {
            problems.push(format!("protocol: {e}"));
        }
        let channel = self.assemble_channel();
        if let Err(e) = channel.validate() {
            problems.push(format!("channel: {e}"));
        }
        if channel.hello_airtime >= params.active_init {
            problems.push(
                "channel.hello_airtime_ms: a HELLO must fit inside protocol.active_init_s".into(),
            );
        }
        if channel.hello_airtime >= params.active_normal {
            problems.push(
                "channel.hello_airtime_ms: a HELLO must fit inside protocol.active_normal_s"
                    .into(),
            );
        }

        let horizon = SimDuration::from_secs_f64(self.run.horizon_s.max(0.0));
        let scenario = self.assemble_scenario(&mut problems);
        if let (Some(graph), Some(scenario)) = (&graph, &scenario) {
            if let Err(diags) = scenario.validate(graph, horizon) {
                problems.extend(diags.into_iter().map(|d| format!("events: {d}")));
            }
        }

        // The target indexes the final id space: initial nodes first, then
        // joiners in event order.
        if let (Some(t), Some(graph)) = (self.run.target, &graph) {
            let joins = self
                .events
                .iter()
                .filter(|e| matches!(e, EventSection::NodeJoin { .. }))
                .count();
            let total = graph.node_count() + joins;
            if (t as usize) >= total {
                problems.push(format!(
                    "run.target: node {t} does not exist ({total} nodes including joiners)"
                ));
            }
        }
        if policies
            .as_deref()
            .is_some_and(|p| p.contains(&Policy::OracleDegree))
            && self.run.target.is_none()
        {
            problems.push("run.policies: oracle_degree requires run.target".into());
        }

        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems));
        }
        Ok(ExperimentPlan {
            graph: graph.expect("validated above"),
            params,
            channel,
            scenario: scenario.expect("validated above"),
            policies: policies.expect("validated above"),
            warm_start: warm_start.expect("validated above"),
            target: self.run.target.map(NodeId),
            horizon,
            trials: self.run.trials,
            seed: self.run.seed,
            trace: self.run.trace,
        })
    }

    fn checked_positions(&self, problems: &mut Vec<String>) -> Option<Vec<Position>> {
        let t = &self.topology;
        if !t.range.is_finite() || t.range <= 0.0 {
            problems.push(format!(
                "topology.range: must be positive and finite, got {}",
                t.range
            ));
        }
        match (&t.positions, t.nodes) {
            (Some(_), Some(_)) => {
                problems
                    .push("topology: `nodes` and `positions` are mutually exclusive".into());
                None
            }
            (None, None) => {
                problems.push("topology: specify either `nodes` or `positions`".into());
                None
            }
            (Some(list), None) => {
                if list.is_empty() {
                    problems.push("topology.positions: must not be empty".into());
                    return None;
                }
                let mut out = Vec::with_capacity(list.len());
                for (i, [x, y]) in list.iter().enumerate() {
                    if !x.is_finite() || !y.is_finite() {
                        problems.push(format!(
                            "topology.positions[{i}]: coordinates must be finite, got ({x}, {y})"
                        ));
                    }
                    out.push(Position::new(*x, *y));
                }
                Some(out)
            }
            (None, Some(n)) => {
                let mut ok = true;
                if n == 0 {
                    problems.push("topology.nodes: must be at least 1".into());
                    ok = false;
                }
                for (key, v) in [("width", t.width), ("height", t.height)] {
                    match v {
                        Some(v) if v.is_finite() && v > 0.0 => {}
                        Some(v) => {
                            problems.push(format!(
                                "topology.{key}: must be positive and finite, got {v}"
                            ));
                            ok = false;
                        }
                        None => {
                            problems.push(format!(
                                "topology.{key}: required for random placement"
                            ));
                            ok = false;
                        }
                    }
                }
                if t.seed.is_none() {
                    problems.push("topology.seed: required for random placement".into());
                    ok = false;
                }
                if !ok {
                    return None;
                }
                match place_uniform(n, t.width.unwrap(), t.height.unwrap(), t.seed.unwrap()) {
                    Ok(p) => Some(p),
                    Err(e) => {
                        problems.push(format!("topology: {e}"));
                        None
                    }
                }
            }
        }
    }

    fn check_protocol(&self, problems: &mut Vec<String>) {
        let p = &self.protocol;
        let required = [
            ("t_init_s", p.t_init_s),
            ("t_normal_base_s", p.t_normal_base_s),
            ("active_init_s", p.active_init_s),
            ("active_normal_s", p.active_normal_s),
        ];
        for (key, v) in required {
            if !v.is_finite() || v <= 0.0 {
                problems.push(format!(
                    "protocol.{key}: must be positive and finite, got {v}"
                ));
            }
        }
        let optional = [
            ("init_timeout_s", p.init_timeout_s),
            ("detection_t_s", p.detection_t_s),
            ("burst_window_s", p.burst_window_s),
            ("burst_period_s", p.burst_period_s),
        ];
        for (key, v) in optional {
            if let Some(v) = v {
                if !v.is_finite() || v <= 0.0 {
                    problems.push(format!(
                        "protocol.{key}: must be positive and finite, got {v}"
                    ));
                }
            }
        }
        if let Some(dp) = p.detection_p {
            if !(dp > 0.0 && dp < 1.0) {
                problems.push(format!(
                    "protocol.detection_p: must lie strictly between 0 and 1, got {dp}"
                ));
            }
        }
        if let Some(w) = p.correlation_weight {
            if !(0.0..=1.0).contains(&w) {
                problems.push(format!(
                    "protocol.correlation_weight: must lie in [0, 1], got {w}"
                ));
            }
        }
        if let Some(e) = &p.estimator {
            if parse_estimator(e).is_none() {
                problems.push(format!(
                    "protocol.estimator: expected one of leader_average, self_degree, combined; got {e:?}"
                ));
            }
        }
    }

    fn check_channel(&self, problems: &mut Vec<String>) {
        let c = &self.channel;
        for (key, v, must_be_positive) in [
            ("hello_airtime_ms", c.hello_airtime_ms, true),
            ("sync_hop_latency_ms", c.sync_hop_latency_ms, true),
            ("ack_jitter_cap_ms", c.ack_jitter_cap_ms, false),
        ] {
            let bad = !v.is_finite() || v < 0.0 || (must_be_positive && v == 0.0);
            if bad {
                let kind = if must_be_positive { "positive" } else { "non-negative" };
                problems.push(format!("channel.{key}: must be {kind} and finite, got {v}"));
            }
        }
    }

    fn check_run(&self, problems: &mut Vec<String>) {
        if !self.run.horizon_s.is_finite() || self.run.horizon_s <= 0.0 {
            problems.push(format!(
                "run.horizon_s: must be positive and finite, got {}",
                self.run.horizon_s
            ));
        }
        if self.run.trials == 0 {
            problems.push("run.trials: must be at least 1".into());
        }
    }

    fn checked_policies(&self, problems: &mut Vec<String>) -> Option<Vec<Policy>> {
        let names = match &self.run.policies {
            None => return Some(vec![Policy::LoadShared]),
            Some(names) if names.is_empty() => {
                problems.push("run.policies: must not be empty".into());
                return None;
            }
            Some(names) => names,
        };
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let mut ok = true;
        for name in names {
            match parse_policy(name) {
                Some(p) => {
                    if !seen.insert(name.clone()) {
                        problems.push(format!("run.policies: {name:?} listed twice"));
                        ok = false;
                    }
                    out.push(p);
                }
                None => {
                    problems.push(format!(
                        "run.policies: expected one of load_shared, all_init, oracle_degree; got {name:?}"
                    ));
                    ok = false;
                }
            }
        }
        ok.then_some(out)
    }

    fn checked_warm_start(&self, problems: &mut Vec<String>) -> Option<WarmStart> {
        match self.run.warm_start.as_deref() {
            None | Some("off") => Some(WarmStart::Off),
            Some("full") => Some(WarmStart::Full),
            Some("tree") => Some(WarmStart::Tree),
            Some(other) => {
                problems.push(format!(
                    "run.warm_start: expected one of off, full, tree; got {other:?}"
                ));
                None
            }
        }
    }

    fn assemble_params(&self) -> ProtocolParams {
        let p = &self.protocol;
        let mut params = ProtocolParams::new(
            p.t_init_s.max(f64::MIN_POSITIVE),
            p.t_normal_base_s.max(f64::MIN_POSITIVE),
            p.active_init_s.max(f64::MIN_POSITIVE),
            p.active_normal_s.max(f64::MIN_POSITIVE),
        );
        if let Some(v) = p.init_timeout_s {
            params.init_timeout = SimDuration::from_secs_f64(v);
        }
        if let Some(v) = p.detection_p {
            params.detection_p = v;
        }
        if let Some(v) = p.detection_t_s {
            params.detection_t = SimDuration::from_secs_f64(v);
        }
        if let Some(v) = p.burst_window_s {
            params.burst_window = SimDuration::from_secs_f64(v);
        }
        if let Some(v) = p.burst_period_s {
            params.burst_period = SimDuration::from_secs_f64(v);
        }
        if let Some(e) = p.estimator.as_deref().and_then(parse_estimator) {
            params.estimator = e;
        }
        if let Some(w) = p.correlation_weight {
            params.correlation_weight = w;
        }
        params
    }

    fn assemble_channel(&self) -> ChannelConfig {
        let c = &self.channel;
        let ms = |v: f64| SimDuration::from_secs_f64(v.max(0.0) / 1000.0);
        ChannelConfig {
            hello_airtime: ms(c.hello_airtime_ms),
            sync_hop_latency: ms(c.sync_hop_latency_ms),
            ack_jitter_cap: ms(c.ack_jitter_cap_ms),
            collisions: c.collisions,
        }
    }

    fn assemble_scenario(&self, problems: &mut Vec<String>) -> Option<Scenario> {
        let mut events = Vec::with_capacity(self.events.len());
        let mut ok = true;
        for (i, event) in self.events.iter().enumerate() {
            let at_s = event.at_s();
            if !at_s.is_finite() || at_s < 0.0 {
                problems.push(format!(
                    "events[{i}].at_s: must be non-negative and finite, got {at_s}"
                ));
                ok = false;
                continue;
            }
            let at = SimTime::from_secs_f64(at_s);
            let change = match *event {
                EventSection::LinkDown { a, b, until_s, .. } => {
                    if a == b {
                        problems.push(format!(
                            "events[{i}]: a link needs two distinct endpoints, got {a} twice"
                        ));
                        ok = false;
                        continue;
                    }
                    if !until_s.is_finite() || until_s < at_s {
                        problems.push(format!(
                            "events[{i}].until_s: must not precede at_s, got {until_s}"
                        ));
                        ok = false;
                        continue;
                    }
                    TopologyChange::Disrupt {
                        link: Pair::new(NodeId(a), NodeId(b)),
                        until: SimTime::from_secs_f64(until_s),
                    }
                }
                EventSection::NodeJoin { x, y, .. } => TopologyChange::NodeJoin {
                    position: Position::new(x, y),
                },
                EventSection::PowerIncrease { node, range, .. } => TopologyChange::PowerIncrease {
                    node: NodeId(node),
                    range,
                },
                EventSection::Desync { node, .. } => TopologyChange::Desync { node: NodeId(node) },
            };
            events.push(TimedEvent { at, change });
        }
        ok.then(|| Scenario::new(events))
    }
}

fn parse_policy(name: &str) -> Option<Policy> {
    match name {
        "load_shared" => Some(Policy::LoadShared),
        "all_init" => Some(Policy::AllInit),
        "oracle_degree" => Some(Policy::OracleDegree),
        _ => None,
    }
}

fn parse_estimator(name: &str) -> Option<EstimatorKind> {
    match name {
        "leader_average" => Some(EstimatorKind::LeaderAverage),
        "self_degree" => Some(EstimatorKind::SelfDegree),
        "combined" => Some(EstimatorKind::Combined),
        _ => None,
    }
}

impl fmt::Display for ExperimentPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} nodes, {} physical links, horizon {:.1}s, {} trial(s) x {} policy(ies), seed {}",
            self.graph.node_count(),
            self.graph.all_links().len(),
            self.horizon.as_secs_f64(),
            self.trials,
            self.policies.len(),
            self.seed,
        )
    }
}
