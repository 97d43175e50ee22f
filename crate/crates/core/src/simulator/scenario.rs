//! Scheduled topology changes: disruptions, joins, power increases, state
//! loss.
//!
//! A scenario is validated against the topology it will run on by replaying
//! the changes onto a scratch copy of the graph in time order, so a change
//! is judged against the world as it will exist when the change fires, not
//! the initial layout. Validation reports every violation, not just the
//! first.

use serde::{Deserialize, Serialize};

use crate::time::{SimDuration, SimTime};
use crate::topology::{NodeId, Pair, Position, RadioGraph};

/// A physical or state change applied at a scheduled instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TopologyChange {
    /// The link is blocked from the event time until `until` (exclusive).
    /// Keeping it shorter than the staleness timeout makes it invisible to
    /// the protocol.
    Disrupt { link: Pair, until: SimTime },
    /// A new node appears at the given position with the default range.
    /// Joining nodes take ids after the initial layout, in event order.
    NodeJoin { position: Position },
    /// The node's transmit/receive range grows. Links only form where both
    /// endpoints' ranges cover the distance, so a single increase between
    /// equal-range nodes changes nothing.
    PowerIncrease { node: NodeId, range: f64 },
    /// The node loses all protocol state (reboot): neighbors keep stale
    /// records of it until they time out.
    Desync { node: NodeId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub at: SimTime,
    pub change: TopologyChange,
}

/// Time-ordered list of changes. Construction sorts by time, preserving the
/// written order among simultaneous events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    events: Vec<TimedEvent>,
}

impl Scenario {
    pub fn new(mut events: Vec<TimedEvent>) -> Scenario {
        events.sort_by_key(|e| e.at);
        Scenario { events }
    }

    pub fn empty() -> Scenario {
        Scenario::default()
    }

    pub fn events(&self) -> &[TimedEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Nodes the scenario adds, in id order (first joiner gets the first id
    /// after the initial layout).
    pub fn joiners(&self) -> Vec<Position> {
        self.events
            .iter()
            .filter_map(|e| match e.change {
                TopologyChange::NodeJoin { position } => Some(position),
                _ => None,
            })
            .collect()
    }

    /// Replays the scenario against a copy of `graph` and collects every
    /// violation. An empty result means the scenario can run.
    pub fn validate(&self, graph: &RadioGraph, horizon: SimDuration) -> Result<(), Vec<String>> {
        let mut diagnostics = Vec::new();
        let mut evolved = graph.clone();
        let horizon_end = SimTime::ZERO + horizon;
        for (i, event) in self.events.iter().enumerate() {
            let label = format!("event {i} at {}", event.at);
            if event.at > horizon_end {
                diagnostics.push(format!("{label}: lies beyond the horizon ({horizon_end})"));
            }
            match event.change {
                TopologyChange::Disrupt { link, until } => {
                    if until < event.at {
                        diagnostics.push(format!(
                            "{label}: disruption of {link} ends at {until}, before it starts"
                        ));
                    }
                    let exists = evolved.contains(link.low()) && evolved.contains(link.high());
                    if !exists {
                        diagnostics.push(format!(
                            "{label}: disruption names unknown node(s) in {link}"
                        ));
                    } else if !evolved.is_adjacent(link.low(), link.high()) {
                        diagnostics.push(format!(
                            "{label}: {link} is not a physical link when the disruption starts"
                        ));
                    }
                }
                TopologyChange::NodeJoin { position } => {
                    if !position.x.is_finite() || !position.y.is_finite() {
                        diagnostics.push(format!(
                            "{label}: join position ({}, {}) is not finite",
                            position.x, position.y
                        ));
                    } else {
                        evolved.add_node(position);
                    }
                }
                TopologyChange::PowerIncrease { node, range } => {
                    if !evolved.contains(node) {
                        diagnostics.push(format!("{label}: power increase names unknown node {node}"));
                    } else if let Err(e) = evolved.increase_range(node, range) {
                        diagnostics.push(format!("{label}: {e}"));
                    }
                }
                TopologyChange::Desync { node } => {
                    if !evolved.contains(node) {
                        diagnostics.push(format!("{label}: desync names unknown node {node}"));
                    }
                }
            }
        }
        if diagnostics.is_empty() {
            Ok(())
        } else {
            Err(diagnostics)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_graph() -> RadioGraph {
        // Unit square with range 1: the two diagonals are missing.
        let positions = vec![
            Position::new(0.0, 0.0),
            Position::new(1.0, 0.0),
            Position::new(0.0, 1.0),
            Position::new(1.0, 1.0),
        ];
        RadioGraph::build_graph(&positions, 1.0).unwrap()
    }

    fn t(s: f64) -> SimTime {
        SimTime::from_secs_f64(s)
    }

    fn horizon() -> SimDuration {
        SimDuration::from_secs_f64(100.0)
    }

    #[test]
    fn events_sort_by_time_keeping_written_order_for_ties() {
        let scenario = Scenario::new(vec![
            TimedEvent {
                at: t(5.0),
                change: TopologyChange::Desync { node: NodeId(0) },
            },
            TimedEvent {
                at: t(1.0),
                change: TopologyChange::Desync { node: NodeId(1) },
            },
            TimedEvent {
                at: t(5.0),
                change: TopologyChange::Desync { node: NodeId(2) },
            },
        ]);
        let order: Vec<NodeId> = scenario
            .events()
            .iter()
            .map(|e| match e.change {
                TopologyChange::Desync { node } => node,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec![NodeId(1), NodeId(0), NodeId(2)]);
    }

    #[test]
    fn valid_scenario_passes() {
        let scenario = Scenario::new(vec![
            TimedEvent {
                at: t(1.0),
                change: TopologyChange::Disrupt {
                    link: Pair::new(NodeId(0), NodeId(1)),
                    until: t(40.0),
                },
            },
            TimedEvent {
                at: t(2.0),
                change: TopologyChange::NodeJoin {
                    position: Position::new(0.5, 0.5),
                },
            },
            TimedEvent {
                at: t(3.0),
                change: TopologyChange::Desync { node: NodeId(4) }, // the joiner
            },
        ]);
        assert!(scenario.validate(&square_graph(), horizon()).is_ok());
    }

    #[test]
    fn every_violation_is_reported() {
        let scenario = Scenario::new(vec![
            TimedEvent {
                at: t(1.0),
                change: TopologyChange::Disrupt {
                    link: Pair::new(NodeId(0), NodeId(3)), // diagonal: no link
                    until: t(0.5),                         // and ends before it starts
                },
            },
            TimedEvent {
                at: t(200.0), // beyond the horizon
                change: TopologyChange::Desync { node: NodeId(9) }, // unknown node
            },
            TimedEvent {
                at: t(2.0),
                change: TopologyChange::PowerIncrease {
                    node: NodeId(0),
                    range: 0.5, // shrinking is not allowed
                },
            },
        ]);
        let diagnostics = scenario.validate(&square_graph(), horizon()).unwrap_err();
        assert_eq!(diagnostics.len(), 5, "got: {diagnostics:#?}");
    }

    #[test]
    fn changes_are_judged_against_the_evolved_graph() {
        // Disrupting a diagonal is fine once a power increase created it.
        let raise = |node, at_s| TimedEvent {
            at: t(at_s),
            change: TopologyChange::PowerIncrease {
                node,
                range: 1.5,
            },
        };
        let disrupt = TimedEvent {
            at: t(3.0),
            change: TopologyChange::Disrupt {
                link: Pair::new(NodeId(0), NodeId(3)),
                until: t(10.0),
            },
        };
        let too_early = Scenario::new(vec![disrupt.clone(), raise(NodeId(0), 4.0), raise(NodeId(3), 5.0)]);
        assert!(too_early.validate(&square_graph(), horizon()).is_err());

        let in_order = Scenario::new(vec![raise(NodeId(0), 1.0), raise(NodeId(3), 2.0), disrupt]);
        assert!(in_order.validate(&square_graph(), horizon()).is_ok());
    }

    #[test]
    fn one_sided_power_increase_adds_no_link() {
        // Raising only one endpoint leaves the diagonal missing under the
        // mutual-range rule, so disrupting it is still invalid.
        let scenario = Scenario::new(vec![
            TimedEvent {
                at: t(1.0),
                change: TopologyChange::PowerIncrease {
                    node: NodeId(0),
                    range: 2.0,
                },
            },
            TimedEvent {
                at: t(2.0),
                change: TopologyChange::Disrupt {
                    link: Pair::new(NodeId(0), NodeId(3)),
                    until: t(10.0),
                },
            },
        ]);
        let diagnostics = scenario.validate(&square_graph(), horizon()).unwrap_err();
        assert_eq!(diagnostics.len(), 1);
        assert!(diagnostics[0].contains("not a physical link"));
    }

    #[test]
    fn joiners_are_listed_in_event_order() {
        let scenario = Scenario::new(vec![
            TimedEvent {
                at: t(9.0),
                change: TopologyChange::NodeJoin {
                    position: Position::new(2.0, 2.0),
                },
            },
            TimedEvent {
                at: t(1.0),
                change: TopologyChange::NodeJoin {
                    position: Position::new(3.0, 3.0),
                },
            },
        ]);
        let joiners = scenario.joiners();
        assert_eq!(joiners.len(), 2);
        assert_eq!(joiners[0], Position::new(3.0, 3.0));
    }
}
