//! Release acceptance suite. Each test checks one criterion end to end and
//! prints a `[acceptance] criterion N (<name>): PASS|FAIL` line (visible with
//! `cargo test --test acceptance -- --nocapture`).
//!
//! Monte Carlo criteria use fixed seeds and three-sigma binomial floors, so
//! they are deterministic and the tolerances are pinned below.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use cnd_core::metrics::{empirical_detection, EnergyModel, TrialMetrics};
use cnd_core::protocol::{
    estimate_degree_combined, estimate_degree_leader_avg, estimate_degree_self, issue_sync,
    Phase, Policy, ProtocolParams, Segment, SegmentId, SyncDedup, SyncDirective,
};
use cnd_core::simulator::{
    run_trial, ChannelConfig, Scenario, TimedEvent, TopologyChange, TrialSpec, WarmStart,
};
use cnd_core::time::{SimDuration, SimTime};
use cnd_core::topology::{place_uniform, NodeId, Pair, Position, RadioGraph};

use cnd_cli::batch::run_batch;
use cnd_cli::config::ExperimentPlan;

/// Guarantee parameters under test: detect with probability 0.9 within 100 s
/// a hidden node that duty-cycles 10% of every 1 s Init period.
const GUARANTEE_P: f64 = 0.9;
const GUARANTEE_T_S: f64 = 100.0;

const C1_TRIALS: usize = 1000;
const C2_PAIRS: usize = 200;
/// Energy per discovered link must be strictly lower in at least this
/// fraction of paired trials.
const C2_LOWER_FRACTION: f64 = 0.95;
const C3_FIXTURES: u64 = 20;
const C4_SEGMENTS: u64 = 100;
const C5_SEGMENTS: u64 = 100;
const C6_PLACEMENTS: u64 = 100;
const C7_CONFIGS: u64 = 10;
const C8_TRIALS: usize = 500;

/// Three-sigma lower bound on an empirical fraction whose true value is `p`.
fn monte_carlo_floor(p: f64, trials: usize) -> f64 {
    p - 3.0 * (p * (1.0 - p) / trials as f64).sqrt()
}

fn report(criterion: u32, name: &str, pass: bool) {
    println!(
        "[acceptance] criterion {criterion} ({name}): {}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn guarantee_params() -> ProtocolParams {
    // d = active_init / t_init = 0.1; detection_p / detection_t default to
    // the (0.9, 100 s) guarantee under test.
    let params = ProtocolParams::new(1.0, 10.0, 0.1, 0.1);
    assert_eq!(params.detection_p, GUARANTEE_P);
    assert_eq!(params.detection_t, SimDuration::from_secs_f64(GUARANTEE_T_S));
    params
}

/// Eight members on a circle, each adjacent to the two nearest neighbors per
/// side (in-segment degree 4 everywhere), plus one hidden node placed to hear
/// exactly four members. The leader-average estimate therefore equals the
/// hidden node's true member degree: the estimate is perfect.
fn ring_fixture() -> (RadioGraph, NodeId) {
    let mut positions: Vec<Position> = (0..8)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / 8.0;
            Position::new(10.0 * angle.cos(), 10.0 * angle.sin())
        })
        .collect();
    let angle = std::f64::consts::TAU / 16.0;
    positions.push(Position::new(13.0 * angle.cos(), 13.0 * angle.sin()));
    let graph = RadioGraph::build_graph(&positions, 16.0).unwrap();

    let members: BTreeSet<NodeId> = (0..8).map(NodeId).collect();
    let target = NodeId(8);
    assert_eq!(graph.in_segment_degree(target, &members).unwrap(), 4);
    for &m in &members {
        assert_eq!(graph.in_segment_degree(m, &members).unwrap(), 4);
    }
    (graph, target)
}

fn guarantee_spec(graph: &RadioGraph, target: NodeId, seed: u64) -> TrialSpec {
    let mut spec = TrialSpec::new(graph.clone(), guarantee_params(), 110.0, seed);
    spec.warm_start = WarmStart::Full;
    spec.target = Some(target);
    spec
}

#[test]
fn criterion_1_detection_guarantee() {
    let (graph, target) = ring_fixture();
    let metrics: Vec<TrialMetrics> = (0..C1_TRIALS)
        .into_par_iter()
        .map(|i| {
            run_trial(guarantee_spec(&graph, target, 0xC1_0000 + i as u64))
                .unwrap()
                .metrics
        })
        .collect();

    let (fraction, halfwidth) = empirical_detection(&metrics, GUARANTEE_T_S).unwrap();
    let floor = monte_carlo_floor(GUARANTEE_P, C1_TRIALS);
    let pass = fraction >= floor;
    report(1, "detection guarantee", pass);
    assert!(
        pass,
        "detected {fraction:.4} +/- {halfwidth:.4} of {C1_TRIALS} trials, need >= {floor:.4}"
    );
}

#[test]
fn criterion_2_energy_reduction() {
    let (graph, target) = ring_fixture();
    let model = EnergyModel::default();
    let pairs: Vec<(f64, f64, bool)> = (0..C2_PAIRS)
        .into_par_iter()
        .map(|i| {
            let run = |policy: Policy| {
                let mut spec = guarantee_spec(&graph, target, 0xC2_0000 + i as u64);
                spec.policy = policy;
                run_trial(spec).unwrap().metrics
            };
            let shared = run(Policy::LoadShared);
            let naive = run(Policy::AllInit);
            (
                model.energy_per_link(&shared).unwrap(),
                model.energy_per_link(&naive).unwrap(),
                shared.target.as_ref().unwrap().detected_within(GUARANTEE_T_S),
            )
        })
        .collect();

    let lower = pairs.iter().filter(|(s, n, _)| s < n).count() as f64 / C2_PAIRS as f64;
    let detected =
        pairs.iter().filter(|&&(_, _, d)| d).count() as f64 / C2_PAIRS as f64;
    let detection_floor = monte_carlo_floor(GUARANTEE_P, C2_PAIRS);
    let pass = lower >= C2_LOWER_FRACTION && detected >= detection_floor;
    report(2, "energy reduction", pass);
    assert!(
        pass,
        "energy/link lower in {lower:.3} of pairs (need >= {C2_LOWER_FRACTION}), \
         detection {detected:.3} (need >= {detection_floor:.4})"
    );
}

#[test]
fn criterion_3_burst_completeness() {
    let outcomes: Vec<(u64, usize, u64)> = (0..C3_FIXTURES)
        .into_par_iter()
        .map(|k| {
            let n = 5 + (3 * k as usize) % 16;
            let positions = place_uniform(n, 50.0, 50.0, 0xC3_0100 + k).unwrap();
            let graph = RadioGraph::build_graph(&positions, 22.0).unwrap();
            let params = guarantee_params();
            // The welcome burst spans two Normal base periods.
            assert_eq!(params.burst_window, params.t_normal_base.saturating_mul(2));
            let mut spec = TrialSpec::new(graph, params, 900.0, 0xC3_AA00 + k);
            spec.channel.collisions = false;
            let result = run_trial(spec).unwrap();
            let worst = result
                .burst_snapshots
                .iter()
                .map(|s| s.hidden_intra)
                .max()
                .unwrap_or(u64::MAX);
            (k, result.burst_snapshots.len(), worst)
        })
        .collect();

    let pass = outcomes.iter().all(|&(_, count, worst)| count > 0 && worst == 0);
    report(3, "burst completeness", pass);
    assert!(
        pass,
        "every burst must end with zero hidden in-segment links: {:?}",
        outcomes
            .iter()
            .filter(|&&(_, count, worst)| count == 0 || worst != 0)
            .collect::<Vec<_>>()
    );
}

/// Random segment over a random placement: a node subset together with the
/// physical links among its members.
fn random_segment(k: u64) -> (RadioGraph, BTreeSet<NodeId>, Segment) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4_0000 + k);
    let n = rng.gen_range(3..=50);
    let positions = place_uniform(n, 80.0, 80.0, 0xC4_AA00 + k).unwrap();
    let graph = RadioGraph::build_graph(&positions, rng.gen_range(20.0..45.0)).unwrap();

    let mut ids: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
    ids.shuffle(&mut rng);
    ids.truncate(rng.gen_range(2..=n));
    let members: BTreeSet<NodeId> = ids.into_iter().collect();
    let links: BTreeSet<Pair> = graph
        .all_links()
        .into_iter()
        .filter(|l| members.contains(&l.low()) && members.contains(&l.high()))
        .collect();
    let segment = Segment::assemble(SegmentId(0), members.clone(), links);
    (graph, members, segment)
}

#[test]
fn criterion_4_estimator_equivalence() {
    let mut pass = true;
    let mut detail = String::new();
    for k in 0..C4_SEGMENTS {
        let (graph, members, segment) = random_segment(k);

        // Leader average against the brute-force mean of true in-segment
        // degrees, bitwise equal.
        let oracle_sum: usize = members
            .iter()
            .map(|&m| graph.in_segment_degree(m, &members).unwrap())
            .sum();
        let oracle_mean = oracle_sum as f64 / members.len() as f64;
        let avg = estimate_degree_leader_avg(&segment).unwrap();
        if avg.value != oracle_mean || avg.stale {
            pass = false;
            detail = format!("segment {k}: leader avg {} != mean {oracle_mean}", avg.value);
            break;
        }

        for &m in &members {
            let own_oracle = graph.in_segment_degree(m, &members).unwrap() as f64;
            let own = estimate_degree_self(m, Phase::Normal, &segment).unwrap();
            let w0 = estimate_degree_combined(m, Phase::Normal, &segment, 0.0).unwrap();
            let w1 = estimate_degree_combined(m, Phase::Normal, &segment, 1.0).unwrap();
            if own.value != own_oracle || w0.value != avg.value || w1.value != own.value {
                pass = false;
                detail = format!(
                    "segment {k}, member {m}: self {} (true {own_oracle}), \
                     w=0 {} (avg {}), w=1 {} (self {})",
                    own.value, w0.value, avg.value, w1.value, own.value
                );
                break;
            }
        }
        if !pass {
            break;
        }
    }
    report(4, "estimator equivalence", pass);
    assert!(pass, "{detail}");
}

/// Largest connected component of a random placement, as a segment.
fn random_connected_segment(k: u64) -> Option<(BTreeSet<NodeId>, Segment, NodeId)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5_0000 + k);
    let n = rng.gen_range(2..=50);
    let positions = place_uniform(n, 70.0, 70.0, 0xC5_AA00 + k).unwrap();
    let graph = RadioGraph::build_graph(&positions, rng.gen_range(18.0..40.0)).unwrap();

    let mut best: BTreeSet<NodeId> = BTreeSet::new();
    let mut seen = vec![false; n];
    for start in 0..n as u32 {
        if seen[start as usize] {
            continue;
        }
        let mut component = BTreeSet::new();
        let mut queue = VecDeque::from([NodeId(start)]);
        seen[start as usize] = true;
        while let Some(at) = queue.pop_front() {
            component.insert(at);
            for &peer in graph.neighbors(at).unwrap() {
                if !seen[peer.index()] {
                    seen[peer.index()] = true;
                    queue.push_back(peer);
                }
            }
        }
        if component.len() > best.len() {
            best = component;
        }
    }
    if best.len() < 2 {
        return None;
    }

    let links: BTreeSet<Pair> = graph
        .all_links()
        .into_iter()
        .filter(|l| best.contains(&l.low()) && best.contains(&l.high()))
        .collect();
    let origin = *best.iter().nth(rng.gen_range(0..best.len())).unwrap();
    Some((best.clone(), Segment::assemble(SegmentId(0), best, links), origin))
}

/// Shortest hop count from `origin` over the segment's known links.
fn bfs_depths(segment: &Segment, origin: NodeId) -> BTreeMap<NodeId, u32> {
    let mut depths = BTreeMap::from([(origin, 0u32)]);
    let mut queue = VecDeque::from([origin]);
    while let Some(at) = queue.pop_front() {
        let next = depths[&at] + 1;
        for peer in segment.link_neighbors(at) {
            depths.entry(peer).or_insert_with(|| {
                queue.push_back(peer);
                next
            });
        }
    }
    depths
}

#[test]
fn criterion_5_flood_coverage() {
    let mut checked = 0u64;
    let mut k = 0u64;
    while checked < C5_SEGMENTS {
        let Some((members, segment, origin)) = random_connected_segment(k) else {
            k += 1;
            continue;
        };
        k += 1;
        checked += 1;

        let plan = issue_sync(origin, 7, &segment).unwrap();
        let depths = bfs_depths(&segment, origin);
        let covered: BTreeSet<NodeId> = plan.deliveries.keys().copied().collect();
        let pass = covered == members
            && plan.deliveries == depths
            && plan.transmissions.len() <= 2 * segment.known_links.len();
        if !pass {
            report(5, "flood coverage", false);
        }
        assert!(
            pass,
            "segment {} ({} members, {} links): coverage {}, depth ok {}, tx {} <= {}",
            k - 1,
            members.len(),
            segment.known_links.len(),
            covered == members,
            plan.deliveries == depths,
            plan.transmissions.len(),
            2 * segment.known_links.len()
        );

        // Replaying every relay through the duplicate filter processes each
        // member exactly once, duplicates rejected.
        let directive = SyncDirective {
            origin,
            seq: 7,
            segment: segment.id,
            burst_window: SimDuration::from_secs_f64(20.0),
            burst_period: SimDuration::from_secs_f64(1.0),
        };
        let mut dedup: BTreeMap<NodeId, SyncDedup> =
            members.iter().map(|&m| (m, SyncDedup::new())).collect();
        let mut processed: BTreeMap<NodeId, u32> = BTreeMap::new();
        assert!(dedup.get_mut(&origin).unwrap().should_process(&directive));
        processed.insert(origin, 1);
        for &(_, to) in &plan.transmissions {
            if dedup.get_mut(&to).unwrap().should_process(&directive) {
                *processed.entry(to).or_insert(0) += 1;
            }
        }
        let once = members.iter().all(|m| processed.get(m) == Some(&1));
        if !once {
            report(5, "flood coverage", false);
        }
        assert!(once, "segment {}: duplicate or missed processing", k - 1);
    }
    report(5, "flood coverage", true);
}

#[test]
fn criterion_6_adjacency_oracles() {
    let mut pass = true;
    let mut detail = String::new();
    for k in 0..C6_PLACEMENTS {
        let positions = place_uniform(50, 100.0, 100.0, 0xC6_0000 + k).unwrap();
        let mut graph = RadioGraph::build_graph(&positions, 20.0).unwrap();
        // Half the placements also exercise the min-range rule with one
        // boosted node: a link needs the distance within BOTH ranges.
        if k % 2 == 1 {
            graph.increase_range(NodeId((k % 50) as u32), 35.0).unwrap();
        }

        let mut brute: BTreeSet<Pair> = BTreeSet::new();
        for i in 0..50u32 {
            for j in (i + 1)..50 {
                let (a, b) = (NodeId(i), NodeId(j));
                let (pa, pb) = (graph.position(a).unwrap(), graph.position(b).unwrap());
                let (dx, dy) = (pa.x - pb.x, pa.y - pb.y);
                let r = graph.range(a).unwrap().min(graph.range(b).unwrap());
                if dx * dx + dy * dy <= r * r {
                    brute.insert(Pair::new(a, b));
                }
            }
        }
        let all = graph.all_links();
        if all != brute {
            pass = false;
            detail = format!("placement {k}: adjacency differs from brute force");
            break;
        }

        let discovered: BTreeSet<Pair> =
            all.iter().enumerate().filter(|(i, _)| i % 3 == 0).map(|(_, &l)| l).collect();
        let hidden = graph.hidden_links(&discovered).unwrap();
        if hidden.intersection(&discovered).count() != 0
            || hidden.union(&discovered).copied().collect::<BTreeSet<_>>() != all
        {
            pass = false;
            detail = format!("placement {k}: hidden/discovered is not a partition");
            break;
        }
    }
    report(6, "adjacency oracles", pass);
    assert!(pass, "{detail}");
}

fn randomized_plan(k: u64) -> ExperimentPlan {
    let n = 4 + (k as usize % 9);
    let positions = place_uniform(n, 45.0, 45.0, 0xC7_0000 + k).unwrap();
    let graph = RadioGraph::build_graph(&positions, 18.0).unwrap();
    let mut events = Vec::new();
    match k % 3 {
        0 => events.push(TimedEvent {
            at: SimTime::from_secs_f64(50.0),
            change: TopologyChange::Desync { node: NodeId(0) },
        }),
        1 => events.push(TimedEvent {
            at: SimTime::from_secs_f64(60.0),
            change: TopologyChange::NodeJoin {
                position: Position::new(22.0, 22.0),
            },
        }),
        _ => {
            if let Some(&link) = graph.all_links().iter().next() {
                events.push(TimedEvent {
                    at: SimTime::from_secs_f64(40.0),
                    change: TopologyChange::Disrupt {
                        link,
                        until: SimTime::from_secs_f64(75.0),
                    },
                });
            }
        }
    }
    ExperimentPlan {
        graph,
        params: guarantee_params(),
        channel: ChannelConfig::default(),
        scenario: Scenario::new(events),
        policies: if k.is_multiple_of(2) {
            vec![Policy::LoadShared, Policy::AllInit]
        } else {
            vec![Policy::LoadShared]
        },
        warm_start: WarmStart::Off,
        target: None,
        horizon: SimDuration::from_secs_f64(120.0 + 10.0 * k as f64),
        trials: 2,
        seed: 900 + k,
        trace: true,
    }
}

#[test]
fn criterion_7_determinism() {
    for k in 0..C7_CONFIGS {
        let plan = randomized_plan(k);
        let (dir_a, dir_b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_batch(&plan, dir_a.path()).unwrap();
        run_batch(&plan, dir_b.path()).unwrap();

        let listing = |dir: &std::path::Path| {
            let mut files: Vec<_> = std::fs::read_dir(dir)
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            files.sort();
            files
        };
        let (a, b) = (listing(dir_a.path()), listing(dir_b.path()));
        let mut pass = a.len() == b.len() && a.len() >= 3; // 2 CSVs + traces
        if pass {
            for (x, y) in a.iter().zip(&b) {
                if x.file_name() != y.file_name()
                    || std::fs::read(x).unwrap() != std::fs::read(y).unwrap()
                {
                    pass = false;
                    break;
                }
            }
        }
        if !pass {
            report(7, "determinism", false);
        }
        assert!(pass, "config {k}: repeated runs differ");
    }
    report(7, "determinism", true);
}

fn triangle() -> RadioGraph {
    let positions = [
        Position::new(0.0, 0.0),
        Position::new(8.0, 0.0),
        Position::new(4.0, 6.0),
    ];
    let graph = RadioGraph::build_graph(&positions, 10.0).unwrap();
    assert_eq!(graph.all_links().len(), 3);
    graph
}

/// Fraction of seeds for which every physically present link is mutually
/// known at the horizon.
fn recovery_fraction(
    graph: &RadioGraph,
    events: Vec<TimedEvent>,
    horizon_s: f64,
    base_seed: u64,
) -> f64 {
    let recovered = (0..C8_TRIALS)
        .into_par_iter()
        .filter(|&i| {
            let mut spec =
                TrialSpec::new(graph.clone(), guarantee_params(), horizon_s, base_seed + i as u64);
            spec.scenario = Scenario::new(events.clone());
            run_trial(spec).unwrap().metrics.links_complete_at_end
        })
        .count();
    recovered as f64 / C8_TRIALS as f64
}

#[test]
fn criterion_8_dynamic_recovery() {
    let at = SimTime::from_secs_f64;

    // One member loses all protocol state mid-run.
    let desync = recovery_fraction(
        &triangle(),
        vec![TimedEvent {
            at: at(60.0),
            change: TopologyChange::Desync { node: NodeId(2) },
        }],
        600.0,
        0xC8_1000,
    );

    // A redundant link outage outlives the staleness timeout, so both ends
    // forget it and must rediscover from inside the segment (the slow path).
    let disruption = recovery_fraction(
        &triangle(),
        vec![TimedEvent {
            at: at(50.0),
            change: TopologyChange::Disrupt {
                link: Pair::new(NodeId(0), NodeId(1)),
                until: at(110.0),
            },
        }],
        1600.0,
        0xC8_2000,
    );

    // A new node appears next to three members of a converged segment.
    let star = RadioGraph::build_graph(
        &[
            Position::new(0.0, 0.0),
            Position::new(8.0, 0.0),
            Position::new(16.0, 0.0),
            Position::new(8.0, 8.0),
            Position::new(8.0, -8.0),
        ],
        10.0,
    )
    .unwrap();
    assert_eq!(star.all_links().len(), 4);
    let join = recovery_fraction(
        &star,
        vec![TimedEvent {
            at: at(100.0),
            change: TopologyChange::NodeJoin {
                position: Position::new(12.0, 4.0),
            },
        }],
        600.0,
        0xC8_3000,
    );

    // Two mutually deaf nodes raise their power until a link exists.
    let pair = RadioGraph::build_graph(
        &[Position::new(0.0, 0.0), Position::new(20.0, 0.0)],
        15.0,
    )
    .unwrap();
    assert!(pair.all_links().is_empty());
    let power = recovery_fraction(
        &pair,
        vec![
            TimedEvent {
                at: at(60.0),
                change: TopologyChange::PowerIncrease {
                    node: NodeId(0),
                    range: 25.0,
                },
            },
            TimedEvent {
                at: at(60.0),
                change: TopologyChange::PowerIncrease {
                    node: NodeId(1),
                    range: 25.0,
                },
            },
        ],
        300.0,
        0xC8_4000,
    );

    let pass = [desync, disruption, join, power].iter().all(|&f| f >= GUARANTEE_P);
    report(8, "dynamic recovery", pass);
    assert!(
        pass,
        "recovered fractions (need >= {GUARANTEE_P}): desync {desync:.3}, \
         disruption {disruption:.3}, join {join:.3}, power increase {power:.3}"
    );
}
