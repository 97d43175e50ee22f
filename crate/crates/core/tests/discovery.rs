//! End-to-end discovery behavior of the trial engine.

use cnd_core::protocol::{Phase, Policy, ProtocolParams};
use cnd_core::simulator::{run_trial, TrialSpec};
use cnd_core::topology::{NodeId, Position, RadioGraph};

fn params() -> ProtocolParams {
    ProtocolParams::new(1.0, 10.0, 0.1, 0.1)
}

fn line(n: usize, spacing: f64, range: f64) -> RadioGraph {
    let positions: Vec<Position> = (0..n)
        .map(|i| Position::new(spacing * i as f64, 0.0))
        .collect();
    RadioGraph::build_graph(&positions, range).unwrap()
}

#[test]
fn adjacent_pair_forms_a_segment() {
    let spec = TrialSpec::new(line(2, 5.0, 10.0), params(), 120.0, 3);
    let r = run_trial(spec).unwrap();
    assert!(r.metrics.links_complete_at_end);
    assert_eq!(r.metrics.links_discovered, 1);
    assert_eq!(r.segments.len(), 1);
    let segment = r.segments.iter().next().unwrap();
    assert_eq!(segment.leader, NodeId(0), "the leader is the smallest member id");
    assert_eq!(segment.members.len(), 2);
    for node in &r.nodes {
        assert_eq!(node.phase, Phase::Normal);
        assert_eq!(node.segment_id, Some(segment.id));
        assert!(node.invariant_holds());
    }
}

#[test]
fn nodes_out_of_range_never_meet() {
    // 5.0 spacing but 4.0 range: no physical links, nothing to discover.
    let spec = TrialSpec::new(line(2, 5.0, 4.0), params(), 120.0, 3);
    let r = run_trial(spec).unwrap();
    assert!(r.metrics.links_complete_at_end, "no links means nothing is missing");
    assert_eq!(r.metrics.links_discovered, 0);
    assert!(r.segments.is_empty());
    for node in &r.nodes {
        assert_eq!(node.phase, Phase::Init);
        assert!(node.known_neighbors.is_empty());
    }
}

#[test]
fn a_path_converges_to_one_segment() {
    let spec = TrialSpec::new(line(5, 8.0, 10.0), params(), 300.0, 11);
    let r = run_trial(spec).unwrap();
    assert!(r.metrics.links_complete_at_end);
    assert_eq!(r.metrics.links_discovered, 4);
    assert_eq!(r.segments.len(), 1);
    let segment = r.segments.iter().next().unwrap();
    assert_eq!(segment.members.len(), 5);
    assert_eq!(segment.known_links.len(), 4);
}

#[test]
fn separate_components_form_separate_segments() {
    let positions = vec![
        Position::new(0.0, 0.0),
        Position::new(5.0, 0.0),
        Position::new(100.0, 0.0),
        Position::new(105.0, 0.0),
    ];
    let graph = RadioGraph::build_graph(&positions, 10.0).unwrap();
    let spec = TrialSpec::new(graph, params(), 120.0, 5);
    let r = run_trial(spec).unwrap();
    assert!(r.metrics.links_complete_at_end);
    assert_eq!(r.segments.len(), 2);
    for segment in r.segments.iter() {
        assert_eq!(segment.members.len(), 2);
    }
}

#[test]
fn baseline_policy_discovers_without_segments() {
    let mut spec = TrialSpec::new(line(5, 8.0, 10.0), params(), 300.0, 11);
    spec.policy = Policy::AllInit;
    let r = run_trial(spec).unwrap();
    assert!(r.metrics.links_complete_at_end);
    assert_eq!(r.metrics.links_discovered, 4);
    assert!(r.segments.is_empty(), "the baseline never forms segments");
    assert!(r.floods.is_empty(), "the baseline never floods");
    for node in &r.nodes {
        assert_eq!(node.phase, Phase::Init, "baseline nodes never promote");
        assert!(node.hello_rate.is_none());
    }
    assert_eq!(r.metrics.sync_count(), 0);
}

#[test]
fn baseline_spends_more_energy_than_load_sharing() {
    let base = {
        let mut spec = TrialSpec::new(line(5, 8.0, 10.0), params(), 600.0, 11);
        spec.policy = Policy::AllInit;
        run_trial(spec).unwrap()
    };
    let shared = run_trial(TrialSpec::new(line(5, 8.0, 10.0), params(), 600.0, 11)).unwrap();
    let model = cnd_core::metrics::EnergyModel::default();
    let e_base = model.trial_energy(&base.metrics).unwrap();
    let e_shared = model.trial_energy(&shared.metrics).unwrap();
    assert!(
        e_shared < e_base,
        "load sharing must beat the always-on baseline ({e_shared} vs {e_base})"
    );
}

#[test]
fn hidden_target_detection_is_recorded() {
    let mut spec = TrialSpec::new(line(3, 8.0, 10.0), params(), 300.0, 13);
    spec.target = Some(NodeId(2));
    let r = run_trial(spec).unwrap();
    let outcome = r.metrics.target.expect("a target was configured");
    assert_eq!(outcome.appeared_at.as_secs_f64(), 0.0);
    let latency = outcome.latency_s().expect("the target is reachable and must be found");
    assert!(latency > 0.0 && latency < 300.0);
}

#[test]
fn oracle_policy_divides_by_the_targets_true_degree() {
    use cnd_core::simulator::WarmStart;
    // Path of five, target in the middle: true in-segment degree 2.
    let mut spec = TrialSpec::new(line(5, 8.0, 10.0), params(), 200.0, 13);
    spec.policy = Policy::OracleDegree;
    spec.target = Some(NodeId(2));
    spec.warm_start = WarmStart::Full;
    let r = run_trial(spec).unwrap();
    let aggregate = params().aggregate_hello_rate().unwrap();
    for node in &r.nodes {
        let rate = node.hello_rate.expect("warm-started members have rates");
        assert!(
            (rate - aggregate / 2.0).abs() < 1e-12,
            "oracle rate must be aggregate / true degree"
        );
    }
}

#[test]
fn warm_start_skips_the_cold_search() {
    use cnd_core::simulator::WarmStart;
    let mut spec = TrialSpec::new(line(5, 8.0, 10.0), params(), 60.0, 17);
    spec.warm_start = WarmStart::Full;
    let r = run_trial(spec).unwrap();
    assert!(r.metrics.links_complete_at_end);
    assert_eq!(
        r.metrics.links_discovered, 0,
        "nothing was hidden, so nothing is discovered"
    );
    assert_eq!(r.segments.len(), 1);
    assert!(r.metrics.link_episodes.is_empty());
}

#[test]
fn tree_warm_start_leaves_off_tree_links_hidden() {
    use cnd_core::simulator::WarmStart;
    // Triangle: a spanning tree knows 2 of the 3 links.
    let positions = vec![
        Position::new(0.0, 0.0),
        Position::new(8.0, 0.0),
        Position::new(4.0, 6.0),
    ];
    let graph = RadioGraph::build_graph(&positions, 12.0).unwrap();
    let mut spec = TrialSpec::new(graph, params(), 2000.0, 19);
    spec.warm_start = WarmStart::Tree;
    let r = run_trial(spec).unwrap();
    assert_eq!(
        r.metrics.link_episodes.len(),
        1,
        "exactly one off-tree link starts hidden"
    );
    assert!(r.metrics.links_complete_at_end, "the off-tree link is found eventually");
    assert_eq!(r.metrics.links_discovered, 1);
}
