// SPDX-License-Identifier: Apache-2.0

use mmb_harness::scenario::{run_scenario, Scenario, ScenarioKind};
use mmb_harness::traffic::{generate_traffic, TrafficProfile};

fn counters(kind: ScenarioKind, seed: u64) -> (Vec<String>, u64, u64, u64, Vec<(u64, u64)>) {
    let r = run_scenario(&Scenario::new(kind, seed).with_rule_count(200)).unwrap();
    (
        r.checks.iter().map(|c| format!("{}: {}", c.name, c.passed)).collect(),
        r.run.forwarded,
        r.run.dropped,
        r.run.modified,
        r.run.rule_hits.into_iter().collect(),
    )
}

#[test]
fn traffic_depends_only_on_the_seed() {
    let profile = TrafficProfile {
        flows: 40,
        decorate_options: true,
        ..TrafficProfile::default()
    };
    let a: Vec<_> = generate_traffic(&profile, 3).map(|f| (f.data, f.timestamp)).collect();
    let b: Vec<_> = generate_traffic(&profile, 3).map(|f| (f.data, f.timestamp)).collect();
    let c: Vec<_> = generate_traffic(&profile, 4).map(|f| (f.data, f.timestamp)).collect();
    assert_eq!(a.len(), profile.total_packets());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn scenarios_repeat_exactly_for_a_seed() {
    for kind in [
        ScenarioKind::Firewall,
        ScenarioKind::Stateful,
        ScenarioKind::TcpOpts,
        ScenarioKind::MaskLimit,
    ] {
        assert_eq!(counters(kind, 9), counters(kind, 9), "{kind}");
    }
}
