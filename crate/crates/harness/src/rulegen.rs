// SPDX-License-Identifier: Apache-2.0

//! Rule-set generators for the benchmark scenarios. Every generator returns
//! `mmb` command lines and is deterministic in its seed.

use std::collections::HashSet;
use std::net::Ipv4Addr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Benchmark address block the firewall rules live in; traffic never uses
/// it.
pub const RULE_NET: (Ipv4Addr, u8) = (Ipv4Addr::new(198, 18, 0, 0), 15);

pub const NAT_RULE: &str =
    "mmb add-stateful ip-saddr 10.0.0.0/24 ip-proto tcp tcp-syn shuffle tcp-sport mod ip-saddr 200.0.0.1";

/// Whitelists MSS and window scale on timestamp-bearing packets.
pub const STRIP_RULE: &str = "mmb add tcp-opt-timestamp strip ! tcp-opt-mss strip ! tcp-opt-wscale";

/// Matches every TCP packet of the traffic generator.
pub const CATCH_ALL_RULE: &str = "mmb add-stateful ip-proto tcp mod ip-dscp 0";

fn rule_addr(rng: &mut ChaCha8Rng) -> Ipv4Addr {
    let base = u32::from(RULE_NET.0);
    Ipv4Addr::from(base | rng.gen_range(0..(1u32 << (32 - RULE_NET.1))))
}

fn five_tuples(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let t = (
            rule_addr(&mut rng),
            rule_addr(&mut rng),
            rng.gen_range(1024..=65535u16),
            rng.gen_range(1..=1023u16),
        );
        if seen.insert(t) {
            out.push(format!(
                "ip-saddr {} ip-daddr {} ip-proto tcp tcp-sport {} tcp-dport {}",
                t.0, t.1, t.2, t.3
            ));
        }
    }
    out
}

/// `n` distinct 5-tuple drop rules inside [`RULE_NET`], all sharing one mask.
pub fn firewall(n: usize, seed: u64) -> Vec<String> {
    five_tuples(n, seed)
        .into_iter()
        .map(|m| format!("mmb add {m} drop"))
        .collect()
}

/// `n` random stateful 5-tuple rules plus a catch-all stateful rule, so
/// every generated TCP packet matches.
pub fn stateful(n: usize, seed: u64) -> Vec<String> {
    let mut rules: Vec<String> = five_tuples(n, seed)
        .into_iter()
        .map(|m| format!("mmb add-stateful {m} drop"))
        .collect();
    rules.push(CATCH_ALL_RULE.to_string());
    rules
}

pub fn nat() -> Vec<String> {
    vec![NAT_RULE.to_string()]
}

/// The option whitelist rule plus `n - 1` option rules that generated
/// traffic never satisfies; all of them need the option list walked.
pub fn tcp_opts(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rules = vec![STRIP_RULE.to_string()];
    while rules.len() < n.max(1) {
        let r = match rng.gen_range(0..5) {
            0 => format!("mmb add tcp-opt-mss {} drop", rng.gen_range(1..500)),
            1 => format!("mmb add tcp-opt-wscale > {} drop", rng.gen_range(15..200)),
            2 => format!("mmb add tcp-opt-mss < {} drop", rng.gen_range(1..500)),
            3 => format!("mmb add tcp-opt {} drop", rng.gen_range(100..250)),
            _ => format!("mmb add tcp-opt-fastopen {} drop", rng.gen_range(1..1024)),
        };
        rules.push(r);
    }
    rules
}

/// Fields the mask-limit generator combines.
pub const MASK_FIELDS: [&str; 12] = [
    "ip-saddr",
    "ip-daddr",
    "ip-ttl",
    "ip-dscp",
    "ip-id",
    "tcp-sport",
    "tcp-dport",
    "tcp-seq",
    "tcp-ack-num",
    "tcp-win",
    "tcp-flags",
    "ip-ecn",
];

/// `n` rules, each combining a different set of five fields, so each needs
/// its own table. Values come from [`RULE_NET`] and never match generated
/// traffic on the address fields; rules without address fields may match.
pub fn mask_limit(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut fields: Vec<&str> = MASK_FIELDS.choose_multiple(&mut rng, 5).copied().collect();
        fields.sort_unstable();
        if !combos.insert(fields.clone()) {
            continue;
        }
        let parts: Vec<String> = fields
            .iter()
            .map(|f| match *f {
                "ip-saddr" | "ip-daddr" => format!("{f} {}", rule_addr(&mut rng)),
                "ip-dscp" => format!("{f} {}", rng.gen_range(1..64)),
                "ip-ecn" => format!("{f} {}", rng.gen_range(1..4)),
                "ip-ttl" | "tcp-flags" => format!("{f} {}", rng.gen_range(1..256)),
                "tcp-seq" | "tcp-ack-num" => format!("{f} {}", rng.gen::<u32>()),
                _ => format!("{f} {}", rng.gen::<u16>()),
            })
            .collect();
        out.push(format!("mmb add {} drop", parts.join(" ")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmb::engine::Engine;
    use mmb::pipeline::PipelineConfig;

    fn load(rules: &[String]) -> Engine {
        let mut e = Engine::new(PipelineConfig::default());
        for r in rules {
            e.execute(r).unwrap_or_else(|err| panic!("{r}: {err}"));
        }
        e
    }

    #[test]
    fn firewall_rules_are_distinct_and_share_a_table() {
        let rules = firewall(500, 1);
        assert_eq!(rules.iter().collect::<HashSet<_>>().len(), 500);
        let e = load(&rules);
        assert_eq!(e.store().classifier().table_count(), 1);
        assert_eq!(e.store().classifier().slow_rule_count(), 0);
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(firewall(50, 9), firewall(50, 9));
        assert_ne!(firewall(50, 9), firewall(50, 10));
        assert_eq!(stateful(10, 3), stateful(10, 3));
        assert_eq!(tcp_opts(100, 3), tcp_opts(100, 3));
        assert_eq!(mask_limit(64, 3), mask_limit(64, 3));
    }

    #[test]
    fn stateful_adds_the_catch_all() {
        let rules = stateful(10, 1);
        assert_eq!(rules.len(), 11);
        assert_eq!(rules.last().map(String::as_str), Some(CATCH_ALL_RULE));
        load(&rules);
    }

    #[test]
    fn option_rules_take_the_slow_path() {
        let rules = tcp_opts(100, 1);
        assert_eq!(rules.len(), 100);
        let e = load(&rules);
        assert_eq!(e.store().classifier().slow_rule_count(), 100);
    }

    #[test]
    fn mask_limit_gives_one_table_per_rule() {
        for n in [1, 8, 26, 40, 64] {
            let e = load(&mask_limit(n, 5));
            assert_eq!(e.store().classifier().table_count(), n);
        }
    }
}
