// SPDX-License-Identifier: Apache-2.0

use super::*;
use crate::packet::lookup_field;
use crate::packet::tcp_flags::{ACK, SYN};
use crate::packet::testutil::{tcp_packet, udp_packet};

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn any_key(_: &ConnKey) -> bool {
    true
}

fn syn(client: [u8; 4], sport: u16) -> PacketBuffer {
    tcp_packet(client, [10, 1, 0, 1], sport, 80, SYN, &[], &[])
}

fn syn_ack(client: [u8; 4], sport: u16) -> PacketBuffer {
    tcp_packet([10, 1, 0, 1], client, 80, sport, SYN | ACK, &[], &[])
}

#[test]
fn empty_table_misses() {
    let mut t = ConnTable::new(ConnConfig::default());
    assert_eq!(t.lookup(&syn([10, 0, 0, 1], 1000), secs(0)), None);
}

#[test]
fn reverse_packet_finds_the_entry() {
    let mut t = ConnTable::new(ConnConfig::default());
    let fwd = t
        .insert(&syn([10, 0, 0, 1], 1000), RuleId(1), &[], secs(0), &any_key)
        .unwrap();
    assert_eq!(fwd.direction, Direction::Forward);
    let rev = t.lookup(&syn_ack([10, 0, 0, 1], 1000), secs(1)).unwrap();
    assert_eq!(rev.slot, fwd.slot);
    assert_eq!(rev.direction, Direction::Reverse);
    let e = t.get(rev).unwrap();
    assert_eq!(e.packets, [1, 1]);
    assert_eq!(e.state, ConnState::Tcp(TcpState::New));
}

#[test]
fn duplicate_insert_is_idempotent() {
    let mut t = ConnTable::new(ConnConfig::default());
    let a = t
        .insert(&syn([10, 0, 0, 1], 1000), RuleId(1), &[], secs(0), &any_key)
        .unwrap();
    let b = t
        .insert(&syn([10, 0, 0, 1], 1000), RuleId(2), &[], secs(0), &any_key)
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(t.len(), 1);
    assert_eq!(t.get(a).unwrap().rule_id, RuleId(1));
}

#[test]
fn idle_entries_expire_on_lookup() {
    let mut t = ConnTable::new(ConnConfig::default());
    t.insert(&syn([10, 0, 0, 1], 1000), RuleId(1), &[], secs(100), &any_key)
        .unwrap();
    // NEW times out after 30 s; exactly 30 s idle is still alive.
    assert!(t.lookup(&syn_ack([10, 0, 0, 1], 1000), secs(130)).is_some());
    assert!(t.lookup(&syn_ack([10, 0, 0, 1], 1000), secs(161)).is_none());
    assert!(t.is_empty());
    assert_eq!(t.counters().expired, 1);
}

#[test]
fn last_seen_never_moves_backwards() {
    let mut t = ConnTable::new(ConnConfig::default());
    let r = t
        .insert(&syn([10, 0, 0, 1], 1000), RuleId(1), &[], secs(50), &any_key)
        .unwrap();
    t.lookup(&syn_ack([10, 0, 0, 1], 1000), secs(40)).unwrap();
    assert_eq!(t.get(r).unwrap().last_seen, secs(50));
}

#[test]
fn udp_entries_are_active_and_use_the_udp_timeout() {
    let mut t = ConnTable::new(ConnConfig::default());
    let pkt = udp_packet([10, 0, 0, 1], [10, 1, 0, 1], 5000, 53, b"q");
    let r = t.insert(&pkt, RuleId(1), &[], secs(0), &any_key).unwrap();
    assert_eq!(t.get(r).unwrap().state, ConnState::Active);
    t.update_state(r, SYN, false);
    assert_eq!(t.get(r).unwrap().state, ConnState::Active);
    assert!(t.lookup(&pkt, secs(60)).is_some());
    assert!(t.lookup(&pkt, secs(121)).is_none());
}

#[test]
fn many_flows_are_reachable_from_both_sides() {
    let mut t = ConnTable::new(ConnConfig::default());
    let n = 100_000u32;
    for i in 0..n {
        let c = (0x0a00_0000 + (i >> 8)).to_be_bytes();
        let sport = 1024 + (i & 0xff) as u16;
        t.insert(&syn(c, sport), RuleId(1), &[], secs(0), &any_key).unwrap();
    }
    assert_eq!(t.len(), n as usize);
    for i in 0..n {
        let c = (0x0a00_0000 + (i >> 8)).to_be_bytes();
        let sport = 1024 + (i & 0xff) as u16;
        let f = t.lookup(&syn(c, sport), secs(1)).unwrap();
        let r = t.lookup(&syn_ack(c, sport), secs(1)).unwrap();
        assert_eq!(f.slot, r.slot);
        assert_eq!((f.direction, r.direction), (Direction::Forward, Direction::Reverse));
    }
}

fn snat_plans() -> Vec<BindingPlan> {
    vec![
        BindingPlan::Fixed {
            field: lookup_field("ip-saddr").unwrap(),
            value: u64::from(u32::from(Ipv4Addr::new(200, 0, 0, 1))),
        },
        BindingPlan::Shuffle {
            field: lookup_field("tcp-sport").unwrap(),
            lo: 1024,
            hi: 65535,
        },
    ]
}

#[test]
fn nat_entries_answer_on_the_translated_tuple() {
    let mut t = ConnTable::new(ConnConfig::default());
    let r = t
        .insert(&syn([10, 0, 0, 5], 4321), RuleId(1), &snat_plans(), secs(0), &any_key)
        .unwrap();
    let e = t.get(r).unwrap().clone();
    assert_eq!(e.translated.src_addr, Ipv4Addr::new(200, 0, 0, 1));
    let port = e.binding(&lookup_field("tcp-sport").unwrap()).unwrap().rewritten;
    assert!((1024..=65535).contains(&port));
    assert_eq!(e.binding(&lookup_field("tcp-sport").unwrap()).unwrap().original, 4321);
    let reply = tcp_packet([10, 1, 0, 1], [200, 0, 0, 1], 80, port as u16, SYN | ACK, &[], &[]);
    let hit = t.lookup(&reply, secs(1)).unwrap();
    assert_eq!((hit.slot, hit.direction), (r.slot, Direction::Reverse));
    // The untranslated reverse tuple also resolves, as reverse.
    assert_eq!(
        t.lookup(&syn_ack([10, 0, 0, 5], 4321), secs(1)).unwrap().direction,
        Direction::Reverse
    );
}

#[test]
fn shuffled_ports_never_collide_and_are_released() {
    let pool = BindingPool::shared();
    let mut t = ConnTable::with_pool(
        ConnConfig {
            seed: 7,
            ..ConnConfig::default()
        },
        pool.clone(),
    );
    let plans = vec![BindingPlan::Shuffle {
        field: lookup_field("tcp-sport").unwrap(),
        lo: 2000,
        hi: 2063,
    }];
    let mut seen = HashSet::new();
    for i in 0..64u16 {
        let r = t
            .insert(&syn([10, 0, 0, 9], 3000 + i), RuleId(1), &plans, secs(0), &any_key)
            .unwrap();
        let v = t.get(r).unwrap().bindings[0].rewritten;
        assert!((2000..=2063).contains(&v));
        assert!(seen.insert(v), "port {v} reused");
    }
    let err = t.insert(&syn([10, 0, 0, 9], 4000), RuleId(1), &plans, secs(0), &any_key);
    assert_eq!(err, Err(InsertError::RangeExhausted("tcp-sport")));
    assert_eq!(pool.lock().unwrap().in_use(), 64);
    assert_eq!(t.purge(secs(1000), usize::MAX), 64);
    assert_eq!(pool.lock().unwrap().in_use(), 0);
    assert!(t
        .insert(&syn([10, 0, 0, 9], 4000), RuleId(1), &plans, secs(1000), &any_key)
        .is_ok());
}

#[test]
fn accept_filter_steers_reply_keys() {
    let mut t = ConnTable::new(ConnConfig::default());
    let even = |k: &ConnKey| k.steering_hash().is_multiple_of(2);
    for i in 0..50u16 {
        let r = t
            .insert(&syn([10, 0, 0, 5], 5000 + i), RuleId(1), &snat_plans(), secs(0), &even)
            .unwrap();
        let e = t.get(r).unwrap();
        assert!(even(&ConnKey::from_tuple(&e.translated)));
    }
}

#[test]
fn table_full_is_reported() {
    let mut t = ConnTable::new(ConnConfig {
        capacity: 2,
        ..ConnConfig::default()
    });
    t.insert(&syn([10, 0, 0, 1], 1), RuleId(1), &[], secs(0), &any_key)
        .unwrap();
    t.insert(&syn([10, 0, 0, 1], 2), RuleId(1), &[], secs(0), &any_key)
        .unwrap();
    assert_eq!(
        t.insert(&syn([10, 0, 0, 1], 3), RuleId(1), &[], secs(0), &any_key),
        Err(InsertError::TableFull)
    );
    assert_eq!(t.counters().table_full, 1);
}

#[test]
fn budgeted_purge_removes_only_expired_entries() {
    let mut t = ConnTable::new(ConnConfig::default());
    for i in 0..100u16 {
        // Even flows were created long ago, odd ones recently.
        let at = if i % 2 == 0 { secs(0) } else { secs(95) };
        t.insert(&syn([10, 0, 0, 1], 1000 + i), RuleId(1), &[], at, &any_key)
            .unwrap();
    }
    assert_eq!(t.purge(secs(10), 1000), 0);
    let mut removed = 0;
    let mut calls = 0;
    while removed < 50 {
        let n = t.purge(secs(100), 7);
        removed += n;
        calls += 1;
        assert!(calls < 100);
    }
    assert_eq!(removed, 50);
    assert_eq!(t.len(), 50);
    assert!(t.entries().all(|e| e.last_seen == secs(95)));
}

#[test]
fn listing() {
    let mut t = ConnTable::new(ConnConfig::default());
    let r = t
        .insert(&syn([10, 0, 0, 5], 4321), RuleId(3), &snat_plans(), secs(0), &any_key)
        .unwrap();
    t.update_state(r, SYN, false);
    let lines = t.describe(secs(2));
    assert_eq!(lines.len(), 1);
    assert!(
        lines[0].starts_with("tcp 10.0.0.5:4321 -> 10.1.0.1:80 as 200.0.0.1:"),
        "{}",
        lines[0]
    );
    assert!(lines[0].contains("NEW age 2.000s rule 3"), "{}", lines[0]);
}

#[test]
fn removing_a_rule_drops_its_entries_and_bindings() {
    let pool = BindingPool::shared();
    let mut t = ConnTable::with_pool(ConnConfig::default(), pool.clone());
    t.insert(&syn([10, 0, 0, 5], 1), RuleId(1), &snat_plans(), secs(0), &any_key)
        .unwrap();
    t.insert(&syn([10, 0, 0, 5], 2), RuleId(2), &snat_plans(), secs(0), &any_key)
        .unwrap();
    assert_eq!(t.remove_rule(RuleId(1)), 1);
    assert_eq!(t.len(), 1);
    assert_eq!(pool.lock().unwrap().in_use(), 1);
    assert!(t.lookup(&syn([10, 0, 0, 5], 1), secs(1)).is_none());
    assert_eq!(t.clear(), 1);
    assert_eq!(pool.lock().unwrap().in_use(), 0);
}
