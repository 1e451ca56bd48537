// SPDX-License-Identifier: Apache-2.0

use std::sync::atomic::{AtomicBool, Ordering};

use super::*;
use crate::classifier::classify;
use crate::engine::{Engine, EngineError};
use crate::packet::checksums_valid;
use crate::packet::tcp_flags::{ACK, FIN, SYN};
use crate::packet::testutil::{tcp_packet, udp_packet};
use crate::rewrite::rewrite_packet;

fn frames(n: usize) -> Vec<Frame> {
    (0..n)
        .map(|i| {
            let pkt = match i % 4 {
                0 => tcp_packet(
                    [10, 0, 0, (i % 7) as u8],
                    [10, 1, 0, 1],
                    1000 + (i % 13) as u16,
                    80,
                    SYN,
                    &[],
                    b"",
                ),
                1 => tcp_packet(
                    [10, 0, 0, 3],
                    [10, 1, 0, 2],
                    2000,
                    22 + (i % 3) as u16,
                    ACK,
                    &[],
                    b"abc",
                ),
                2 => udp_packet([10, 0, 0, 4], [10, 1, 0, 3], 53, 5353 + (i % 2) as u16, b"q"),
                _ => tcp_packet([10, 1, 0, 1], [10, 0, 0, 2], 80, 1000, SYN | ACK, &[], b""),
            };
            Frame::raw(pkt.into_bytes(), Duration::from_millis(i as u64))
        })
        .collect()
}

fn engine(rules: &[&str], vector_size: usize, workers: usize) -> Engine {
    let mut e = Engine::new(PipelineConfig {
        vector_size,
        workers,
        ..PipelineConfig::default()
    });
    for r in rules {
        e.execute(r).unwrap();
    }
    e
}

const RULES: &[&str] = &[
    "mmb add tcp-dport 80 mod tcp-dport 443",
    "mmb add tcp-dport 23 drop",
    "mmb add udp-dport 5354 mod ip-ttl 1",
    "mmb add ip-saddr 10.0.0.3 tcp-dport >= 23 drop",
    "mmb add-stateful ip-saddr 10.0.0.0/24 tcp-syn shuffle tcp-sport",
];

fn summary(out: &[Output]) -> Vec<(Disposition, Option<Vec<u8>>)> {
    out.iter()
        .map(|o| (o.disposition, o.packet.as_ref().map(|p| p.bytes().to_vec())))
        .collect()
}

#[test]
fn misses_are_forwarded_untouched() {
    let mut e = engine(&["mmb add ip-saddr 198.18.0.1 drop"], 256, 1);
    let input = frames(256);
    let out = e.process(input.clone());
    assert!(out.iter().all(|o| o.disposition == Disposition::Forward));
    for (o, f) in out.iter().zip(&input) {
        assert_eq!(o.packet.as_ref().unwrap().bytes(), &f.data[..]);
    }
}

#[test]
fn results_do_not_depend_on_vector_size() {
    let input = frames(1000);
    let reference = summary(&engine(RULES, 1, 1).process(input.clone()));
    for v in [4, 64, 256] {
        assert_eq!(
            summary(&engine(RULES, v, 1).process(input.clone())),
            reference,
            "vector size {v}"
        );
    }
}

#[test]
fn vectors_agree_with_packet_at_a_time_processing() {
    let mut e = engine(RULES, 64, 1);
    let snap = e.publish();
    let input = frames(500);
    let batched = e.process(input.clone());

    let mut table = ConnTable::new(ConnConfig::default());
    let mut counters = RewriteCounters::default();
    for (f, got) in input.into_iter().zip(batched) {
        let mut pkt = PacketBuffer::parse(f.data, f.link).unwrap().with_timestamp(f.timestamp);
        match classify(&pkt, &snap.classifier, &mut table) {
            Verdict::Drop { .. } => assert_eq!(got.disposition, Disposition::Drop(DropReason::Rule)),
            Verdict::Miss => {
                assert_eq!(got.disposition, Disposition::Forward);
                assert_eq!(got.packet.unwrap().bytes(), pkt.bytes());
            }
            Verdict::Match { rules, conn } => {
                let mut conn = conn;
                let stateful: Vec<RuleId> = rules
                    .iter()
                    .copied()
                    .filter(|id| snap.programs[id].needs_conn)
                    .collect();
                if conn.is_none() && !stateful.is_empty() {
                    let plans = snap.programs[&stateful[0]].binding_plans();
                    conn = table.insert(&pkt, stateful[0], &plans, pkt.timestamp(), &|_| true).ok();
                }
                if let (Some(r), Some(flags)) = (conn, pkt.tcp_flags()) {
                    let data = pkt.l4_payload_offset().unwrap() < pkt.l3_end();
                    table.update_state(r, flags, data);
                }
                let entry = conn.map(|r| (table.get(r).unwrap().clone(), r.direction));
                rewrite_packet(
                    &mut pkt,
                    &rules,
                    entry.as_ref().map(|(e, d)| (e, *d)),
                    &snap.programs,
                    &mut counters,
                );
                assert_eq!(got.disposition, Disposition::Rewritten);
                assert_eq!(got.packet.unwrap().bytes(), pkt.bytes());
            }
        }
    }
}

#[test]
fn workers_preserve_order_and_verdicts() {
    let stateless = &RULES[..4];
    let input = frames(2000);
    let one = summary(&engine(stateless, 64, 1).process(input.clone()));
    for w in [2, 4] {
        assert_eq!(
            summary(&engine(stateless, 64, w).process(input.clone())),
            one,
            "{w} workers"
        );
    }
}

#[test]
fn reports_conserve_packets() {
    let mut e = engine(RULES, 32, 3);
    let mut input = frames(777);
    input.push(Frame::raw(vec![0x45, 0, 0], Duration::ZERO));
    input.push(Frame::raw(vec![0x60; 40], Duration::ZERO));
    let mut emitted = 0;
    let report = e
        .run_stream(input.into_iter().map(Ok::<_, String>), |_| {
            emitted += 1;
            Ok::<_, String>(())
        })
        .unwrap();
    assert_eq!(report.packets, 779);
    assert_eq!(report.invalid, 2);
    assert_eq!(report.forwarded, emitted);
    assert!(report.conserves_packets(), "{report}");
    assert!(report.rule_drops > 0 && report.matched > 0 && report.missed > 0);
    assert_eq!(report.nodes.len(), 5);
    assert!(report.rule_hits.values().sum::<u64>() >= report.matched);
}

#[test]
fn invalid_frames_are_dropped_with_a_reason() {
    let mut e = engine(&[], 256, 1);
    let mut bad = tcp_packet([10, 0, 0, 1], [10, 1, 0, 1], 1, 2, SYN, &[], b"").into_bytes();
    bad[10] ^= 0xff;
    let out = e.process(vec![Frame::raw(bad, Duration::ZERO)]);
    assert!(matches!(out[0].disposition, Disposition::Drop(DropReason::Invalid(_))));
    assert!(out[0].packet.is_none());
}

#[test]
fn empty_source_gives_an_empty_report() {
    let mut e = engine(RULES, 256, 1);
    let r = e
        .run_stream(std::iter::empty::<Result<Frame, String>>(), |_| Ok::<_, String>(()))
        .unwrap();
    assert_eq!((r.packets, r.forwarded, r.dropped, r.vectors), (0, 0, 0, 0));
}

#[test]
fn source_errors_keep_a_partial_report() {
    let mut e = engine(&[], 4, 1);
    let mut items: Vec<Result<Frame, String>> = frames(6).into_iter().map(Ok).collect();
    items.push(Err("disk on fire".into()));
    let err = e.run_stream(items, |_| Ok::<_, String>(())).unwrap_err();
    assert!(matches!(err, StreamError::Source { .. }));
    assert_eq!(err.partial().packets, 6);
}

#[test]
fn disabled_engine_forwards_everything() {
    let mut e = engine(&["mmb add tcp-syn drop"], 256, 1);
    e.execute("mmb disable").unwrap();
    assert!(e
        .process(frames(8))
        .iter()
        .all(|o| o.disposition == Disposition::Forward));
    e.execute("mmb enable").unwrap();
    assert!(e
        .process(frames(8))
        .iter()
        .any(|o| o.disposition == Disposition::Drop(DropReason::Rule)));
}

#[test]
fn each_vector_sees_exactly_one_rule_set() {
    // Two rule sets that rewrite the TTL to different values; a vector mixing
    // both would expose a torn snapshot.
    let cell = Arc::new(SnapshotCell::default());
    let mut a = Engine::new(PipelineConfig::default());
    a.execute("mmb add tcp-syn mod ip-ttl 11").unwrap();
    let mut b = Engine::new(PipelineConfig::default());
    b.execute("mmb add tcp-syn mod ip-ttl 22").unwrap();
    let (sa, sb) = (a.publish(), b.publish());
    cell.store(Arc::clone(&sa));
    let stop = AtomicBool::new(false);
    thread::scope(|s| {
        s.spawn(|| {
            let mut flip = false;
            while !stop.load(Ordering::Relaxed) {
                cell.store(Arc::clone(if flip { &sa } else { &sb }));
                flip = !flip;
            }
        });
        let mut p = Pipeline::new(PipelineConfig {
            vector_size: 16,
            ..PipelineConfig::default()
        });
        let syn = tcp_packet([10, 0, 0, 1], [10, 1, 0, 1], 1, 2, SYN, &[], b"").into_bytes();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..300 {
            let batch: Vec<Frame> = (0..16).map(|_| Frame::raw(syn.clone(), Duration::ZERO)).collect();
            let mut ttls = Vec::new();
            p.run_stream(&cell, batch.into_iter().map(Ok::<_, String>), |pkt| {
                ttls.push(pkt.bytes()[8]);
                Ok::<_, String>(())
            })
            .unwrap();
            assert!(ttls.iter().all(|t| *t == ttls[0]), "torn vector {ttls:?}");
            seen.insert(ttls[0]);
        }
        stop.store(true, Ordering::Relaxed);
        assert!(seen.iter().all(|t| *t == 11 || *t == 22));
    });
}

#[test]
fn nat_through_the_pipeline() {
    let mut e = engine(
        &["mmb add-stateful ip-saddr 10.0.0.0/24 ip-proto tcp tcp-syn shuffle tcp-sport mod ip-saddr 200.0.0.1"],
        8,
        2,
    );
    let client = [10, 0, 0, 5];
    let server = [10, 1, 0, 9];
    let t = |ms| Duration::from_millis(ms);
    let out = e.process(vec![Frame::raw(
        tcp_packet(client, server, 4444, 80, SYN, &[], b"").into_bytes(),
        t(0),
    )]);
    let fwd = out[0].packet.as_ref().unwrap().five_tuple();
    assert_eq!(fwd.src_addr.octets(), [200, 0, 0, 1]);
    let port = fwd.src_port;
    let replies = vec![
        Frame::raw(
            tcp_packet(server, [200, 0, 0, 1], 80, port, SYN | ACK, &[], b"").into_bytes(),
            t(1),
        ),
        Frame::raw(tcp_packet(client, server, 4444, 80, ACK, &[], b"x").into_bytes(), t(2)),
        Frame::raw(
            tcp_packet(client, server, 4444, 80, FIN | ACK, &[], b"").into_bytes(),
            t(3),
        ),
    ];
    let out = e.process(replies);
    let back = out[0].packet.as_ref().unwrap();
    assert_eq!(back.five_tuple().dst_addr.octets(), client);
    assert_eq!(back.five_tuple().dst_port, 4444);
    for o in &out[1..] {
        let p = o.packet.as_ref().unwrap();
        assert_eq!(p.five_tuple(), fwd);
        assert!(checksums_valid(p));
    }
    assert!(checksums_valid(back));
    let listing = e.list(crate::rules::ListTarget::Connections);
    assert!(listing.contains("FIN_WAIT"), "{listing}");
    assert_eq!(e.execute("mmb del 1").unwrap(), "rule 1 deleted");
    assert_eq!(e.list(crate::rules::ListTarget::Connections), "");
    assert_eq!(e.execute("mmb del 1"), Err(EngineError::NoSuchRule(1)));
}

#[test]
fn trace_ids_number_inputs_per_run() {
    let mut e = engine(&["mmb add udp-dport 5353 drop"], 4, 2);
    let out = e.process(frames(12));
    let ids: Vec<u64> = out
        .iter()
        .filter_map(|o| o.packet.as_ref().map(|p| p.trace_id()))
        .collect();
    let expected: Vec<u64> = (0..12).filter(|i| i % 4 != 2).collect();
    assert_eq!(ids, expected);
    e.pipeline_mut().reset_stats();
    let out = e.process(frames(2));
    assert_eq!(out[0].packet.as_ref().unwrap().trace_id(), 0);
}
