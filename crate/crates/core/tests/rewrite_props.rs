// SPDX-License-Identifier: Apache-2.0

mod common;

use std::collections::HashSet;
use std::net::Ipv4Addr;
use std::time::Duration;

use common::{tcp_spec, well_formed_options};
use mmb::engine::Engine;
use mmb::packet::craft::{self, Ipv4Spec, TcpSpec};
use mmb::packet::{checksums_valid, parse_tcp_options, tcp_flags, LinkType, PacketBuffer};
use mmb::pipeline::{Disposition, Frame, PipelineConfig};
use proptest::prelude::*;

const NAT_RULE: &str =
    "mmb add-stateful ip-saddr 10.0.0.0/24 ip-proto tcp tcp-syn shuffle tcp-sport mod ip-saddr 200.0.0.1";

type Opts = Vec<(u8, Vec<u8>)>;

fn option_list(p: &PacketBuffer) -> Opts {
    parse_tcp_options(p)
        .unwrap()
        .iter()
        .map(|o| (o.kind, o.value(p.bytes()).to_vec()))
        .collect()
}

fn name(kind: u8) -> &'static str {
    match kind {
        2 => "tcp-opt-mss",
        3 => "tcp-opt-wscale",
        4 => "tcp-opt-sackp",
        8 => "tcp-opt-timestamp",
        _ => unreachable!(),
    }
}

fn wire_len(list: &Opts) -> usize {
    let raw: usize = list.iter().map(|(k, v)| if *k <= 1 { 1 } else { 2 + v.len() }).sum();
    raw.div_ceil(4) * 4
}

#[derive(Debug, Clone)]
struct Edits {
    strip: Vec<u8>,
    keep: Option<Vec<u8>>,
    mss: Option<u16>,
    adds: Vec<(u8, Vec<u8>)>,
}

impl Edits {
    fn rule(&self) -> String {
        let mut t = Vec::new();
        for k in &self.strip {
            t.push(format!("strip {}", name(*k)));
        }
        for k in self.keep.iter().flatten() {
            t.push(format!("strip ! {}", name(*k)));
        }
        if let Some(v) = self.mss {
            t.push(format!("mod tcp-opt-mss {v}"));
        }
        for (k, v) in &self.adds {
            let hex: String = v.iter().map(|b| format!("{b:02x}")).collect();
            t.push(match (*k, v.is_empty()) {
                (4, _) => "add tcp-opt-sackp".to_string(),
                (2 | 3, _) => format!("add {} 0x{hex}", name(*k)),
                (k, true) => format!("add tcp-opt {k}"),
                (k, false) => format!("add tcp-opt {k} 0x{hex}"),
            });
        }
        format!("mmb add ip-proto tcp {}", t.join(" "))
    }

    /// The option list these edits should leave, computed on the parsed list.
    fn expected(&self, before: &Opts) -> Opts {
        let mut list = before.clone();
        if let Some(keep) = &self.keep {
            list.retain(|(k, _)| keep.contains(k));
        }
        list.retain(|(k, _)| !self.strip.contains(k));
        if let Some(v) = self.mss {
            let next: Opts = list
                .iter()
                .map(|(k, x)| (*k, if *k == 2 { v.to_be_bytes().to_vec() } else { x.clone() }))
                .collect();
            if wire_len(&next) <= 40 {
                list = next;
            }
        }
        for a in &self.adds {
            list.push(a.clone());
            if wire_len(&list) > 40 {
                list.pop();
            }
        }
        list
    }
}

fn kinds() -> impl Strategy<Value = Vec<u8>> {
    prop::sample::subsequence(vec![2u8, 3, 4, 8], 0..=4)
}

fn edits() -> impl Strategy<Value = Edits> {
    let add = prop_oneof![
        Just((4u8, vec![])),
        any::<u16>().prop_map(|v| (2u8, v.to_be_bytes().to_vec())),
        any::<u8>().prop_map(|v| (3u8, vec![v])),
        (30u8..=34, prop::collection::vec(any::<u8>(), 0..6)).prop_map(|(k, v)| (k, v)),
    ];
    (
        kinds(),
        prop::option::of(kinds().prop_filter("non-empty", |k| !k.is_empty())),
        prop::option::of(any::<u16>()),
        prop::collection::vec(add, 0..3),
    )
        .prop_map(|(strip, keep, mss, adds)| Edits { strip, keep, mss, adds })
        .prop_filter("has a target", |e| {
            !e.strip.is_empty() || e.keep.is_some() || e.mss.is_some() || !e.adds.is_empty()
        })
}

fn one(engine: &mut Engine, pkt: &PacketBuffer, at: Duration) -> (Disposition, Option<PacketBuffer>) {
    let out = engine
        .process(vec![Frame::raw(pkt.bytes().to_vec(), at)])
        .pop()
        .unwrap();
    (out.disposition, out.packet)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn option_edits_leave_a_well_formed_header(
        e in edits(),
        spec in tcp_spec(well_formed_options()),
        payload in common::payload(),
    ) {
        let mut engine = Engine::new(PipelineConfig::default());
        prop_assume!(engine.execute(&e.rule()).is_ok());
        let pkt = craft::tcp(&Ipv4Spec::default(), &spec, &payload).unwrap();
        let before = option_list(&pkt);
        let (disposition, out) = one(&mut engine, &pkt, Duration::ZERO);
        prop_assert_eq!(disposition, Disposition::Rewritten);
        let out = PacketBuffer::parse(out.unwrap().into_bytes(), LinkType::RawIp).unwrap();
        prop_assert!(checksums_valid(&out));
        let expected = e.expected(&before);
        if expected == before {
            prop_assert_eq!(out.bytes(), pkt.bytes());
        } else {
            prop_assert_eq!(option_list(&out), expected);
        }
        prop_assert_eq!(&out.bytes()[out.l4_payload_offset().unwrap()..], &payload[..]);
        prop_assert_eq!(&out.bytes()[20..32], &pkt.bytes()[20..32]);
        prop_assert_eq!(out.tcp_flags(), pkt.tcp_flags());
    }

    #[test]
    fn nat_bindings_are_a_bijection(
        clients in prop::collection::btree_set((1u8..=254, 1024u16..=65535), 1..64),
        seed in any::<u64>(),
    ) {
        let mut config = PipelineConfig::default();
        config.conn.seed = seed;
        let mut engine = Engine::new(config);
        engine.execute(NAT_RULE).unwrap();
        let server = Ipv4Addr::new(10, 9, 0, 1);
        let mut translated = HashSet::new();
        for (i, (host, sport)) in clients.iter().enumerate() {
            let client = Ipv4Addr::new(10, 0, 0, *host);
            let at = Duration::from_millis(i as u64);
            let syn = craft::tcp(
                &Ipv4Spec { src: client, dst: server, ..Ipv4Spec::default() },
                &TcpSpec { sport: *sport, dport: 80, flags: tcp_flags::SYN, ..TcpSpec::default() },
                &[],
            )
            .unwrap();
            let (d, out) = one(&mut engine, &syn, at);
            prop_assert_eq!(d, Disposition::Rewritten);
            let out = out.unwrap();
            prop_assert!(checksums_valid(&out));
            let t = out.five_tuple();
            prop_assert_eq!(t.src_addr, Ipv4Addr::new(200, 0, 0, 1));
            prop_assert_eq!((t.dst_addr, t.dst_port), (server, 80));
            prop_assert!(t.src_port >= 1024);
            prop_assert!(translated.insert(t.src_port), "port {} reused", t.src_port);

            let reply = craft::tcp(
                &Ipv4Spec { src: server, dst: t.src_addr, ..Ipv4Spec::default() },
                &TcpSpec { sport: 80, dport: t.src_port, flags: tcp_flags::SYN | tcp_flags::ACK, ..TcpSpec::default() },
                &[],
            )
            .unwrap();
            let (d, back) = one(&mut engine, &reply, at);
            prop_assert_eq!(d, Disposition::Rewritten);
            let back = back.unwrap();
            prop_assert!(checksums_valid(&back));
            let b = back.five_tuple();
            prop_assert_eq!((b.dst_addr, b.dst_port), (client, *sport));
            prop_assert_eq!((b.src_addr, b.src_port), (server, 80));
        }
    }
}
