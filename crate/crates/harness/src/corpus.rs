// SPDX-License-Identifier: Apache-2.0

//! Random stateless rules and packets over a small shared value domain, so
//! that rules hit packets often enough for differential testing.

use std::net::Ipv4Addr;

use mmb::packet::craft::{self, Ipv4Spec, TcpSpec};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::traffic::random_option_set;

const ADDRS: [[u8; 4]; 4] = [[10, 0, 0, 1], [10, 0, 0, 2], [10, 0, 1, 7], [192, 168, 1, 1]];
const PORTS: [u16; 5] = [53, 80, 443, 1024, 8080];
const TTLS: [u8; 4] = [1, 64, 128, 255];
const TOS: [u8; 4] = [0, 0x04, 0xb8, 0x03];
const IP_IDS: [u16; 3] = [0, 1, 0x1234];
const BYTES: [u8; 4] = [0x00, 0x61, 0x62, 0xff];

fn pick<T: Copy>(rng: &mut impl Rng, xs: &[T]) -> T {
    *xs.choose(rng).expect("non-empty")
}

fn payload(rng: &mut impl Rng) -> Vec<u8> {
    let n = rng.gen_range(0..=12);
    (0..n).map(|_| pick(rng, &BYTES)).collect()
}

fn hex(rng: &mut impl Rng, max: usize) -> String {
    let n = rng.gen_range(1..=max);
    let body: String = (0..n).map(|_| format!("{:02x}", pick(rng, &BYTES))).collect();
    format!("0x{body}")
}

fn tcp_option_bytes(rng: &mut impl Rng) -> Vec<u8> {
    match rng.gen_range(0..10) {
        0..=5 => random_option_set(rng),
        6 => [&[1u8, 1][..], &[8, 10, 0, 0, 0, 9, 0, 0, 0, 0]].concat(),
        // Malformed lists: a length past the header, a length below two.
        7 => vec![2, 9, 5, 0xb4],
        8 => vec![1, 8, 1, 0],
        _ => Vec::new(),
    }
}

/// A valid raw IPv4 packet: mostly TCP and UDP, with some ICMP, other
/// protocols, fragments, IP options, malformed TCP options, zero UDP
/// checksums and corrupted transport checksums.
pub fn random_packet(rng: &mut impl Rng) -> Vec<u8> {
    let ip = Ipv4Spec {
        src: Ipv4Addr::from(pick(rng, &ADDRS)),
        dst: Ipv4Addr::from(pick(rng, &ADDRS)),
        tos: pick(rng, &TOS),
        id: pick(rng, &IP_IDS),
        frag: match rng.gen_range(0..20) {
            0 | 1 => 0x2000,
            2 => 0x0010,
            3 => 0,
            _ => 0x4000,
        },
        ttl: pick(rng, &TTLS),
        options: if rng.gen_bool(0.1) {
            vec![0x94, 4, 0, 0]
        } else {
            Vec::new()
        },
    };
    let sport = pick(rng, &PORTS);
    let dport = pick(rng, &PORTS);
    let built = match rng.gen_range(0..20) {
        0..=11 => {
            let seq = rng.gen();
            let tcp = TcpSpec {
                sport,
                dport,
                seq: pick(rng, &[0, 1000, seq]),
                ack: pick(rng, &[0, 1]),
                flags: if rng.gen_bool(0.7) {
                    pick(rng, &[0x02, 0x12, 0x10, 0x18, 0x11, 0x04])
                } else {
                    rng.gen_range(0..64)
                },
                window: pick(rng, &[0, 1024, 65535]),
                urgent: 0,
                options: tcp_option_bytes(rng),
            };
            craft::tcp(&ip, &tcp, &payload(rng))
        }
        12..=16 => {
            let p = payload(rng);
            craft::udp(&ip, sport, dport, &p)
        }
        17 | 18 => craft::icmp(
            &ip,
            pick(rng, &[0, 3, 8]),
            pick(rng, &[0, 1]),
            [0, 1, 0, 2],
            &payload(rng),
        ),
        _ => craft::ipv4(&ip, 47, &payload(rng)),
    };
    let pkt = built.expect("corpus packets are well formed");
    let l4 = pkt.l4_offset();
    let proto = pkt.ip_proto();
    let fragment = pkt.is_fragment();
    let mut b = pkt.into_bytes();
    if !fragment && proto == 17 && rng.gen_bool(0.1) {
        b[l4 + 6] = 0;
        b[l4 + 7] = 0;
    } else if !fragment && matches!(proto, 1 | 6 | 17) && rng.gen_bool(0.05) {
        let at = l4
            + if proto == 6 {
                17
            } else if proto == 17 {
                7
            } else {
                3
            };
        b[at] ^= 0x5a;
    }
    b
}

fn cond(rng: &mut impl Rng) -> &'static str {
    if rng.gen_bool(0.7) {
        ""
    } else {
        pick(rng, &["== ", "!= ", "< ", "> ", "<= ", ">= "])
    }
}

fn addr(rng: &mut impl Rng) -> String {
    Ipv4Addr::from(pick(rng, &ADDRS)).to_string()
}

fn match_expr(rng: &mut impl Rng) -> String {
    let neg = if rng.gen_bool(0.15) { "! " } else { "" };
    let body = match rng.gen_range(0..22) {
        0 | 1 => {
            let f = pick(rng, &["ip-saddr", "ip-daddr"]);
            match rng.gen_range(0..3) {
                0 => format!("{f} {}", addr(rng)),
                1 => format!(
                    "{f} {}{}/{}",
                    pick(rng, &["", "!= "]),
                    addr(rng),
                    pick(rng, &[8, 16, 24, 31])
                ),
                _ => format!("{f} {}{}", cond(rng), addr(rng)),
            }
        }
        2 => format!("ip-proto {}", pick(rng, &["tcp", "udp", "icmp"])),
        3 => format!("ip-ttl {}{}", cond(rng), pick(rng, &TTLS)),
        4 => format!("ip-dscp {}{}", cond(rng), pick(rng, &TOS) >> 2),
        5 => format!("ip-ecn {}{}", cond(rng), rng.gen_range(0..4)),
        6 => format!("ip-id {}{}", cond(rng), pick(rng, &IP_IDS)),
        7 => format!("ip-len {}{}", cond(rng), rng.gen_range(20..100)),
        8 | 9 => format!(
            "{} {}{}",
            pick(rng, &["tcp-sport", "tcp-dport"]),
            cond(rng),
            pick(rng, &PORTS)
        ),
        10 => format!(
            "{} {}{}",
            pick(rng, &["udp-sport", "udp-dport"]),
            cond(rng),
            pick(rng, &PORTS)
        ),
        11 => format!("tcp-flags {}{}", cond(rng), pick(rng, &[0x02, 0x12, 0x10, 0x18])),
        12 | 13 => pick(rng, &["tcp-syn", "tcp-ack", "tcp-fin", "tcp-rst", "tcp-psh"]).to_string(),
        14 => format!("tcp-win {}{}", cond(rng), pick(rng, &[0, 1024, 65535])),
        15 => format!("icmp-type {}{}", cond(rng), pick(rng, &[0, 3, 8])),
        16 => format!("tcp-opt-mss {}{}", cond(rng), pick(rng, &[536, 1220, 1380, 1460])),
        17 => pick(
            rng,
            &["tcp-opt-timestamp", "tcp-opt-sackp", "tcp-opt-sack", "tcp-opt 254"],
        )
        .to_string(),
        18 => format!("tcp-opt-wscale {}{}", cond(rng), rng.gen_range(0..15)),
        19 => format!("udp-payload {}{}", cond(rng), hex(rng, 3)),
        20 => format!("ip4-payload {}{}", cond(rng), hex(rng, 3)),
        _ => pick(rng, &["tcp-sport", "udp-dport", "icmp-code", "ip4-payload"]).to_string(),
    };
    format!("{neg}{body}")
}

fn option_name(rng: &mut impl Rng) -> &'static str {
    pick(
        rng,
        &[
            "tcp-opt-mss",
            "tcp-opt-wscale",
            "tcp-opt-sackp",
            "tcp-opt-timestamp",
            "tcp-opt-sack",
            "tcp-opt 254",
        ],
    )
}

fn target(rng: &mut impl Rng, transport: &str) -> String {
    match rng.gen_range(0..12) {
        0 => format!("mod ip-ttl {}", pick(rng, &TTLS)),
        1 => format!("mod {} {}", pick(rng, &["ip-dscp", "ip-ecn"]), rng.gen_range(0..4)),
        2 => format!("mod {} {}", pick(rng, &["ip-saddr", "ip-daddr"]), addr(rng)),
        3 => format!("mod ip-id {}", pick(rng, &IP_IDS)),
        4 | 5 => match transport {
            "tcp" => match rng.gen_range(0..4) {
                0 => format!("mod {} {}", pick(rng, &["tcp-sport", "tcp-dport"]), pick(rng, &PORTS)),
                1 => format!("mod tcp-win {}", pick(rng, &[0, 512])),
                2 => format!("mod tcp-seq {}", rng.gen::<u32>()),
                _ => format!(
                    "mod {} {}",
                    pick(rng, &["tcp-syn", "tcp-fin", "tcp-ack"]),
                    rng.gen_range(0..2)
                ),
            },
            "udp" => format!("mod {} {}", pick(rng, &["udp-sport", "udp-dport"]), pick(rng, &PORTS)),
            _ => format!("mod {} {}", pick(rng, &["icmp-type", "icmp-code"]), rng.gen_range(0..9)),
        },
        6 => format!("strip {}", option_name(rng)),
        7 => format!("strip ! {} strip ! {}", option_name(rng), option_name(rng)),
        8 => match rng.gen_range(0..3) {
            0 => "add tcp-opt-sackp".to_string(),
            1 => format!("add tcp-opt-mss {}", pick(rng, &[536, 1460])),
            _ => format!("add tcp-opt 254 {}", hex(rng, 4)),
        },
        9 => format!(
            "mod {} {}",
            pick(rng, &["tcp-opt-mss", "tcp-opt-wscale"]),
            rng.gen_range(1..15)
        ),
        10 => format!("mod udp-payload {}", hex(rng, 4)),
        _ => format!("mod ip4-payload {}", hex(rng, 2)),
    }
}

/// A selective condition: equality on a field with a small domain, or a
/// comparison against the domain's edge, which selects just as narrowly but
/// needs the slow path.
fn anchor(rng: &mut impl Rng) -> String {
    match rng.gen_range(0..8) {
        0 | 1 => format!("{} {}", pick(rng, &["ip-saddr", "ip-daddr"]), addr(rng)),
        2 => match rng.gen_range(0..4) {
            0 => pick(rng, &["ip-ttl <= 1", "ip-ttl >= 255"]).to_string(),
            _ => format!("ip-ttl {}", pick(rng, &TTLS)),
        },
        3 => match rng.gen_range(0..4) {
            0 => "ip-id <= 0".to_string(),
            _ => format!("ip-id {}", pick(rng, &IP_IDS)),
        },
        4 | 5 => match rng.gen_range(0..4) {
            0 => pick(rng, &["tcp-dport <= 53", "tcp-sport >= 8080"]).to_string(),
            _ => format!("{} {}", pick(rng, &["tcp-sport", "tcp-dport"]), pick(rng, &PORTS)),
        },
        6 => format!("{} {}", pick(rng, &["udp-sport", "udp-dport"]), pick(rng, &PORTS)),
        _ => format!("tcp-win {}", pick(rng, &[0, 1024, 65535])),
    }
}

/// A random stateless rule: three or four selective conditions plus up to
/// two arbitrary ones, so that against [`random_packet`] traffic a rule set
/// of a few hundred rules leaves a fair share of packets unmatched. Not
/// every output is valid: combinations the rule checker rejects (such as
/// `strip X` with `strip ! Y`) come out too, and callers skip them.
pub fn random_rule(rng: &mut impl Rng) -> String {
    let anchors = rng.gen_range(3..=4);
    let extra = rng.gen_range(0..=2);
    let mut matches: Vec<String> = (0..anchors).map(|_| anchor(rng)).collect();
    matches.extend((0..extra).map(|_| match_expr(rng)));
    matches.shuffle(rng);
    let targets: Vec<String> = if rng.gen_bool(0.08) {
        vec!["drop".to_string()]
    } else {
        let transport = pick(rng, &["tcp", "udp", "icmp"]);
        (0..rng.gen_range(1..=2)).map(|_| target(rng, transport)).collect()
    };
    format!("mmb add {} {}", matches.join(" "), targets.join(" "))
}
