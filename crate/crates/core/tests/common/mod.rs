// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::net::Ipv4Addr;

use mmb::packet::craft::{self, Ipv4Spec, TcpSpec};
use mmb::packet::PacketBuffer;
use proptest::prelude::*;

pub fn ip_spec() -> impl Strategy<Value = Ipv4Spec> {
    (
        any::<[u8; 4]>(),
        any::<[u8; 4]>(),
        any::<u8>(),
        any::<u16>(),
        prop::sample::select(vec![0x4000u16, 0, 0x2000, 0x0010]),
        any::<u8>(),
        prop::sample::select(vec![vec![], vec![1u8, 1, 1, 1], vec![0x94, 4, 0, 0]]),
    )
        .prop_map(|(src, dst, tos, id, frag, ttl, options)| Ipv4Spec {
            src: Ipv4Addr::from(src),
            dst: Ipv4Addr::from(dst),
            tos,
            id,
            frag,
            ttl,
            options,
        })
}

pub fn tcp_spec(options: impl Strategy<Value = Vec<u8>>) -> impl Strategy<Value = TcpSpec> {
    (
        any::<u16>(),
        any::<u16>(),
        any::<u32>(),
        any::<u32>(),
        any::<u8>(),
        any::<u16>(),
        options,
    )
        .prop_map(|(sport, dport, seq, ack, flags, window, options)| TcpSpec {
            sport,
            dport,
            seq,
            ack,
            flags,
            window,
            urgent: 0,
            options,
        })
}

pub fn payload() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 0..48)
}

/// Any well-formed packet: TCP with arbitrary option bytes, UDP, ICMP or
/// an opaque transport.
pub fn packet() -> impl Strategy<Value = PacketBuffer> {
    prop_oneof![
        (
            ip_spec(),
            tcp_spec(prop::collection::vec(any::<u8>(), 0..=40)),
            payload()
        )
            .prop_map(|(ip, t, p)| craft::tcp(&ip, &t, &p).unwrap()),
        (ip_spec(), any::<u16>(), any::<u16>(), payload()).prop_map(|(ip, s, d, p)| craft::udp(&ip, s, d, &p).unwrap()),
        (ip_spec(), any::<u8>(), any::<u8>(), any::<[u8; 4]>(), payload())
            .prop_map(|(ip, t, c, r, p)| craft::icmp(&ip, t, c, r, &p).unwrap()),
        (ip_spec(), prop::sample::select(vec![47u8, 50, 132]), payload())
            .prop_map(|(ip, proto, p)| craft::ipv4(&ip, proto, &p).unwrap()),
    ]
}

/// A well-formed option list: MSS, WSCALE, SACK-permitted, timestamps and
/// NOPs in any order, padded with EOL.
pub fn well_formed_options() -> impl Strategy<Value = Vec<u8>> {
    let one = prop_oneof![
        any::<u16>().prop_map(|v| {
            let b = v.to_be_bytes();
            vec![2, 4, b[0], b[1]]
        }),
        any::<u8>().prop_map(|v| vec![3, 3, v]),
        Just(vec![4, 2]),
        (any::<u32>(), any::<u32>()).prop_map(|(a, b)| [&[8u8, 10][..], &a.to_be_bytes(), &b.to_be_bytes()].concat()),
        Just(vec![1]),
    ];
    prop::collection::vec(one, 0..5).prop_map(|opts| {
        let mut out: Vec<u8> = Vec::new();
        for o in opts {
            if out.len() + o.len() <= 40 {
                out.extend(o);
            }
        }
        out
    })
}

pub fn tcp_with(ip: &Ipv4Spec, spec: &TcpSpec, payload: &[u8]) -> PacketBuffer {
    craft::tcp(ip, spec, payload).unwrap()
}

/// Where a header field lives, by name alone: transport protocol, byte
/// offset from the start of its header, byte count, and the bit range
/// counted from the least significant end.
fn locate(name: &str) -> Option<(Option<u8>, usize, usize, u32, u32)> {
    Some(match name {
        "ip-dscp" => (None, 1, 1, 2, 6),
        "ip-ecn" => (None, 1, 1, 0, 2),
        "ip-len" => (None, 2, 2, 0, 16),
        "ip-id" => (None, 4, 2, 0, 16),
        "ip-ttl" => (None, 8, 1, 0, 8),
        "ip-proto" => (None, 9, 1, 0, 8),
        "ip-saddr" => (None, 12, 4, 0, 32),
        "ip-daddr" => (None, 16, 4, 0, 32),
        "tcp-sport" => (Some(6), 0, 2, 0, 16),
        "tcp-dport" => (Some(6), 2, 2, 0, 16),
        "tcp-seq" => (Some(6), 4, 4, 0, 32),
        "tcp-ack-num" => (Some(6), 8, 4, 0, 32),
        "tcp-flags" => (Some(6), 13, 1, 0, 8),
        "tcp-fin" => (Some(6), 13, 1, 0, 1),
        "tcp-syn" => (Some(6), 13, 1, 1, 1),
        "tcp-rst" => (Some(6), 13, 1, 2, 1),
        "tcp-psh" => (Some(6), 13, 1, 3, 1),
        "tcp-ack" => (Some(6), 13, 1, 4, 1),
        "tcp-urg" => (Some(6), 13, 1, 5, 1),
        "tcp-win" => (Some(6), 14, 2, 0, 16),
        "udp-sport" => (Some(17), 0, 2, 0, 16),
        "udp-dport" => (Some(17), 2, 2, 0, 16),
        "udp-len" => (Some(17), 4, 2, 0, 16),
        "icmp-type" => (Some(1), 0, 1, 0, 8),
        "icmp-code" => (Some(1), 1, 1, 0, 8),
        _ => return None,
    })
}

pub fn independent_read(b: &[u8], name: &str) -> Option<u64> {
    let (proto, at, n, shift, width) = locate(name)?;
    let ihl = usize::from(b[0] & 0xf) * 4;
    let offset = u16::from_be_bytes([b[6], b[7]]) & 0x1fff;
    let base = match proto {
        None => 0,
        Some(p) if b[9] == p && offset == 0 => ihl,
        Some(_) => return None,
    };
    let v = b[base + at..base + at + n]
        .iter()
        .fold(0u64, |a, x| a << 8 | u64::from(*x));
    Some(v >> shift & ((1u64 << width) - 1))
}
