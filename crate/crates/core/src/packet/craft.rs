// SPDX-License-Identifier: Apache-2.0

//! Builders for well-formed IPv4 packets with correct checksums.

use std::net::Ipv4Addr;

use super::{
    fix_checksums, internet_checksum, LinkType, PacketBuffer, PacketError, IPPROTO_ICMP, IPPROTO_TCP, IPPROTO_UDP,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipv4Spec {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub tos: u8,
    pub id: u16,
    /// Flags and fragment offset, as on the wire.
    pub frag: u16,
    pub ttl: u8,
    /// Raw IP options, zero-padded to a multiple of 4.
    pub options: Vec<u8>,
}

impl Default for Ipv4Spec {
    fn default() -> Self {
        Ipv4Spec {
            src: Ipv4Addr::new(10, 0, 0, 1),
            dst: Ipv4Addr::new(10, 0, 0, 2),
            tos: 0,
            id: 0,
            frag: 0x4000,
            ttl: 64,
            options: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpSpec {
    pub sport: u16,
    pub dport: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    pub window: u16,
    pub urgent: u16,
    /// Raw option bytes, zero-padded to a multiple of 4.
    pub options: Vec<u8>,
}

impl Default for TcpSpec {
    fn default() -> Self {
        TcpSpec {
            sport: 1024,
            dport: 80,
            seq: 0,
            ack: 0,
            flags: 0,
            window: 65535,
            urgent: 0,
            options: Vec::new(),
        }
    }
}

fn pad4(mut v: Vec<u8>) -> Vec<u8> {
    while !v.len().is_multiple_of(4) {
        v.push(0);
    }
    v
}

/// Wraps `l4` (transport header and payload) in an IPv4 header and fills
/// in every checksum.
pub fn ipv4(ip: &Ipv4Spec, proto: u8, l4: &[u8]) -> Result<PacketBuffer, PacketError> {
    let options = pad4(ip.options.clone());
    let header_len = 20 + options.len();
    let total = header_len + l4.len();
    let mut b = Vec::with_capacity(total);
    b.push(0x40 | (header_len / 4) as u8);
    b.push(ip.tos);
    b.extend_from_slice(&(total as u16).to_be_bytes());
    b.extend_from_slice(&ip.id.to_be_bytes());
    b.extend_from_slice(&ip.frag.to_be_bytes());
    b.push(ip.ttl);
    b.push(proto);
    b.extend_from_slice(&[0, 0]);
    b.extend_from_slice(&ip.src.octets());
    b.extend_from_slice(&ip.dst.octets());
    b.extend_from_slice(&options);
    let csum = internet_checksum(&b);
    b[10..12].copy_from_slice(&csum.to_be_bytes());
    b.extend_from_slice(l4);
    let mut pkt = PacketBuffer::parse(b, LinkType::RawIp)?;
    fix_checksums(&mut pkt);
    Ok(pkt)
}

pub fn tcp(ip: &Ipv4Spec, tcp: &TcpSpec, payload: &[u8]) -> Result<PacketBuffer, PacketError> {
    let options = pad4(tcp.options.clone());
    let header_len = 20 + options.len();
    let mut l4 = Vec::with_capacity(header_len + payload.len());
    l4.extend_from_slice(&tcp.sport.to_be_bytes());
    l4.extend_from_slice(&tcp.dport.to_be_bytes());
    l4.extend_from_slice(&tcp.seq.to_be_bytes());
    l4.extend_from_slice(&tcp.ack.to_be_bytes());
    l4.push(((header_len / 4) as u8) << 4);
    l4.push(tcp.flags);
    l4.extend_from_slice(&tcp.window.to_be_bytes());
    l4.extend_from_slice(&[0, 0]);
    l4.extend_from_slice(&tcp.urgent.to_be_bytes());
    l4.extend_from_slice(&options);
    l4.extend_from_slice(payload);
    ipv4(ip, IPPROTO_TCP, &l4)
}

pub fn udp(ip: &Ipv4Spec, sport: u16, dport: u16, payload: &[u8]) -> Result<PacketBuffer, PacketError> {
    let mut l4 = Vec::with_capacity(8 + payload.len());
    l4.extend_from_slice(&sport.to_be_bytes());
    l4.extend_from_slice(&dport.to_be_bytes());
    l4.extend_from_slice(&((8 + payload.len()) as u16).to_be_bytes());
    // Any non-zero value; the real checksum is filled in afterwards.
    l4.extend_from_slice(&[0xff, 0xff]);
    l4.extend_from_slice(payload);
    ipv4(ip, IPPROTO_UDP, &l4)
}

pub fn icmp(
    ip: &Ipv4Spec,
    icmp_type: u8,
    code: u8,
    rest: [u8; 4],
    payload: &[u8],
) -> Result<PacketBuffer, PacketError> {
    let mut l4 = vec![icmp_type, code, 0, 0];
    l4.extend_from_slice(&rest);
    l4.extend_from_slice(payload);
    ipv4(ip, IPPROTO_ICMP, &l4)
}
