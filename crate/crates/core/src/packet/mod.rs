// SPDX-License-Identifier: Apache-2.0

//! IPv4 packet buffers and header views.
//!
//! A [`PacketBuffer`] owns the raw frame bytes, including any link-layer
//! header, and records where the IPv4 and transport headers start. The
//! link-layer header is never interpreted beyond the ethertype and is
//! emitted verbatim, so everything downstream is anchored at the L3 header.

mod checksum;
pub mod craft;
mod field;
mod options;

use std::fmt;
use std::net::Ipv4Addr;
use std::time::Duration;

use thiserror::Error;

pub use checksum::{checksums_valid, fix_checksums, internet_checksum, ones_complement_sum};
pub use field::{
    lookup_field, read_field, registry, tcp_option_field, write_field, FieldDescriptor, FieldError, FieldValue, Layer,
    Locator, PayloadKind,
};
pub use options::{option_kind, parse_tcp_options, walk_options, OptionError, TcpOptionView};

pub const IPPROTO_ICMP: u8 = 1;
pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;

pub const ETHERNET_HEADER_LEN: usize = 14;
pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const IPV4_MIN_HEADER_LEN: usize = 20;
pub const TCP_MIN_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;
pub const ICMP_HEADER_LEN: usize = 8;

/// Number of L3 bytes visible to the mask-based fast path.
pub const CLASSIFY_SPAN: usize = 80;

/// TCP flag bits, as found in byte 13 of the TCP header.
pub mod tcp_flags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
    pub const URG: u8 = 0x20;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkType {
    /// Bare IPv4 datagrams (pcap LINKTYPE_RAW, 101).
    RawIp,
    /// Ethernet II frames (pcap LINKTYPE_ETHERNET, 1).
    Ethernet,
}

impl LinkType {
    pub fn from_pcap(code: u32) -> Option<Self> {
        match code {
            1 => Some(LinkType::Ethernet),
            101 => Some(LinkType::RawIp),
            _ => None,
        }
    }

    pub fn pcap_code(self) -> u32 {
        match self {
            LinkType::Ethernet => 1,
            LinkType::RawIp => 101,
        }
    }

    pub fn header_len(self) -> usize {
        match self {
            LinkType::Ethernet => ETHERNET_HEADER_LEN,
            LinkType::RawIp => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum L4Proto {
    Tcp,
    Udp,
    Icmp,
    Other,
}

impl L4Proto {
    pub fn from_ip_proto(proto: u8) -> Self {
        match proto {
            IPPROTO_TCP => L4Proto::Tcp,
            IPPROTO_UDP => L4Proto::Udp,
            IPPROTO_ICMP => L4Proto::Icmp,
            _ => L4Proto::Other,
        }
    }

    pub fn ip_proto(self) -> Option<u8> {
        match self {
            L4Proto::Tcp => Some(IPPROTO_TCP),
            L4Proto::Udp => Some(IPPROTO_UDP),
            L4Proto::Icmp => Some(IPPROTO_ICMP),
            L4Proto::Other => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("truncated packet: {needed} bytes needed, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("bad IPv4 header checksum")]
    BadChecksum,
    #[error("not an IPv4 packet")]
    NotIpv4,
    #[error("invalid IPv4 header length (IHL {0})")]
    BadHeaderLength(u8),
    #[error("IPv4 total length {0} is shorter than its header")]
    BadTotalLength(u16),
    #[error("invalid TCP data offset {0}")]
    BadDataOffset(u8),
}

impl PacketError {
    /// Short stable code used in drop counters and reports.
    pub fn reason(&self) -> &'static str {
        match self {
            PacketError::Truncated { .. } => "truncated",
            PacketError::BadChecksum => "bad-checksum",
            PacketError::NotIpv4 => "not-ipv4",
            PacketError::BadHeaderLength(_) => "bad-ihl",
            PacketError::BadTotalLength(_) => "bad-total-length",
            PacketError::BadDataOffset(_) => "bad-data-offset",
        }
    }
}

/// Transport five-tuple. Ports are zero for protocols without ports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FiveTuple {
    pub src_addr: Ipv4Addr,
    pub dst_addr: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: u8,
}

impl FiveTuple {
    pub fn reversed(&self) -> FiveTuple {
        FiveTuple {
            src_addr: self.dst_addr,
            dst_addr: self.src_addr,
            src_port: self.dst_port,
            dst_port: self.src_port,
            proto: self.proto,
        }
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} proto {}",
            self.src_addr, self.src_port, self.dst_addr, self.dst_port, self.proto
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketBuffer {
    bytes: Vec<u8>,
    link: LinkType,
    l3_offset: usize,
    l4_offset: usize,
    l4_proto: L4Proto,
    trace_id: u64,
    timestamp: Duration,
}

#[inline]
pub(crate) fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn need(bytes: &[u8], needed: usize) -> Result<(), PacketError> {
    if bytes.len() < needed {
        Err(PacketError::Truncated {
            needed,
            available: bytes.len(),
        })
    } else {
        Ok(())
    }
}

/// Parses a frame, validating the IPv4 header (version, length, checksum)
/// and the presence of the transport header it declares.
pub fn parse_packet(bytes: Vec<u8>, link: LinkType) -> Result<PacketBuffer, PacketError> {
    PacketBuffer::parse(bytes, link)
}

impl PacketBuffer {
    pub fn parse(bytes: Vec<u8>, link: LinkType) -> Result<Self, PacketError> {
        need(&bytes, 1)?;
        let l3 = match link {
            LinkType::RawIp => 0,
            LinkType::Ethernet => {
                need(&bytes, ETHERNET_HEADER_LEN)?;
                if be16(&bytes, 12) != ETHERTYPE_IPV4 {
                    return Err(PacketError::NotIpv4);
                }
                ETHERNET_HEADER_LEN
            }
        };
        need(&bytes, l3 + 1)?;
        if bytes[l3] >> 4 != 4 {
            return Err(PacketError::NotIpv4);
        }
        need(&bytes, l3 + IPV4_MIN_HEADER_LEN)?;
        let ihl = bytes[l3] & 0x0f;
        if ihl < 5 {
            return Err(PacketError::BadHeaderLength(ihl));
        }
        let header_len = usize::from(ihl) * 4;
        need(&bytes, l3 + header_len)?;
        let total_len = be16(&bytes, l3 + 2);
        if usize::from(total_len) < header_len {
            return Err(PacketError::BadTotalLength(total_len));
        }
        let l3_end = l3 + usize::from(total_len);
        need(&bytes, l3_end)?;
        if internet_checksum(&bytes[l3..l3 + header_len]) != 0 {
            return Err(PacketError::BadChecksum);
        }

        let l4 = l3 + header_len;
        let frag_offset = be16(&bytes, l3 + 6) & 0x1fff;
        // Non-first fragments carry no transport header.
        let l4_proto = if frag_offset != 0 {
            L4Proto::Other
        } else {
            L4Proto::from_ip_proto(bytes[l3 + 9])
        };
        let within = |len: usize| {
            if l4 + len > l3_end {
                Err(PacketError::Truncated {
                    needed: l4 + len,
                    available: l3_end,
                })
            } else {
                Ok(())
            }
        };
        match l4_proto {
            L4Proto::Tcp => {
                within(TCP_MIN_HEADER_LEN)?;
                let data_offset = bytes[l4 + 12] >> 4;
                if data_offset < 5 {
                    return Err(PacketError::BadDataOffset(data_offset));
                }
                within(usize::from(data_offset) * 4)?;
            }
            L4Proto::Udp => within(UDP_HEADER_LEN)?,
            L4Proto::Icmp => within(ICMP_HEADER_LEN)?,
            L4Proto::Other => {}
        }

        Ok(PacketBuffer {
            bytes,
            link,
            l3_offset: l3,
            l4_offset: l4,
            l4_proto,
            trace_id: 0,
            timestamp: Duration::ZERO,
        })
    }

    pub fn with_trace_id(mut self, trace_id: u64) -> Self {
        self.trace_id = trace_id;
        self
    }

    pub fn with_timestamp(mut self, timestamp: Duration) -> Self {
        self.timestamp = timestamp;
        self
    }

    /// The full frame, link-layer header included.
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub(crate) fn bytes_mut(&mut self) -> &mut Vec<u8> {
        &mut self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn link(&self) -> LinkType {
        self.link
    }

    pub fn l3_offset(&self) -> usize {
        self.l3_offset
    }

    pub fn l4_offset(&self) -> usize {
        self.l4_offset
    }

    pub fn l4_proto(&self) -> L4Proto {
        self.l4_proto
    }

    pub fn trace_id(&self) -> u64 {
        self.trace_id
    }

    pub fn timestamp(&self) -> Duration {
        self.timestamp
    }

    pub fn ihl(&self) -> u8 {
        self.bytes[self.l3_offset] & 0x0f
    }

    pub fn ip_total_len(&self) -> usize {
        usize::from(be16(&self.bytes, self.l3_offset + 2))
    }

    /// One past the last byte of the IPv4 datagram. Link-layer trailer
    /// padding, if any, lives beyond this point.
    pub fn l3_end(&self) -> usize {
        self.l3_offset + self.ip_total_len()
    }

    pub fn ip_proto(&self) -> u8 {
        self.bytes[self.l3_offset + 9]
    }

    pub fn src_addr(&self) -> Ipv4Addr {
        let b = &self.bytes[self.l3_offset + 12..self.l3_offset + 16];
        Ipv4Addr::new(b[0], b[1], b[2], b[3])
    }

    pub fn dst_addr(&self) -> Ipv4Addr {
        let b = &self.bytes[self.l3_offset + 16..self.l3_offset + 20];
        Ipv4Addr::new(b[0], b[1], b[2], b[3])
    }

    pub fn is_fragment(&self) -> bool {
        be16(&self.bytes, self.l3_offset + 6) & 0x3fff != 0
    }

    /// TCP header length in bytes, `None` for non-TCP packets.
    pub fn tcp_header_len(&self) -> Option<usize> {
        match self.l4_proto {
            L4Proto::Tcp => Some(usize::from(self.bytes[self.l4_offset + 12] >> 4) * 4),
            _ => None,
        }
    }

    pub fn tcp_flags(&self) -> Option<u8> {
        match self.l4_proto {
            L4Proto::Tcp => Some(self.bytes[self.l4_offset + 13]),
            _ => None,
        }
    }

    /// Start of the transport payload, if the transport header is known.
    pub fn l4_payload_offset(&self) -> Option<usize> {
        match self.l4_proto {
            L4Proto::Tcp => self.tcp_header_len().map(|len| self.l4_offset + len),
            L4Proto::Udp => Some(self.l4_offset + UDP_HEADER_LEN),
            L4Proto::Icmp => Some(self.l4_offset + ICMP_HEADER_LEN),
            L4Proto::Other => None,
        }
    }

    pub fn five_tuple(&self) -> FiveTuple {
        let (src_port, dst_port) = match self.l4_proto {
            L4Proto::Tcp | L4Proto::Udp => (be16(&self.bytes, self.l4_offset), be16(&self.bytes, self.l4_offset + 2)),
            _ => (0, 0),
        };
        FiveTuple {
            src_addr: self.src_addr(),
            dst_addr: self.dst_addr(),
            src_port,
            dst_port,
            proto: self.ip_proto(),
        }
    }

    /// Copies the first [`CLASSIFY_SPAN`] bytes of the datagram as they
    /// would appear with a 20-byte IPv4 header, zero-extended past the end
    /// of the datagram. IP options, when present, are elided so that
    /// transport fields sit at their usual L3-relative offsets.
    pub fn classify_view(&self, view: &mut [u8; CLASSIFY_SPAN]) {
        view.fill(0);
        let l3 = self.l3_offset;
        let end = self.l3_end();
        view[..IPV4_MIN_HEADER_LEN].copy_from_slice(&self.bytes[l3..l3 + IPV4_MIN_HEADER_LEN]);
        let rest = (end - self.l4_offset).min(CLASSIFY_SPAN - IPV4_MIN_HEADER_LEN);
        view[IPV4_MIN_HEADER_LEN..IPV4_MIN_HEADER_LEN + rest]
            .copy_from_slice(&self.bytes[self.l4_offset..self.l4_offset + rest]);
    }

    /// Maps an offset in the normalized L3 layout used by
    /// [`classify_view`](Self::classify_view) back to an index in `bytes`.
    pub fn normalized_index(&self, offset: usize) -> usize {
        if offset < IPV4_MIN_HEADER_LEN {
            self.l3_offset + offset
        } else {
            self.l4_offset + offset - IPV4_MIN_HEADER_LEN
        }
    }

    pub(crate) fn set_ip_total_len(&mut self, len: u16) {
        let at = self.l3_offset + 2;
        self.bytes[at..at + 2].copy_from_slice(&len.to_be_bytes());
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    fn header_only(proto: u8) -> Vec<u8> {
        let mut b = vec![0u8; 20];
        b[0] = 0x45;
        b[2..4].copy_from_slice(&20u16.to_be_bytes());
        b[8] = 64;
        b[9] = proto;
        b[12..16].copy_from_slice(&[10, 0, 0, 1]);
        b[16..20].copy_from_slice(&[10, 0, 0, 2]);
        let csum = internet_checksum(&b);
        b[10..12].copy_from_slice(&csum.to_be_bytes());
        b
    }

    #[test]
    fn bare_tcp_header_without_transport_is_truncated() {
        let err = PacketBuffer::parse(header_only(IPPROTO_TCP), LinkType::RawIp).unwrap_err();
        assert!(matches!(err, PacketError::Truncated { .. }), "{err:?}");
    }

    #[test]
    fn bare_header_for_unknown_protocol_parses() {
        let pkt = PacketBuffer::parse(header_only(47), LinkType::RawIp).unwrap();
        assert_eq!(pkt.l4_proto(), L4Proto::Other);
        assert_eq!(pkt.five_tuple().src_port, 0);
    }

    #[test]
    fn l4_offset_follows_ihl() {
        let pkt = tcp_packet([10, 0, 0, 1], [10, 0, 0, 2], 1234, 80, tcp_flags::SYN, &[], &[]);
        assert_eq!(pkt.bytes().len(), 40);
        assert_eq!(pkt.l4_offset(), pkt.l3_offset() + 20);
        assert_eq!(pkt.l4_proto(), L4Proto::Tcp);
    }

    #[test]
    fn rejects_bad_checksum_and_version() {
        let mut b = header_only(47);
        b[10] ^= 0xff;
        assert_eq!(PacketBuffer::parse(b, LinkType::RawIp), Err(PacketError::BadChecksum));
        let mut b = header_only(47);
        b[0] = 0x65;
        assert_eq!(PacketBuffer::parse(b, LinkType::RawIp), Err(PacketError::NotIpv4));
        assert!(matches!(
            PacketBuffer::parse(Vec::new(), LinkType::RawIp),
            Err(PacketError::Truncated { .. })
        ));
    }

    #[test]
    fn ethernet_header_is_skipped_and_kept() {
        let inner = header_only(47);
        let mut frame = vec![0xaa; 12];
        frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
        frame.extend_from_slice(&inner);
        let pkt = PacketBuffer::parse(frame.clone(), LinkType::Ethernet).unwrap();
        assert_eq!(pkt.l3_offset(), 14);
        assert_eq!(pkt.bytes(), &frame[..]);

        frame[12] = 0x86;
        frame[13] = 0xdd;
        assert_eq!(
            PacketBuffer::parse(frame, LinkType::Ethernet),
            Err(PacketError::NotIpv4)
        );
    }

    #[test]
    fn declared_length_beyond_buffer_is_truncated() {
        let pkt = tcp_packet([10, 0, 0, 1], [10, 0, 0, 2], 1, 2, 0, &[], b"hello");
        let mut b = pkt.into_bytes();
        b.truncate(b.len() - 1);
        assert!(matches!(
            PacketBuffer::parse(b, LinkType::RawIp),
            Err(PacketError::Truncated { .. })
        ));
    }

    #[test]
    fn classify_view_elides_ip_options() {
        let plain = tcp_packet([10, 0, 0, 1], [10, 0, 0, 2], 1111, 2222, tcp_flags::ACK, &[], b"xy");
        let mut with_opts = plain.bytes()[..20].to_vec();
        with_opts[0] = 0x46;
        with_opts.extend_from_slice(&[1, 1, 1, 0]);
        with_opts.extend_from_slice(&plain.bytes()[20..]);
        let total = with_opts.len() as u16;
        with_opts[2..4].copy_from_slice(&total.to_be_bytes());
        with_opts[10] = 0;
        with_opts[11] = 0;
        let csum = internet_checksum(&with_opts[..24]);
        with_opts[10..12].copy_from_slice(&csum.to_be_bytes());
        let opt = PacketBuffer::parse(with_opts, LinkType::RawIp).unwrap();
        assert_eq!(opt.l4_offset(), 24);

        let mut a = [0u8; CLASSIFY_SPAN];
        let mut b = [0u8; CLASSIFY_SPAN];
        plain.classify_view(&mut a);
        opt.classify_view(&mut b);
        assert_eq!(a[20..], b[20..]);
        assert_eq!(a[12..20], b[12..20]);
        assert_eq!(opt.normalized_index(22), 26);
    }

    #[test]
    fn non_first_fragment_has_no_transport() {
        let pkt = tcp_packet([10, 0, 0, 1], [10, 0, 0, 2], 1, 2, 0, &[], &[]);
        let mut b = pkt.into_bytes();
        b[6] = 0x00;
        b[7] = 0x10;
        b[10] = 0;
        b[11] = 0;
        let csum = internet_checksum(&b[..20]);
        b[10..12].copy_from_slice(&csum.to_be_bytes());
        let frag = PacketBuffer::parse(b, LinkType::RawIp).unwrap();
        assert_eq!(frag.l4_proto(), L4Proto::Other);
        assert!(frag.is_fragment());
    }

    #[test]
    fn udp_five_tuple() {
        let pkt = udp_packet([10, 0, 0, 1], [10, 0, 0, 2], 53, 5353, b"q");
        let t = pkt.five_tuple();
        assert_eq!((t.src_port, t.dst_port, t.proto), (53, 5353, IPPROTO_UDP));
        assert_eq!(t.reversed().reversed(), t);
    }
}
