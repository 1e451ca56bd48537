// SPDX-License-Identifier: Apache-2.0

//! Internet checksums (RFC 1071). Checksums are always recomputed in full.

use super::{L4Proto, PacketBuffer, IPPROTO_TCP, IPPROTO_UDP};

/// Ones-complement sum of `data` added to `initial`, folded to 16 bits.
/// An odd trailing byte is padded with zero.
pub fn ones_complement_sum(data: &[u8], initial: u32) -> u16 {
    let mut sum = u64::from(initial);
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        sum += u64::from(u16::from_be_bytes([c[0], c[1]]));
    }
    if let [last] = chunks.remainder() {
        sum += u64::from(*last) << 8;
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    sum as u16
}

/// The checksum to store for `data`. Over data that already carries a
/// correct checksum this returns zero.
pub fn internet_checksum(data: &[u8]) -> u16 {
    !ones_complement_sum(data, 0)
}

fn pseudo_header_sum(pkt: &PacketBuffer, proto: u8, l4_len: usize) -> u32 {
    let b = pkt.bytes();
    let l3 = pkt.l3_offset();
    let addrs = u32::from(ones_complement_sum(&b[l3 + 12..l3 + 20], 0));
    addrs + u32::from(proto) + l4_len as u32
}

/// Offset of the transport checksum field relative to the L4 header, if the
/// packet has one we maintain. Fragments are left alone since their
/// transport checksum spans bytes we do not see.
fn l4_checksum_field(pkt: &PacketBuffer) -> Option<usize> {
    if pkt.is_fragment() {
        return None;
    }
    match pkt.l4_proto() {
        L4Proto::Tcp => Some(16),
        L4Proto::Udp => Some(6),
        L4Proto::Icmp => Some(2),
        L4Proto::Other => None,
    }
}

/// Recomputes the IPv4 header checksum and the TCP, UDP or ICMP checksum
/// from the current bytes. A zero UDP checksum (checksum disabled) stays
/// zero.
pub fn fix_checksums(pkt: &mut PacketBuffer) {
    let l3 = pkt.l3_offset();
    let l4 = pkt.l4_offset();
    let end = pkt.l3_end();
    let proto = pkt.l4_proto();
    let field = l4_checksum_field(pkt);
    let pseudo = match proto {
        L4Proto::Tcp => pseudo_header_sum(pkt, IPPROTO_TCP, end - l4),
        L4Proto::Udp => pseudo_header_sum(pkt, IPPROTO_UDP, end - l4),
        _ => 0,
    };

    let b = pkt.bytes_mut();
    b[l3 + 10] = 0;
    b[l3 + 11] = 0;
    let ip = internet_checksum(&b[l3..l4]);
    b[l3 + 10..l3 + 12].copy_from_slice(&ip.to_be_bytes());

    let Some(field) = field else { return };
    let at = l4 + field;
    if proto == L4Proto::Udp && b[at] == 0 && b[at + 1] == 0 {
        return;
    }
    b[at] = 0;
    b[at + 1] = 0;
    let mut csum = !ones_complement_sum(&b[l4..end], pseudo);
    if proto == L4Proto::Udp && csum == 0 {
        csum = 0xffff;
    }
    b[at..at + 2].copy_from_slice(&csum.to_be_bytes());
}

/// True when the IPv4 header checksum and the maintained transport checksum
/// verify.
pub fn checksums_valid(pkt: &PacketBuffer) -> bool {
    let b = pkt.bytes();
    let l3 = pkt.l3_offset();
    let l4 = pkt.l4_offset();
    let end = pkt.l3_end();
    if ones_complement_sum(&b[l3..l4], 0) != 0xffff {
        return false;
    }
    let Some(field) = l4_checksum_field(pkt) else {
        return true;
    };
    let pseudo = match pkt.l4_proto() {
        L4Proto::Tcp => pseudo_header_sum(pkt, IPPROTO_TCP, end - l4),
        L4Proto::Udp => {
            if b[l4 + field] == 0 && b[l4 + field + 1] == 0 {
                return true;
            }
            pseudo_header_sum(pkt, IPPROTO_UDP, end - l4)
        }
        _ => 0,
    };
    ones_complement_sum(&b[l4..end], pseudo) == 0xffff
}

#[cfg(test)]
mod tests {
    use super::super::tcp_flags;
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn rfc1071_example() {
        // Worked example from RFC 1071 section 3.
        let data = [0x00, 0x01, 0xf2, 0x03, 0xf4, 0xf5, 0xf6, 0xf7];
        assert_eq!(ones_complement_sum(&data, 0), 0xddf2);
        assert_eq!(internet_checksum(&data), !0xddf2);
    }

    #[test]
    fn odd_length_pads_with_zero() {
        assert_eq!(ones_complement_sum(&[0x12, 0x34, 0x56], 0), 0x1234 + 0x5600);
    }

    #[test]
    fn fix_is_identity_on_valid_packets() {
        let pkt = tcp_packet(
            [10, 0, 0, 1],
            [10, 0, 0, 2],
            1,
            80,
            tcp_flags::SYN,
            &[2, 4, 5, 0xb4],
            b"abc",
        );
        assert!(checksums_valid(&pkt));
        let mut again = pkt.clone();
        fix_checksums(&mut again);
        assert_eq!(again, pkt);
    }

    #[test]
    fn udp_zero_checksum_stays_disabled() {
        let pkt = udp_packet([10, 0, 0, 1], [10, 0, 0, 2], 1, 2, b"abcd");
        let mut b = pkt.into_bytes();
        b[26] = 0;
        b[27] = 0;
        let mut pkt = PacketBuffer::parse(b, super::super::LinkType::RawIp).unwrap();
        assert!(checksums_valid(&pkt));
        fix_checksums(&mut pkt);
        assert_eq!(&pkt.bytes()[26..28], &[0, 0]);
    }

    #[test]
    fn detects_corrupted_transport() {
        let pkt = tcp_packet([10, 0, 0, 1], [10, 0, 0, 2], 1, 80, 0, &[], b"abc");
        let mut b = pkt.clone().into_bytes();
        *b.last_mut().unwrap() ^= 1;
        let bad = PacketBuffer::parse(b, super::super::LinkType::RawIp).unwrap();
        assert!(!checksums_valid(&bad));
    }
}
