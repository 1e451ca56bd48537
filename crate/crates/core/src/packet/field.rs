// SPDX-License-Identifier: Apache-2.0

//! Field registry: symbolic names for the header fields rules can match and
//! rewrite, and how to find them in a packet.

use std::fmt;

use thiserror::Error;

use super::options::{option_kind, parse_tcp_options};
use super::{L4Proto, PacketBuffer, IPV4_MIN_HEADER_LEN, UDP_HEADER_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    L3,
    L4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PayloadKind {
    Ip4,
    Udp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Locator {
    /// `width` bits starting `bit_offset` bits into the byte at `offset`
    /// from the start of `base`, most significant bit first.
    Fixed {
        base: Layer,
        offset: u8,
        bit_offset: u8,
        width: u8,
    },
    /// Bit index in the TCP flags octet (0 is FIN).
    TcpFlag(u8),
    TcpOption(u8),
    Payload(PayloadKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FieldDescriptor {
    pub name: &'static str,
    pub locator: Locator,
    /// Transport protocol the field belongs to, if any.
    pub proto: Option<L4Proto>,
}

const fn fixed(
    name: &'static str,
    base: Layer,
    offset: u8,
    bit_offset: u8,
    width: u8,
    proto: Option<L4Proto>,
) -> FieldDescriptor {
    FieldDescriptor {
        name,
        locator: Locator::Fixed {
            base,
            offset,
            bit_offset,
            width,
        },
        proto,
    }
}

const fn flag(name: &'static str, bit: u8) -> FieldDescriptor {
    FieldDescriptor {
        name,
        locator: Locator::TcpFlag(bit),
        proto: Some(L4Proto::Tcp),
    }
}

const fn opt(name: &'static str, kind: u8) -> FieldDescriptor {
    FieldDescriptor {
        name,
        locator: Locator::TcpOption(kind),
        proto: Some(L4Proto::Tcp),
    }
}

const TCP: Option<L4Proto> = Some(L4Proto::Tcp);
const UDP: Option<L4Proto> = Some(L4Proto::Udp);
const ICMP: Option<L4Proto> = Some(L4Proto::Icmp);

static REGISTRY: [FieldDescriptor; 34] = [
    fixed("ip-saddr", Layer::L3, 12, 0, 32, None),
    fixed("ip-daddr", Layer::L3, 16, 0, 32, None),
    fixed("ip-proto", Layer::L3, 9, 0, 8, None),
    fixed("ip-ttl", Layer::L3, 8, 0, 8, None),
    fixed("ip-dscp", Layer::L3, 1, 0, 6, None),
    fixed("ip-ecn", Layer::L3, 1, 6, 2, None),
    fixed("ip-len", Layer::L3, 2, 0, 16, None),
    fixed("ip-id", Layer::L3, 4, 0, 16, None),
    FieldDescriptor {
        name: "ip4-payload",
        locator: Locator::Payload(PayloadKind::Ip4),
        proto: None,
    },
    fixed("tcp-sport", Layer::L4, 0, 0, 16, TCP),
    fixed("tcp-dport", Layer::L4, 2, 0, 16, TCP),
    fixed("tcp-seq", Layer::L4, 4, 0, 32, TCP),
    fixed("tcp-ack-num", Layer::L4, 8, 0, 32, TCP),
    fixed("tcp-win", Layer::L4, 14, 0, 16, TCP),
    fixed("tcp-flags", Layer::L4, 13, 0, 8, TCP),
    flag("tcp-fin", 0),
    flag("tcp-syn", 1),
    flag("tcp-rst", 2),
    flag("tcp-psh", 3),
    flag("tcp-ack", 4),
    flag("tcp-urg", 5),
    opt("tcp-opt-mss", option_kind::MSS),
    opt("tcp-opt-wscale", option_kind::WSCALE),
    opt("tcp-opt-sackp", option_kind::SACK_PERMITTED),
    opt("tcp-opt-sack", option_kind::SACK),
    opt("tcp-opt-timestamp", option_kind::TIMESTAMP),
    opt("tcp-opt-fastopen", option_kind::FASTOPEN),
    opt("tcp-opt-mptcp", option_kind::MPTCP),
    fixed("udp-sport", Layer::L4, 0, 0, 16, UDP),
    fixed("udp-dport", Layer::L4, 2, 0, 16, UDP),
    fixed("udp-len", Layer::L4, 4, 0, 16, UDP),
    FieldDescriptor {
        name: "udp-payload",
        locator: Locator::Payload(PayloadKind::Udp),
        proto: UDP,
    },
    fixed("icmp-type", Layer::L4, 0, 0, 8, ICMP),
    fixed("icmp-code", Layer::L4, 1, 0, 8, ICMP),
];

/// Every named field. The generic `tcp-opt <kind>` form is not listed; see
/// [`tcp_option_field`].
pub fn registry() -> &'static [FieldDescriptor] {
    &REGISTRY
}

pub fn lookup_field(name: &str) -> Option<FieldDescriptor> {
    REGISTRY.iter().find(|f| f.name == name).copied()
}

/// The generic `tcp-opt <kind>` field.
pub fn tcp_option_field(kind: u8) -> FieldDescriptor {
    opt("tcp-opt", kind)
}

impl FieldDescriptor {
    pub fn is_generic_option(&self) -> bool {
        self.name == "tcp-opt"
    }

    pub fn option_kind(&self) -> Option<u8> {
        match self.locator {
            Locator::TcpOption(kind) => Some(kind),
            _ => None,
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self.locator, Locator::Fixed { .. })
    }

    pub fn is_address(&self) -> bool {
        matches!(self.name, "ip-saddr" | "ip-daddr")
    }

    /// Bit width of integer-valued fields.
    pub fn width_bits(&self) -> Option<u8> {
        match self.locator {
            Locator::Fixed { width, .. } => Some(width),
            Locator::TcpFlag(_) => Some(1),
            _ => None,
        }
    }

    /// The field holding the same role for traffic in the other direction.
    pub fn mirror(&self) -> Option<FieldDescriptor> {
        let name = match self.name {
            "ip-saddr" => "ip-daddr",
            "ip-daddr" => "ip-saddr",
            "tcp-sport" => "tcp-dport",
            "tcp-dport" => "tcp-sport",
            "udp-sport" => "udp-dport",
            "udp-dport" => "udp-sport",
            _ => return None,
        };
        lookup_field(name)
    }

    /// Offset of the field's first byte from the start of the IPv4 header,
    /// assuming a 20-byte IPv4 header. Covers fixed fields and TCP flags.
    pub fn normalized_offset(&self) -> Option<usize> {
        match self.locator {
            Locator::Fixed { base, offset, .. } => Some(match base {
                Layer::L3 => usize::from(offset),
                Layer::L4 => IPV4_MIN_HEADER_LEN + usize::from(offset),
            }),
            Locator::TcpFlag(_) => Some(IPV4_MIN_HEADER_LEN + 13),
            _ => None,
        }
    }

    /// (bit_offset, width, byte count) of the field's footprint starting at
    /// [`normalized_offset`](Self::normalized_offset).
    fn bit_span(&self) -> Option<(u32, u32, usize)> {
        let (bit_offset, width) = match self.locator {
            Locator::Fixed { bit_offset, width, .. } => (u32::from(bit_offset), u32::from(width)),
            Locator::TcpFlag(bit) => (7 - u32::from(bit), 1),
            _ => return None,
        };
        Some((bit_offset, width, (bit_offset + width).div_ceil(8) as usize))
    }

    /// Bytes covering the field with the field's bits set, aligned at
    /// [`normalized_offset`](Self::normalized_offset).
    pub fn bit_mask(&self) -> Option<Vec<u8>> {
        self.encode(u64::MAX)
    }

    /// `value` placed in the field's bit positions, truncated to its width.
    pub fn encode(&self, value: u64) -> Option<Vec<u8>> {
        let (bit_offset, width, nbytes) = self.bit_span()?;
        let shift = nbytes as u32 * 8 - bit_offset - width;
        let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
        let word = (value & mask) << shift;
        Some(word.to_be_bytes()[8 - nbytes..].to_vec())
    }

    fn decode(&self, bytes: &[u8]) -> Option<u64> {
        let (bit_offset, width, nbytes) = self.bit_span()?;
        let shift = nbytes as u32 * 8 - bit_offset - width;
        let word = bytes[..nbytes].iter().fold(0u64, |acc, b| (acc << 8) | u64::from(*b));
        Some((word >> shift) & ((1u64 << width) - 1))
    }

    /// Index in the packet buffer where the field's footprint starts.
    fn buffer_index(&self, pkt: &PacketBuffer) -> Option<usize> {
        match self.locator {
            Locator::Fixed {
                base: Layer::L3,
                offset,
                ..
            } => Some(pkt.l3_offset() + usize::from(offset)),
            Locator::Fixed {
                base: Layer::L4,
                offset,
                ..
            } => Some(pkt.l4_offset() + usize::from(offset)),
            Locator::TcpFlag(_) => Some(pkt.l4_offset() + 13),
            _ => None,
        }
    }

    pub(crate) fn check_proto(&self, pkt: &PacketBuffer) -> Result<(), FieldError> {
        match self.proto {
            Some(p) if p != pkt.l4_proto() => Err(FieldError::ProtocolMismatch(self.name)),
            _ => Ok(()),
        }
    }

    pub(crate) fn payload_range(&self, pkt: &PacketBuffer) -> Option<(usize, usize)> {
        match self.locator {
            Locator::Payload(PayloadKind::Ip4) => Some((pkt.l4_offset(), pkt.l3_end())),
            Locator::Payload(PayloadKind::Udp) => Some((pkt.l4_offset() + UDP_HEADER_LEN, pkt.l3_end())),
            _ => None,
        }
    }
}

impl fmt::Display for FieldDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.locator {
            Locator::TcpOption(kind) if self.is_generic_option() => write!(f, "tcp-opt {kind}"),
            _ => f.write_str(self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FieldValue {
    Int(u64),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FieldError {
    #[error("field {0} does not apply to this packet's protocol")]
    ProtocolMismatch(&'static str),
    #[error("malformed TCP options")]
    MalformedOption,
    #[error("value does not fit field {0}")]
    ValueMismatch(&'static str),
    #[error("field {0} cannot be written directly")]
    NotWritable(&'static str),
}

/// Reads a field. `Ok(None)` means the field is absent (an option that is
/// not present); protocol mismatches are reported as errors and callers
/// treat them as absent too.
pub fn read_field(pkt: &PacketBuffer, fd: &FieldDescriptor) -> Result<Option<FieldValue>, FieldError> {
    fd.check_proto(pkt)?;
    let bytes = pkt.bytes();
    match fd.locator {
        Locator::Fixed { .. } | Locator::TcpFlag(_) => {
            let at = fd.buffer_index(pkt).expect("fixed field");
            Ok(fd.decode(&bytes[at..]).map(FieldValue::Int))
        }
        Locator::TcpOption(kind) => {
            let opts = parse_tcp_options(pkt).map_err(|_| FieldError::MalformedOption)?;
            Ok(opts
                .iter()
                .find(|o| o.kind == kind)
                .map(|o| FieldValue::Bytes(o.value(bytes).to_vec())))
        }
        Locator::Payload(_) => {
            let (start, end) = fd.payload_range(pkt).expect("payload field");
            Ok(Some(FieldValue::Bytes(bytes[start..end].to_vec())))
        }
    }
}

/// Writes a fixed field, TCP flag or payload prefix in place. Checksums are
/// not updated. TCP options are edited by the rewrite stage instead.
pub fn write_field(pkt: &mut PacketBuffer, fd: &FieldDescriptor, value: &FieldValue) -> Result<(), FieldError> {
    fd.check_proto(pkt)?;
    match (fd.locator, value) {
        (Locator::Fixed { .. } | Locator::TcpFlag(_), FieldValue::Int(v)) => {
            let at = fd.buffer_index(pkt).expect("fixed field");
            let mask = fd.bit_mask().expect("fixed field");
            let enc = fd.encode(*v).expect("fixed field");
            let bytes = pkt.bytes_mut();
            for (i, (m, k)) in mask.iter().zip(&enc).enumerate() {
                bytes[at + i] = (bytes[at + i] & !m) | k;
            }
            Ok(())
        }
        (Locator::Payload(_), FieldValue::Bytes(data)) => {
            let (start, end) = fd.payload_range(pkt).expect("payload field");
            if end - start < data.len() {
                return Err(FieldError::ValueMismatch(fd.name));
            }
            pkt.bytes_mut()[start..start + data.len()].copy_from_slice(data);
            Ok(())
        }
        (Locator::TcpOption(_), _) => Err(FieldError::NotWritable(fd.name)),
        _ => Err(FieldError::ValueMismatch(fd.name)),
    }
}

#[cfg(test)]
mod tests {
    use super::super::tcp_flags;
    use super::super::testutil::*;
    use super::*;

    fn get(pkt: &PacketBuffer, name: &str) -> Option<FieldValue> {
        read_field(pkt, &lookup_field(name).unwrap()).unwrap()
    }

    #[test]
    fn reads_tcp_fields() {
        let pkt = tcp_packet(
            [10, 0, 0, 5],
            [192, 168, 1, 1],
            4321,
            80,
            tcp_flags::SYN | tcp_flags::ACK,
            &[],
            &[],
        );
        assert_eq!(get(&pkt, "tcp-dport"), Some(FieldValue::Int(80)));
        assert_eq!(get(&pkt, "tcp-sport"), Some(FieldValue::Int(4321)));
        assert_eq!(get(&pkt, "ip-saddr"), Some(FieldValue::Int(0x0a00_0005)));
        assert_eq!(get(&pkt, "tcp-syn"), Some(FieldValue::Int(1)));
        assert_eq!(get(&pkt, "tcp-fin"), Some(FieldValue::Int(0)));
        assert_eq!(get(&pkt, "tcp-flags"), Some(FieldValue::Int(0x12)));
        assert_eq!(get(&pkt, "ip-ttl"), Some(FieldValue::Int(64)));
        assert_eq!(get(&pkt, "tcp-opt-mss"), None);
    }

    #[test]
    fn protocol_mismatch_is_an_error() {
        let pkt = udp_packet([10, 0, 0, 1], [10, 0, 0, 2], 53, 80, b"hi");
        let err = read_field(&pkt, &lookup_field("tcp-dport").unwrap()).unwrap_err();
        assert_eq!(err, FieldError::ProtocolMismatch("tcp-dport"));
        assert_eq!(get(&pkt, "udp-dport"), Some(FieldValue::Int(80)));
        assert_eq!(get(&pkt, "udp-payload"), Some(FieldValue::Bytes(b"hi".to_vec())));
    }

    #[test]
    fn sub_byte_fields() {
        let mut pkt = tcp_packet([10, 0, 0, 1], [10, 0, 0, 2], 1, 2, 0, &[], &[]);
        write_field(&mut pkt, &lookup_field("ip-dscp").unwrap(), &FieldValue::Int(46)).unwrap();
        write_field(&mut pkt, &lookup_field("ip-ecn").unwrap(), &FieldValue::Int(1)).unwrap();
        assert_eq!(pkt.bytes()[1], (46 << 2) | 1);
        assert_eq!(get(&pkt, "ip-dscp"), Some(FieldValue::Int(46)));
        assert_eq!(get(&pkt, "ip-ecn"), Some(FieldValue::Int(1)));
        write_field(&mut pkt, &lookup_field("tcp-rst").unwrap(), &FieldValue::Int(1)).unwrap();
        assert_eq!(pkt.tcp_flags(), Some(tcp_flags::RST));
    }

    #[test]
    fn masks_and_offsets() {
        let dport = lookup_field("tcp-dport").unwrap();
        assert_eq!(dport.normalized_offset(), Some(22));
        assert_eq!(dport.bit_mask(), Some(vec![0xff, 0xff]));
        assert_eq!(dport.encode(443), Some(vec![0x01, 0xbb]));
        let dscp = lookup_field("ip-dscp").unwrap();
        assert_eq!(dscp.bit_mask(), Some(vec![0xfc]));
        let syn = lookup_field("tcp-syn").unwrap();
        assert_eq!(syn.normalized_offset(), Some(33));
        assert_eq!(syn.bit_mask(), Some(vec![0x02]));
    }

    #[test]
    fn option_fields() {
        let pkt = tcp_packet([10, 0, 0, 1], [10, 0, 0, 2], 1, 2, 0, &[2, 4, 5, 0xb4], &[]);
        assert_eq!(get(&pkt, "tcp-opt-mss"), Some(FieldValue::Bytes(vec![5, 0xb4])));
        assert_eq!(
            read_field(&pkt, &tcp_option_field(2)).unwrap(),
            Some(FieldValue::Bytes(vec![5, 0xb4]))
        );
        assert_eq!(tcp_option_field(34).to_string(), "tcp-opt 34");
    }

    #[test]
    fn registry_names_are_unique_and_fit_the_fast_path_span() {
        let mut names: Vec<_> = registry().iter().map(|f| f.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), registry().len());
        for f in registry() {
            if let (Some(off), Some(mask)) = (f.normalized_offset(), f.bit_mask()) {
                assert!(off + mask.len() <= super::super::CLASSIFY_SPAN, "{}", f.name);
            }
        }
    }
}
