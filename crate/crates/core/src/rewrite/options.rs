// SPDX-License-Identifier: Apache-2.0

//! TCP option list editing.

use crate::packet::{option_kind, walk_options, L4Proto, PacketBuffer, TCP_MIN_HEADER_LEN};

use super::RewriteCounters;

/// Longest option area a TCP header can carry.
pub const MAX_OPTION_BYTES: usize = 40;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OptionEdits {
    /// Kinds to remove.
    pub strip: Vec<u8>,
    /// When set, every kind not listed is removed, NOP included.
    pub strip_except: Option<Vec<u8>>,
    /// Replace the value of every option of this kind.
    pub mods: Vec<(u8, Vec<u8>)>,
    /// Append after the existing options.
    pub adds: Vec<(u8, Vec<u8>)>,
}

impl OptionEdits {
    pub fn is_empty(&self) -> bool {
        self.strip.is_empty() && self.strip_except.is_none() && self.mods.is_empty() && self.adds.is_empty()
    }
}

/// Wire size of one option: EOL and NOP are a single octet.
pub fn encoded_len(kind: u8, value: &[u8]) -> usize {
    if kind == option_kind::EOL || kind == option_kind::NOP {
        1
    } else {
        2 + value.len()
    }
}

fn padded_len(list: &[(u8, Vec<u8>)]) -> usize {
    let raw: usize = list.iter().map(|(k, v)| encoded_len(*k, v)).sum();
    raw.div_ceil(4) * 4
}

/// Serializes an option list and pads it with zeros to a 4-byte multiple.
pub fn encode_options(list: &[(u8, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(padded_len(list));
    for (kind, value) in list {
        if encoded_len(*kind, value) == 1 {
            out.push(*kind);
        } else {
            out.push(*kind);
            out.push((2 + value.len()) as u8);
            out.extend_from_slice(value);
        }
    }
    while out.len() % 4 != 0 {
        out.push(0);
    }
    out
}

/// Applies strips, then value changes, then additions. An edit that would
/// push the option area past 40 bytes is skipped and counted. A packet whose
/// option list does not change is left byte-identical. Returns whether the
/// packet changed.
pub fn apply_option_edits(pkt: &mut PacketBuffer, edits: &OptionEdits, counters: &mut RewriteCounters) -> bool {
    if edits.is_empty() || pkt.l4_proto() != L4Proto::Tcp {
        return false;
    }
    let l4 = pkt.l4_offset();
    let start = l4 + TCP_MIN_HEADER_LEN;
    let end = l4 + pkt.tcp_header_len().expect("tcp packet");
    let views = match walk_options(pkt.bytes(), start, end) {
        Ok(v) => v,
        Err(_) => {
            counters.malformed_options += 1;
            return false;
        }
    };
    let original: Vec<(u8, Vec<u8>)> = views.iter().map(|v| (v.kind, v.value(pkt.bytes()).to_vec())).collect();
    let mut list = original.clone();

    if let Some(keep) = &edits.strip_except {
        list.retain(|(k, _)| keep.contains(k));
    }
    list.retain(|(k, _)| !edits.strip.contains(k));
    for (kind, value) in &edits.mods {
        let before = list.clone();
        for (k, v) in list.iter_mut() {
            if k == kind {
                *v = value.clone();
            }
        }
        if padded_len(&list) > MAX_OPTION_BYTES {
            list = before;
            counters.no_header_room += 1;
        }
    }
    for (kind, value) in &edits.adds {
        list.push((*kind, value.clone()));
        if padded_len(&list) > MAX_OPTION_BYTES {
            list.pop();
            counters.no_header_room += 1;
        }
    }
    if list == original {
        return false;
    }

    let encoded = encode_options(&list);
    let old_len = end - start;
    let bytes = pkt.bytes_mut();
    bytes.splice(start..end, encoded.iter().copied());
    let header_len = TCP_MIN_HEADER_LEN + encoded.len();
    bytes[l4 + 12] = ((header_len / 4) as u8) << 4 | (bytes[l4 + 12] & 0x0f);
    let total = pkt.ip_total_len() + encoded.len() - old_len;
    pkt.set_ip_total_len(total as u16);
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::testutil::tcp_packet;
    use crate::packet::{parse_tcp_options, tcp_flags, LinkType};

    const MSS: [u8; 4] = [2, 4, 0x05, 0xb4];
    const SACKP: [u8; 2] = [4, 2];
    const TS: [u8; 10] = [8, 10, 1, 2, 3, 4, 5, 6, 7, 8];
    const WS: [u8; 3] = [3, 3, 7];

    fn syn(opts: &[u8], payload: &[u8]) -> PacketBuffer {
        let mut o = opts.to_vec();
        while !o.len().is_multiple_of(4) {
            o.push(0);
        }
        tcp_packet([10, 0, 0, 1], [10, 1, 0, 1], 1234, 80, tcp_flags::SYN, &o, payload)
    }

    fn kinds(pkt: &PacketBuffer) -> Vec<u8> {
        let mut copy = pkt.clone();
        crate::packet::fix_checksums(&mut copy);
        let reparsed = PacketBuffer::parse(copy.into_bytes(), LinkType::RawIp).unwrap();
        parse_tcp_options(&reparsed).unwrap().iter().map(|o| o.kind).collect()
    }

    fn whitelist() -> OptionEdits {
        OptionEdits {
            strip_except: Some(vec![2, 3]),
            ..OptionEdits::default()
        }
    }

    #[test]
    fn strip_except_keeps_mss_and_wscale() {
        let opts = [&MSS[..], &SACKP, &TS, &[1], &WS].concat();
        let mut pkt = syn(&opts, b"data");
        let mut c = RewriteCounters::default();
        assert!(apply_option_edits(&mut pkt, &whitelist(), &mut c));
        assert_eq!(kinds(&pkt), vec![2, 3]);
        assert_eq!(pkt.tcp_header_len(), Some(28));
        assert_eq!(pkt.ip_total_len(), 20 + 28 + 4);
        assert_eq!(&pkt.bytes()[48..], b"data");
        assert_eq!(&pkt.bytes()[40..48], &[2, 4, 0x05, 0xb4, 3, 3, 7, 0]);
    }

    #[test]
    fn stripping_an_absent_option_is_a_no_op() {
        let opts = [&MSS[..], &[1], &WS].concat();
        let mut pkt = syn(&opts, b"x");
        let before = pkt.bytes().to_vec();
        let edits = OptionEdits {
            strip: vec![8],
            ..OptionEdits::default()
        };
        assert!(!apply_option_edits(&mut pkt, &edits, &mut RewriteCounters::default()));
        assert_eq!(pkt.bytes(), &before[..]);
    }

    #[test]
    fn plain_strip_keeps_nops() {
        let opts = [&[1, 1][..], &TS].concat();
        let mut pkt = syn(&opts, b"");
        let edits = OptionEdits {
            strip: vec![8],
            ..OptionEdits::default()
        };
        assert!(apply_option_edits(&mut pkt, &edits, &mut RewriteCounters::default()));
        assert_eq!(kinds(&pkt), vec![1, 1]);
        assert_eq!(pkt.tcp_header_len(), Some(24));
    }

    #[test]
    fn add_appends_and_respects_header_room() {
        let mut pkt = syn(&MSS, b"");
        let edits = OptionEdits {
            adds: vec![(4, vec![]), (8, vec![0; 8])],
            ..OptionEdits::default()
        };
        let mut c = RewriteCounters::default();
        assert!(apply_option_edits(&mut pkt, &edits, &mut c));
        assert_eq!(kinds(&pkt), vec![2, 4, 8]);
        assert_eq!(pkt.tcp_header_len(), Some(36));

        let mut full = syn(&[&TS[..], &TS, &TS, &TS].concat(), b"");
        assert_eq!(full.tcp_header_len(), Some(60));
        let before = full.bytes().to_vec();
        let mut c = RewriteCounters::default();
        assert!(!apply_option_edits(&mut full, &edits, &mut c));
        assert_eq!(c.no_header_room, 2);
        assert_eq!(full.bytes(), &before[..]);

        // Room for the small option only.
        let mut tight = syn(&[&TS[..], &TS, &TS, &[1, 1, 1, 1, 1, 1]].concat(), b"");
        let mut c = RewriteCounters::default();
        assert!(apply_option_edits(&mut tight, &edits, &mut c));
        assert_eq!(c.no_header_room, 1);
        assert_eq!(kinds(&tight).last(), Some(&4));
    }

    #[test]
    fn mod_replaces_values() {
        let mut pkt = syn(&[&MSS[..], &WS].concat(), b"");
        let edits = OptionEdits {
            mods: vec![(2, vec![0x04, 0x00]), (5, vec![1; 8])],
            ..OptionEdits::default()
        };
        assert!(apply_option_edits(&mut pkt, &edits, &mut RewriteCounters::default()));
        assert_eq!(&pkt.bytes()[40..44], &[2, 4, 0x04, 0x00]);
        assert_eq!(kinds(&pkt), vec![2, 3]);
    }

    #[test]
    fn malformed_lists_are_left_alone() {
        let mut pkt = syn(&[8, 40, 0, 0], b"");
        let mut c = RewriteCounters::default();
        assert!(!apply_option_edits(&mut pkt, &whitelist(), &mut c));
        assert_eq!(c.malformed_options, 1);
    }
}
