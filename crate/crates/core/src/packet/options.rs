// SPDX-License-Identifier: Apache-2.0

//! TCP option list walking.

use thiserror::Error;

use super::{L4Proto, PacketBuffer, TCP_MIN_HEADER_LEN};

pub mod option_kind {
    pub const EOL: u8 = 0;
    pub const NOP: u8 = 1;
    pub const MSS: u8 = 2;
    pub const WSCALE: u8 = 3;
    pub const SACK_PERMITTED: u8 = 4;
    pub const SACK: u8 = 5;
    pub const TIMESTAMP: u8 = 8;
    pub const MPTCP: u8 = 30;
    pub const FASTOPEN: u8 = 34;
}

/// One option in the TCP header. `length` counts the kind and length
/// octets; NOP has length 1 and no value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcpOptionView {
    pub kind: u8,
    pub length: u8,
    /// Index of the first value byte within the buffer the options were
    /// walked in.
    pub value_offset: usize,
}

impl TcpOptionView {
    pub fn value_len(&self) -> usize {
        usize::from(self.length).saturating_sub(2)
    }

    /// Offset of the kind octet.
    pub fn start(&self) -> usize {
        if self.length == 1 {
            self.value_offset - 1
        } else {
            self.value_offset - 2
        }
    }

    pub fn value<'a>(&self, bytes: &'a [u8]) -> &'a [u8] {
        &bytes[self.value_offset..self.value_offset + self.value_len()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OptionError {
    #[error("malformed TCP option at byte {offset}")]
    Malformed { offset: usize },
    #[error("not a TCP packet")]
    NotTcp,
}

/// Walks the option area `bytes[start..end]`, stopping at EOL or at `end`.
/// Offsets in the returned views index into `bytes`.
pub fn walk_options(bytes: &[u8], start: usize, end: usize) -> Result<Vec<TcpOptionView>, OptionError> {
    let mut out = Vec::new();
    let mut at = start;
    while at < end {
        match bytes[at] {
            option_kind::EOL => break,
            option_kind::NOP => {
                out.push(TcpOptionView {
                    kind: option_kind::NOP,
                    length: 1,
                    value_offset: at + 1,
                });
                at += 1;
            }
            kind => {
                if at + 1 >= end {
                    return Err(OptionError::Malformed { offset: at });
                }
                let length = bytes[at + 1];
                if length < 2 || at + usize::from(length) > end {
                    return Err(OptionError::Malformed { offset: at });
                }
                out.push(TcpOptionView {
                    kind,
                    length,
                    value_offset: at + 2,
                });
                at += usize::from(length);
            }
        }
    }
    Ok(out)
}

/// Options of a TCP packet in wire order. Never reads past the header
/// length declared by the data offset.
pub fn parse_tcp_options(pkt: &PacketBuffer) -> Result<Vec<TcpOptionView>, OptionError> {
    if pkt.l4_proto() != L4Proto::Tcp {
        return Err(OptionError::NotTcp);
    }
    let start = pkt.l4_offset() + TCP_MIN_HEADER_LEN;
    let end = pkt.l4_offset() + pkt.tcp_header_len().unwrap_or(TCP_MIN_HEADER_LEN);
    walk_options(pkt.bytes(), start, end)
}
