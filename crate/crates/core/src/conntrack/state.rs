// SPDX-License-Identifier: Apache-2.0

//! Simplified TCP connection state, driven only by the flags seen in each
//! direction.

use std::fmt;

use super::Direction;
use crate::packet::tcp_flags::{ACK, FIN, RST, SYN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TcpState {
    New,
    Established,
    FinWait,
    Closed,
}

impl fmt::Display for TcpState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TcpState::New => "NEW",
            TcpState::Established => "ESTABLISHED",
            TcpState::FinWait => "FIN_WAIT",
            TcpState::Closed => "CLOSED",
        })
    }
}

/// Flag history the state machine needs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TcpTrack {
    pub syn_seen: [bool; 2],
    /// Direction of the first FIN.
    pub fin_dir: Option<Direction>,
}

/// Applies one packet, in this order:
///
/// 1. CLOSED is final.
/// 2. RST closes.
/// 3. SYN is recorded for the packet's direction.
/// 4. In NEW, an ACK without SYN establishes the connection once SYNs were
///    seen both ways, or when it carries data after at least one SYN.
/// 5. In NEW or ESTABLISHED, FIN moves to FIN_WAIT.
/// 6. In FIN_WAIT, FIN+ACK from the side that did not send the first FIN
///    closes.
pub fn next_tcp_state(state: TcpState, track: &mut TcpTrack, flags: u8, dir: Direction, has_payload: bool) -> TcpState {
    if state == TcpState::Closed {
        return state;
    }
    if flags & RST != 0 {
        return TcpState::Closed;
    }
    let mut state = state;
    if flags & SYN != 0 {
        track.syn_seen[dir.index()] = true;
    }
    if state == TcpState::New && flags & ACK != 0 && flags & SYN == 0 {
        let both = track.syn_seen[0] && track.syn_seen[1];
        let data = has_payload && (track.syn_seen[0] || track.syn_seen[1]);
        if both || data {
            state = TcpState::Established;
        }
    }
    if flags & FIN != 0 && matches!(state, TcpState::New | TcpState::Established) {
        track.fin_dir = Some(dir);
        return TcpState::FinWait;
    }
    if state == TcpState::FinWait && flags & (FIN | ACK) == FIN | ACK && track.fin_dir == Some(dir.flip()) {
        return TcpState::Closed;
    }
    state
}
