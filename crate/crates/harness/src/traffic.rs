// SPDX-License-Identifier: Apache-2.0

//! Synthetic TCP traffic: whole flows with handshake, MTU-sized data and
//! teardown, several flows in flight at once.

use std::net::Ipv4Addr;
use std::time::Duration;

use mmb::packet::craft::{self, Ipv4Spec, TcpSpec};
use mmb::packet::tcp_flags::{ACK, FIN, PSH, SYN};
use mmb::packet::PacketBuffer;
use mmb::pipeline::Frame;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Packets per flow besides data: SYN, SYN-ACK, ACK, then FIN, ACK, FIN, ACK.
pub const CONTROL_PACKETS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficProfile {
    pub flows: usize,
    pub data_packets: usize,
    /// Flows in flight at once; packets of concurrent flows interleave.
    pub concurrency: usize,
    pub mtu: usize,
    /// Clients are drawn from this /24.
    pub client_net: Ipv4Addr,
    /// Servers are drawn from this /16.
    pub server_net: Ipv4Addr,
    pub server_ports: Vec<u16>,
    /// Random option sets on SYNs, timestamps on the rest when negotiated.
    pub decorate_options: bool,
    pub gap: Duration,
}

impl Default for TrafficProfile {
    fn default() -> Self {
        TrafficProfile {
            flows: 7,
            data_packets: 10,
            concurrency: 7,
            mtu: 1500,
            client_net: Ipv4Addr::new(10, 0, 0, 0),
            server_net: Ipv4Addr::new(10, 1, 0, 0),
            server_ports: vec![80, 443, 8080],
            decorate_options: false,
            gap: Duration::from_micros(10),
        }
    }
}

impl TrafficProfile {
    pub fn packets_per_flow(&self) -> usize {
        CONTROL_PACKETS + self.data_packets
    }

    pub fn total_packets(&self) -> usize {
        self.flows * self.packets_per_flow()
    }
}

#[derive(Debug, Clone)]
struct Flow {
    client: Ipv4Addr,
    server: Ipv4Addr,
    sport: u16,
    dport: u16,
    client_seq: u32,
    server_seq: u32,
    syn_options: Vec<u8>,
    synack_options: Vec<u8>,
    timestamps: bool,
    step: usize,
}

/// Lazy packet source for a [`TrafficProfile`].
#[derive(Debug, Clone)]
pub struct TrafficGen {
    profile: TrafficProfile,
    rng: ChaCha8Rng,
    active: Vec<Flow>,
    next_active: usize,
    started: usize,
    emitted: usize,
    clock: Duration,
    payload: Vec<u8>,
}

pub fn generate_traffic(profile: &TrafficProfile, seed: u64) -> TrafficGen {
    TrafficGen {
        profile: profile.clone(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        active: Vec::new(),
        next_active: 0,
        started: 0,
        emitted: 0,
        clock: Duration::ZERO,
        payload: (0..profile.mtu).map(|i| (i % 251) as u8).collect(),
    }
}

const MSS: [u8; 4] = [2, 4, 0x05, 0xb4];
const SACK_PERMITTED: [u8; 2] = [4, 2];
const WSCALE: [u8; 3] = [3, 3, 7];

fn timestamp(v: u32) -> [u8; 10] {
    let mut o = [8, 10, 0, 0, 0, 0, 0, 0, 0, 0];
    o[2..6].copy_from_slice(&v.to_be_bytes());
    o
}

/// A random, well-formed option list of at most 40 bytes.
pub fn random_option_set(rng: &mut impl Rng) -> Vec<u8> {
    let mut parts: Vec<Vec<u8>> = Vec::new();
    if rng.gen_bool(0.8) {
        let mss: u16 = *[536u16, 1220, 1380, 1460].choose(rng).expect("non-empty");
        parts.push(vec![2, 4, (mss >> 8) as u8, mss as u8]);
    }
    if rng.gen_bool(0.6) {
        parts.push(SACK_PERMITTED.to_vec());
    }
    if rng.gen_bool(0.6) {
        parts.push(timestamp(rng.gen()).to_vec());
    }
    if rng.gen_bool(0.6) {
        parts.push(vec![3, 3, rng.gen_range(0..=14)]);
    }
    if rng.gen_bool(0.15) {
        // An experimental option.
        parts.push(vec![254, 4, rng.gen(), rng.gen()]);
    }
    if rng.gen_bool(0.1) {
        parts.push(vec![5, 10, 0, 0, 0, 1, 0, 0, 0, 2]);
    }
    parts.shuffle(rng);
    let mut out = Vec::new();
    for p in parts {
        if rng.gen_bool(0.3) {
            out.push(1);
        }
        if out.len() + p.len() <= 40 {
            out.extend(p);
        }
    }
    out.truncate(40);
    out
}

impl TrafficGen {
    fn start_flow(&mut self) -> Flow {
        let p = &self.profile;
        let c = u32::from(p.client_net) & 0xffff_ff00 | self.rng.gen_range(1..=254);
        let s = u32::from(p.server_net) & 0xffff_0000 | self.rng.gen_range(0x0101..=0xfefe);
        let dport = *p.server_ports.choose(&mut self.rng).unwrap_or(&80);
        let (syn_options, synack_options, timestamps) = if p.decorate_options {
            let syn = random_option_set(&mut self.rng);
            let ts = syn.windows(2).any(|w| w == [8, 10]);
            (syn, random_option_set(&mut self.rng), ts)
        } else {
            (
                [&MSS[..], &SACK_PERMITTED, &[1], &WSCALE].concat(),
                [&MSS[..], &SACK_PERMITTED, &[1], &WSCALE].concat(),
                false,
            )
        };
        Flow {
            client: Ipv4Addr::from(c),
            server: Ipv4Addr::from(s),
            sport: self.rng.gen_range(1024..=65535),
            dport,
            client_seq: self.rng.gen(),
            server_seq: self.rng.gen(),
            syn_options,
            synack_options,
            timestamps,
            step: 0,
        }
    }

    fn packet(&mut self, slot: usize) -> PacketBuffer {
        let n = self.profile.data_packets;
        let mss = self.profile.mtu.saturating_sub(40).max(1);
        let tsval = self.emitted as u32;
        let f = &mut self.active[slot];
        let step = f.step;
        f.step += 1;
        let ts_opt = |echo: u32| -> Vec<u8> {
            let mut o = vec![1, 1];
            o.extend_from_slice(&timestamp(tsval));
            o[8..12].copy_from_slice(&echo.to_be_bytes());
            o
        };
        // (from client, flags, options, payload length)
        let (up, flags, options, len) = match step {
            0 => (true, SYN, f.syn_options.clone(), 0),
            1 => (false, SYN | ACK, f.synack_options.clone(), 0),
            2 => (true, ACK, Vec::new(), 0),
            k if k < 3 + n => (true, PSH | ACK, Vec::new(), mss),
            k if k == 3 + n => (true, FIN | ACK, Vec::new(), 0),
            k if k == 4 + n => (false, ACK, Vec::new(), 0),
            k if k == 5 + n => (false, FIN | ACK, Vec::new(), 0),
            _ => (true, ACK, Vec::new(), 0),
        };
        let options = if f.timestamps && step >= 2 { ts_opt(0) } else { options };
        let len = len.min(self.profile.mtu.saturating_sub(40 + options.len()));
        let (src, dst, sport, dport, seq, ack) = if up {
            (f.client, f.server, f.sport, f.dport, f.client_seq, f.server_seq)
        } else {
            (f.server, f.client, f.dport, f.sport, f.server_seq, f.client_seq)
        };
        let consumed = len as u32 + u32::from(flags & (SYN | FIN) != 0);
        if up {
            f.client_seq = f.client_seq.wrapping_add(consumed);
        } else {
            f.server_seq = f.server_seq.wrapping_add(consumed);
        }
        let ip = Ipv4Spec {
            src,
            dst,
            id: tsval as u16,
            ..Ipv4Spec::default()
        };
        let tcp = TcpSpec {
            sport,
            dport,
            seq,
            ack: if flags & ACK != 0 { ack } else { 0 },
            flags,
            window: 64240,
            urgent: 0,
            options,
        };
        craft::tcp(&ip, &tcp, &self.payload[..len]).expect("generator builds valid packets")
    }
}

impl Iterator for TrafficGen {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        while self.active.len() < self.profile.concurrency.max(1) && self.started < self.profile.flows {
            let f = self.start_flow();
            self.active.push(f);
            self.started += 1;
        }
        if self.active.is_empty() {
            return None;
        }
        let slot = self.next_active % self.active.len();
        let pkt = self.packet(slot);
        if self.active[slot].step == self.profile.packets_per_flow() {
            self.active.remove(slot);
        } else {
            self.next_active = slot + 1;
        }
        self.emitted += 1;
        self.clock += self.profile.gap;
        Some(Frame::raw(pkt.into_bytes(), self.clock))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.profile.total_packets() - self.emitted;
        (left, Some(left))
    }
}

impl ExactSizeIterator for TrafficGen {}
