// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::Serialize;

use super::{NodeStats, NODE_NAMES};
use crate::conntrack::ConnCounters;
use crate::rewrite::RewriteCounters;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeReport {
    pub name: &'static str,
    pub vectors: u64,
    pub packets: u64,
    pub nanos: u64,
    pub ns_per_packet: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub packets: u64,
    pub invalid: u64,
    pub rule_drops: u64,
    pub dropped: u64,
    pub forwarded: u64,
    pub matched: u64,
    pub missed: u64,
    /// Forwarded packets whose bytes changed.
    pub modified: u64,
    pub vectors: u64,
    pub elapsed_ns: u64,
    pub packets_per_second: f64,
    pub nodes: Vec<NodeReport>,
    pub rewrite: RewriteCounters,
    pub conn: ConnCounters,
    pub connections: usize,
    pub rule_hits: BTreeMap<u64, u64>,
}

pub(super) struct Totals {
    pub invalid: u64,
    pub rule_drops: u64,
    pub matched: u64,
    pub missed: u64,
    pub modified: u64,
    pub vectors: u64,
    pub elapsed: Duration,
    pub rewrite: RewriteCounters,
    pub conn: ConnCounters,
    pub connections: usize,
    pub rule_hits: BTreeMap<u64, u64>,
}

impl RunReport {
    pub(super) fn build(nodes: &[NodeStats; 5], t: Totals) -> RunReport {
        let packets = nodes[0].packets;
        let elapsed_ns = t.elapsed.as_nanos() as u64;
        RunReport {
            packets,
            invalid: t.invalid,
            rule_drops: t.rule_drops,
            dropped: t.invalid + t.rule_drops,
            forwarded: t.matched + t.missed,
            matched: t.matched,
            missed: t.missed,
            modified: t.modified,
            vectors: t.vectors,
            elapsed_ns,
            packets_per_second: if elapsed_ns == 0 {
                0.0
            } else {
                packets as f64 * 1e9 / elapsed_ns as f64
            },
            nodes: NODE_NAMES
                .iter()
                .zip(nodes)
                .map(|(name, s)| NodeReport {
                    name,
                    vectors: s.vectors,
                    packets: s.packets,
                    nanos: s.nanos,
                    ns_per_packet: if s.packets == 0 {
                        0.0
                    } else {
                        s.nanos as f64 / s.packets as f64
                    },
                })
                .collect(),
            rewrite: t.rewrite,
            conn: t.conn,
            connections: t.connections,
            rule_hits: t.rule_hits,
        }
    }

    pub fn node(&self, name: &str) -> Option<&NodeReport> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Classify node cost, the figure scaling comparisons use.
    pub fn classify_ns_per_packet(&self) -> f64 {
        self.node("classify").map_or(0.0, |n| n.ns_per_packet)
    }

    /// Every input packet was either dropped or forwarded exactly once, and
    /// every classified packet got exactly one verdict.
    pub fn conserves_packets(&self) -> bool {
        let classified = self.node("classify").map_or(0, |n| n.packets);
        self.packets == self.dropped + self.forwarded && classified == self.rule_drops + self.matched + self.missed
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "packets {} forwarded {} dropped {} (invalid {}) matched {} missed {} modified {}",
            self.packets, self.forwarded, self.dropped, self.invalid, self.matched, self.missed, self.modified
        )?;
        writeln!(
            f,
            "vectors {} elapsed {:.3} ms rate {:.0} pps",
            self.vectors,
            self.elapsed_ns as f64 / 1e6,
            self.packets_per_second
        )?;
        for n in &self.nodes {
            writeln!(
                f,
                "node {:<10} vectors {:>8} packets {:>10} {:>9.1} ns/packet",
                n.name, n.vectors, n.packets, n.ns_per_packet
            )?;
        }
        writeln!(
            f,
            "connections {} inserted {} expired {} table-full {} range-exhausted {}",
            self.connections, self.conn.inserted, self.conn.expired, self.conn.table_full, self.conn.range_exhausted
        )?;
        write!(
            f,
            "rewrite malformed-options {} no-header-room {} missing-binding {} payload-skipped {}",
            self.rewrite.malformed_options,
            self.rewrite.no_header_room,
            self.rewrite.missing_binding,
            self.rewrite.payload_skipped
        )
    }
}
