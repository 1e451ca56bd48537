// SPDX-License-Identifier: Apache-2.0

//! Vector-at-a-time packet graph:
//!
//! ```text
//! input -> classify -> error-drop
//!                   -> rewrite -> output
//!                   -> output
//! ```
//!
//! Each node runs over a whole vector before the next one starts. With more
//! than one worker, packets are steered by connection key to a worker that
//! owns its own connection shard; output order always follows input order.

mod report;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::classifier::{classify_into, Classifier, RuleMatches, Verdict};
use crate::conntrack::{BindingPool, ConnConfig, ConnCounters, ConnEntry, ConnKey, ConnTable, Direction, InsertError};
use crate::packet::{LinkType, PacketBuffer};
use crate::rewrite::{rewrite_packet, ProgramSet, RewriteCounters};
use crate::rules::RuleId;

pub use report::{NodeReport, RunReport};

pub const DEFAULT_VECTOR_SIZE: usize = 256;

/// Node order in [`NodeStats`] arrays and reports.
pub const NODE_NAMES: [&str; 5] = ["input", "classify", "rewrite", "error-drop", "output"];
const INPUT: usize = 0;
const CLASSIFY: usize = 1;
const REWRITE: usize = 2;
const ERROR_DROP: usize = 3;
const OUTPUT: usize = 4;

/// A raw frame entering the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub data: Vec<u8>,
    pub timestamp: Duration,
    pub link: LinkType,
}

impl Frame {
    pub fn raw(data: Vec<u8>, timestamp: Duration) -> Frame {
        Frame {
            data,
            timestamp,
            link: LinkType::RawIp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Rule,
    Invalid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    /// No rule and no connection: forwarded untouched.
    Forward,
    /// Went through the rewrite node, then forwarded.
    Rewritten,
    Drop(DropReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Output {
    pub disposition: Disposition,
    /// The packet as emitted, for forwarded packets.
    pub packet: Option<PacketBuffer>,
}

/// Everything a vector needs from the control plane, immutable once
/// published.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub version: u64,
    pub enabled: bool,
    pub classifier: Classifier,
    pub programs: ProgramSet,
}

/// Publication point between the control thread and the workers.
#[derive(Debug, Default)]
pub struct SnapshotCell(RwLock<Arc<Snapshot>>);

impl SnapshotCell {
    pub fn new(snapshot: Snapshot) -> Self {
        SnapshotCell(RwLock::new(Arc::new(snapshot)))
    }

    pub fn load(&self) -> Arc<Snapshot> {
        self.0.read().expect("snapshot lock poisoned").clone()
    }

    pub fn store(&self, snapshot: Arc<Snapshot>) {
        *self.0.write().expect("snapshot lock poisoned") = snapshot;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    pub vector_size: usize,
    pub workers: usize,
    pub conn: ConnConfig,
    /// Packets a worker handles between two purge steps.
    pub purge_interval: usize,
    /// Connection slots scanned per purge step.
    pub purge_budget: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            vector_size: DEFAULT_VECTOR_SIZE,
            workers: 1,
            conn: ConnConfig::default(),
            purge_interval: DEFAULT_VECTOR_SIZE,
            purge_budget: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub vectors: u64,
    pub packets: u64,
    pub nanos: u64,
}

impl NodeStats {
    fn record(&mut self, packets: usize, since: Instant) {
        if packets > 0 {
            self.vectors += 1;
            self.packets += packets as u64;
            self.nanos += since.elapsed().as_nanos() as u64;
        }
    }

    fn add(&mut self, o: &NodeStats) {
        self.vectors += o.vectors;
        self.packets += o.packets;
        self.nanos += o.nanos;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Tally {
    invalid: u64,
    rule_drops: u64,
    matched: u64,
    missed: u64,
    modified: u64,
    vectors: u64,
}

impl Tally {
    fn add(&mut self, o: &Tally) {
        self.invalid += o.invalid;
        self.rule_drops += o.rule_drops;
        self.matched += o.matched;
        self.missed += o.missed;
        self.modified += o.modified;
        self.vectors += o.vectors;
    }
}

/// Per-packet state carried from node to node within a vector.
enum Slot {
    Invalid(&'static str),
    Dropped,
    Missed(PacketBuffer),
    Matched {
        pkt: PacketBuffer,
        rules: Vec<RuleId>,
        conn: Option<(ConnEntry, Direction)>,
    },
    Done(Output),
}

struct Worker {
    index: usize,
    count: usize,
    conn: ConnTable,
    nodes: [NodeStats; 5],
    tally: Tally,
    rewrite: RewriteCounters,
    hits: HashMap<RuleId, u64>,
    since_purge: usize,
    matches: RuleMatches,
}

impl Worker {
    /// Runs the nodes after input over one vector.
    fn run_vector(&mut self, snap: &Snapshot, config: &PipelineConfig, slots: &mut [Slot]) {
        self.tally.vectors += 1;
        let t = Instant::now();
        let mut classified = 0;
        for slot in slots.iter_mut() {
            if matches!(slot, Slot::Invalid(_)) {
                continue;
            }
            classified += 1;
            let Slot::Missed(pkt) = std::mem::replace(slot, Slot::Dropped) else {
                unreachable!("input emits packets as missed");
            };
            *slot = self.classify(snap, config, pkt);
        }
        self.nodes[CLASSIFY].record(classified, t);

        let t = Instant::now();
        let mut rewritten = 0;
        for slot in slots.iter_mut() {
            if let Slot::Matched { .. } = slot {
                let Slot::Matched { mut pkt, rules, conn } = std::mem::replace(slot, Slot::Dropped) else {
                    unreachable!()
                };
                let conn = conn.as_ref().map(|(e, d)| (e, *d));
                if rewrite_packet(&mut pkt, &rules, conn, &snap.programs, &mut self.rewrite) {
                    self.tally.modified += 1;
                }
                rewritten += 1;
                *slot = Slot::Done(Output {
                    disposition: Disposition::Rewritten,
                    packet: Some(pkt),
                });
            }
        }
        self.nodes[REWRITE].record(rewritten, t);

        let t = Instant::now();
        let mut dropped = 0;
        for slot in slots.iter_mut() {
            let reason = match slot {
                Slot::Invalid(r) => DropReason::Invalid(r),
                Slot::Dropped => DropReason::Rule,
                _ => continue,
            };
            dropped += 1;
            *slot = Slot::Done(Output {
                disposition: Disposition::Drop(reason),
                packet: None,
            });
        }
        self.nodes[ERROR_DROP].record(dropped, t);

        let t = Instant::now();
        let mut forwarded = 0;
        for slot in slots.iter_mut() {
            match slot {
                Slot::Missed(_) => {
                    let Slot::Missed(pkt) = std::mem::replace(slot, Slot::Dropped) else {
                        unreachable!()
                    };
                    *slot = Slot::Done(Output {
                        disposition: Disposition::Forward,
                        packet: Some(pkt),
                    });
                    forwarded += 1;
                }
                Slot::Done(Output { packet: Some(_), .. }) => forwarded += 1,
                _ => {}
            }
        }
        self.nodes[OUTPUT].record(forwarded, t);
    }

    fn classify(&mut self, snap: &Snapshot, config: &PipelineConfig, pkt: PacketBuffer) -> Slot {
        let now = pkt.timestamp();
        self.since_purge += 1;
        if self.since_purge >= config.purge_interval {
            self.since_purge = 0;
            self.conn.purge(now, config.purge_budget);
        }
        if !snap.enabled {
            self.tally.missed += 1;
            return Slot::Missed(pkt);
        }
        let verdict = classify_into(&pkt, &snap.classifier, &mut self.conn, &mut self.matches);
        let (mut rules, mut hit) = match verdict {
            Verdict::Drop { rules } => {
                self.count_hits(&rules);
                self.tally.rule_drops += 1;
                return Slot::Dropped;
            }
            Verdict::Miss => {
                self.tally.missed += 1;
                return Slot::Missed(pkt);
            }
            Verdict::Match { rules, conn } => (rules, conn),
        };
        self.count_hits(&rules);
        self.tally.matched += 1;

        if hit.is_none() {
            if let Some(owner) = self.matches.stateful.first().copied() {
                let plans = snap.programs.get(&owner).map(|p| p.binding_plans()).unwrap_or_default();
                let (index, count) = (self.index, self.count);
                let accept = |k: &ConnKey| count == 1 || k.steering_hash() % count as u64 == index as u64;
                match self.conn.insert(&pkt, owner, &plans, now, &accept) {
                    Ok(r) => hit = Some(r),
                    // No entry to keep state in: stateful targets are skipped.
                    Err(InsertError::TableFull | InsertError::RangeExhausted(_)) => {
                        let stateful = &self.matches.stateful;
                        rules.retain(|id| !stateful.contains(id));
                    }
                    Err(InsertError::Untracked(_)) => {}
                }
            }
        }
        let conn = hit.and_then(|r| {
            if let Some(flags) = pkt.tcp_flags() {
                let has_payload = pkt.l4_payload_offset().is_some_and(|o| o < pkt.l3_end());
                self.conn.update_state(r, flags, has_payload);
            }
            self.conn.get(r).map(|e| (e.clone(), r.direction))
        });
        Slot::Matched { pkt, rules, conn }
    }

    fn count_hits(&mut self, rules: &[RuleId]) {
        for id in rules {
            *self.hits.entry(*id).or_insert(0) += 1;
        }
    }
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("packet source failed: {message}")]
    Source { message: String, partial: Box<RunReport> },
    #[error("packet sink failed: {message}")]
    Sink { message: String, partial: Box<RunReport> },
}

impl StreamError {
    pub fn partial(&self) -> &RunReport {
        match self {
            StreamError::Source { partial, .. } | StreamError::Sink { partial, .. } => partial,
        }
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    workers: Vec<Worker>,
    input: NodeStats,
    elapsed: Duration,
    clock: Duration,
    /// Trace id for the next input frame; counts from zero per run.
    next_trace: u64,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline").field("config", &self.config).finish()
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        let count = config.workers.max(1);
        let pool = BindingPool::shared();
        let workers = (0..count)
            .map(|index| Worker {
                index,
                count,
                conn: ConnTable::with_pool(
                    ConnConfig {
                        seed: config.conn.seed.wrapping_add(index as u64),
                        ..config.conn
                    },
                    Arc::clone(&pool),
                ),
                nodes: [NodeStats::default(); 5],
                tally: Tally::default(),
                rewrite: RewriteCounters::default(),
                hits: HashMap::new(),
                since_purge: 0,
                matches: RuleMatches::default(),
            })
            .collect();
        Pipeline {
            config: PipelineConfig {
                vector_size: config.vector_size.max(1),
                workers: count,
                purge_interval: config.purge_interval.max(1),
                ..config
            },
            workers,
            input: NodeStats::default(),
            elapsed: Duration::ZERO,
            clock: Duration::ZERO,
            next_trace: 0,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Latest packet timestamp seen.
    pub fn clock(&self) -> Duration {
        self.clock
    }

    pub fn conn_tables(&self) -> impl Iterator<Item = &ConnTable> {
        self.workers.iter().map(|w| &w.conn)
    }

    /// Drops the connections owned by a deleted rule.
    pub fn remove_rule(&mut self, id: RuleId) {
        for w in &mut self.workers {
            w.conn.remove_rule(id);
            w.hits.remove(&id);
        }
    }

    pub fn clear(&mut self) {
        for w in &mut self.workers {
            w.conn.clear();
            w.hits.clear();
        }
    }

    pub fn hits(&self, id: RuleId) -> u64 {
        self.workers.iter().filter_map(|w| w.hits.get(&id)).sum()
    }

    /// Clears node timings and packet counters; connections and rule hit
    /// counters are kept.
    pub fn reset_stats(&mut self) {
        self.input = NodeStats::default();
        self.elapsed = Duration::ZERO;
        self.next_trace = 0;
        for w in &mut self.workers {
            w.nodes = [NodeStats::default(); 5];
            w.tally = Tally::default();
            w.rewrite = RewriteCounters::default();
        }
    }

    /// Pushes frames through the graph against one snapshot and returns one
    /// output per frame, in input order.
    pub fn process(&mut self, snap: &Snapshot, frames: Vec<Frame>) -> Vec<Output> {
        let started = Instant::now();
        let n = frames.len();
        let t = Instant::now();
        let mut parsed: Vec<Slot> = Vec::with_capacity(n);
        for f in frames {
            self.clock = self.clock.max(f.timestamp);
            let trace = self.next_trace;
            self.next_trace += 1;
            parsed.push(match PacketBuffer::parse(f.data, f.link) {
                Ok(p) => Slot::Missed(p.with_timestamp(f.timestamp).with_trace_id(trace)),
                Err(e) => Slot::Invalid(e.reason()),
            });
        }
        self.input.record(n, t);
        for s in &parsed {
            if matches!(s, Slot::Invalid(_)) {
                self.workers[0].tally.invalid += 1;
            }
        }

        let v = self.config.vector_size;
        let config = self.config;
        let outputs = if self.workers.len() == 1 {
            let w = &mut self.workers[0];
            for chunk in parsed.chunks_mut(v) {
                w.run_vector(snap, &config, chunk);
            }
            parsed
        } else {
            let count = self.workers.len();
            let mut lanes: Vec<Vec<(usize, Slot)>> = (0..count).map(|_| Vec::new()).collect();
            for (i, s) in parsed.into_iter().enumerate() {
                let lane = match &s {
                    Slot::Missed(p) => (ConnKey::from_tuple(&p.five_tuple()).steering_hash() % count as u64) as usize,
                    _ => 0,
                };
                lanes[lane].push((i, s));
            }
            let done: Mutex<Vec<Option<Slot>>> = Mutex::new((0..n).map(|_| None).collect());
            thread::scope(|scope| {
                for (w, lane) in self.workers.iter_mut().zip(lanes) {
                    let done = &done;
                    scope.spawn(move || {
                        let (idx, mut slots): (Vec<usize>, Vec<Slot>) = lane.into_iter().unzip();
                        for chunk in slots.chunks_mut(v) {
                            w.run_vector(snap, &config, chunk);
                        }
                        let mut done = done.lock().expect("merge lock poisoned");
                        for (i, s) in idx.into_iter().zip(slots) {
                            done[i] = Some(s);
                        }
                    });
                }
            });
            done.into_inner()
                .expect("merge lock poisoned")
                .into_iter()
                .map(|s| s.expect("every packet processed"))
                .collect()
        };
        self.elapsed += started.elapsed();
        outputs
            .into_iter()
            .map(|s| match s {
                Slot::Done(o) => o,
                _ => unreachable!("every slot reaches a terminal node"),
            })
            .collect()
    }

    /// Drains `source` in batches of `vector_size × workers` frames, loading
    /// the snapshot once per batch, and hands forwarded packets to `sink` in
    /// input order. Statistics cover this run only.
    pub fn run_stream<I, E, S, F>(
        &mut self,
        cell: &SnapshotCell,
        source: I,
        mut sink: S,
    ) -> Result<RunReport, StreamError>
    where
        I: IntoIterator<Item = Result<Frame, E>>,
        E: std::fmt::Display,
        S: FnMut(&PacketBuffer) -> Result<(), F>,
        F: std::fmt::Display,
    {
        self.reset_stats();
        let batch = self.config.vector_size * self.workers.len();
        let mut source = source.into_iter();
        loop {
            let mut frames = Vec::with_capacity(batch);
            let mut failure = None;
            for item in source.by_ref().take(batch) {
                match item {
                    Ok(f) => frames.push(f),
                    Err(e) => {
                        failure = Some(e.to_string());
                        break;
                    }
                }
            }
            let last = frames.len() < batch;
            if !frames.is_empty() {
                let snap = cell.load();
                for out in self.process(&snap, frames) {
                    if let Some(pkt) = &out.packet {
                        if let Err(e) = sink(pkt) {
                            return Err(StreamError::Sink {
                                message: e.to_string(),
                                partial: Box::new(self.report()),
                            });
                        }
                    }
                }
            }
            if let Some(message) = failure {
                return Err(StreamError::Source {
                    message,
                    partial: Box::new(self.report()),
                });
            }
            if last {
                return Ok(self.report());
            }
        }
    }

    pub fn report(&self) -> RunReport {
        let mut nodes = [NodeStats::default(); 5];
        nodes[INPUT] = self.input;
        let mut tally = Tally::default();
        let mut rewrite = RewriteCounters::default();
        let mut conn = ConnCounters::default();
        let mut hits: BTreeMap<u64, u64> = BTreeMap::new();
        let mut connections = 0;
        for w in &self.workers {
            for (acc, s) in nodes.iter_mut().zip(&w.nodes).skip(1) {
                acc.add(s);
            }
            tally.add(&w.tally);
            rewrite.add(&w.rewrite);
            conn.add(&w.conn.counters());
            connections += w.conn.len();
            for (id, n) in &w.hits {
                *hits.entry(id.0).or_insert(0) += n;
            }
        }
        RunReport::build(
            &nodes,
            report::Totals {
                invalid: tally.invalid,
                rule_drops: tally.rule_drops,
                matched: tally.matched,
                missed: tally.missed,
                modified: tally.modified,
                vectors: tally.vectors,
                elapsed: self.elapsed,
                rewrite,
                conn,
                connections,
                rule_hits: hits,
            },
        )
    }
}

#[cfg(test)]
mod tests;
