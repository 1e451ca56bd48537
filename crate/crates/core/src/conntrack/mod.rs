// SPDX-License-Identifier: Apache-2.0

//! Bidirectional connection table.
//!
//! Entries are keyed by the normalized 5-tuple, so both directions of a
//! flow find the same entry. A flow whose addresses or ports are rewritten
//! is also registered under the rewritten tuple, so replies addressed to
//! the translated endpoint find it too. Expiry is lazy: an idle entry is
//! dropped when a lookup touches it or when the budgeted sweep reaches it.

mod state;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::packet::{FieldDescriptor, FiveTuple, PacketBuffer, IPPROTO_TCP, IPPROTO_UDP};
use crate::rules::RuleId;

pub use state::{next_tcp_state, TcpState, TcpTrack};

/// Normalized 5-tuple: the smaller (address, port) endpoint comes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConnKey {
    pub lo: (Ipv4Addr, u16),
    pub hi: (Ipv4Addr, u16),
    pub proto: u8,
}

impl ConnKey {
    pub fn from_tuple(t: &FiveTuple) -> ConnKey {
        let a = (t.src_addr, t.src_port);
        let b = (t.dst_addr, t.dst_port);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        ConnKey { lo, hi, proto: t.proto }
    }

    /// Stable hash used for worker steering.
    pub fn steering_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h = (h ^ v).wrapping_mul(0x0000_0100_0000_01b3);
            h ^= h >> 31;
        };
        mix(u64::from(u32::from(self.lo.0)));
        mix(u64::from(self.lo.1));
        mix(u64::from(u32::from(self.hi.0)));
        mix(u64::from(self.hi.1));
        mix(u64::from(self.proto));
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum Direction {
    /// Same direction as the packet that created the entry.
    Forward,
    Reverse,
}

impl Direction {
    pub fn index(self) -> usize {
        match self {
            Direction::Forward => 0,
            Direction::Reverse => 1,
        }
    }

    pub fn flip(self) -> Direction {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConnState {
    Tcp(TcpState),
    /// UDP entries only time out.
    Active,
}

impl fmt::Display for ConnState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConnState::Tcp(s) => s.fmt(f),
            ConnState::Active => f.write_str("ACTIVE"),
        }
    }
}

/// A per-connection value for one field: written as `rewritten` on forward
/// packets; on reverse packets the mirrored field gets `original` back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DynamicBinding {
    pub field: FieldDescriptor,
    pub original: u64,
    pub rewritten: u64,
    /// The value came from a shuffle rather than a fixed `mod`.
    pub shuffled: bool,
}

/// How a stateful rule wants a field bound when a connection is created.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindingPlan {
    Fixed { field: FieldDescriptor, value: u64 },
    Shuffle { field: FieldDescriptor, lo: u64, hi: u64 },
}

impl BindingPlan {
    pub fn field(&self) -> FieldDescriptor {
        match self {
            BindingPlan::Fixed { field, .. } | BindingPlan::Shuffle { field, .. } => *field,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnEntry {
    pub key: ConnKey,
    /// Tuple of the creating packet before any rewrite.
    pub original: FiveTuple,
    /// `original` with the forward bindings applied.
    pub translated: FiveTuple,
    pub state: ConnState,
    pub tcp: TcpTrack,
    pub created: Duration,
    pub last_seen: Duration,
    pub rule_id: RuleId,
    pub bindings: Vec<DynamicBinding>,
    pub packets: [u64; 2],
    pub bytes: [u64; 2],
}

impl ConnEntry {
    pub fn binding(&self, field: &FieldDescriptor) -> Option<&DynamicBinding> {
        self.bindings.iter().find(|b| b.field == *field)
    }
}

/// Handle to a live entry plus the direction the packet travels in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnRef {
    pub slot: u32,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeouts {
    pub tcp_new: Duration,
    pub tcp_established: Duration,
    pub tcp_closing: Duration,
    pub udp: Duration,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            tcp_new: Duration::from_secs(30),
            tcp_established: Duration::from_secs(240),
            tcp_closing: Duration::from_secs(15),
            udp: Duration::from_secs(60),
        }
    }
}

impl Timeouts {
    pub fn for_state(&self, s: ConnState) -> Duration {
        match s {
            ConnState::Tcp(TcpState::New) => self.tcp_new,
            ConnState::Tcp(TcpState::Established) => self.tcp_established,
            ConnState::Tcp(TcpState::FinWait | TcpState::Closed) => self.tcp_closing,
            ConnState::Active => self.udp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnConfig {
    pub capacity: usize,
    pub timeouts: Timeouts,
    /// Default shuffle range for fields of 16 bits or more.
    pub shuffle_range: (u64, u64),
    pub seed: u64,
}

impl Default for ConnConfig {
    fn default() -> Self {
        ConnConfig {
            capacity: 1 << 20,
            timeouts: Timeouts::default(),
            shuffle_range: (1024, 65535),
            seed: 0,
        }
    }
}

/// Shuffle values in use, shared by every shard so that no two live flows
/// of one rule get the same value for one field.
#[derive(Debug, Default)]
pub struct BindingPool {
    used: HashSet<(RuleId, &'static str, u64)>,
}

impl BindingPool {
    pub fn shared() -> Arc<Mutex<BindingPool>> {
        Arc::new(Mutex::new(BindingPool::default()))
    }

    pub fn in_use(&self) -> usize {
        self.used.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InsertError {
    #[error("connection table full")]
    TableFull,
    #[error("no free value for {0} in the configured range")]
    RangeExhausted(&'static str),
    #[error("protocol {0} is not tracked")]
    Untracked(u8),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct ConnCounters {
    pub inserted: u64,
    pub expired: u64,
    pub table_full: u64,
    pub range_exhausted: u64,
}

impl ConnCounters {
    pub fn add(&mut self, o: &ConnCounters) {
        self.inserted += o.inserted;
        self.expired += o.expired;
        self.table_full += o.table_full;
        self.range_exhausted += o.range_exhausted;
    }
}

pub struct ConnTable {
    config: ConnConfig,
    slots: Vec<Option<ConnEntry>>,
    free: Vec<u32>,
    map: HashMap<ConnKey, u32>,
    live: usize,
    cursor: usize,
    rng: ChaCha8Rng,
    pool: Arc<Mutex<BindingPool>>,
    counters: ConnCounters,
}

impl fmt::Debug for ConnTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConnTable").field("live", &self.live).finish()
    }
}

fn tracked(proto: u8) -> bool {
    proto == IPPROTO_TCP || proto == IPPROTO_UDP
}

fn expired(e: &ConnEntry, now: Duration, t: &Timeouts) -> bool {
    now.saturating_sub(e.last_seen) > t.for_state(e.state)
}

fn set_tuple_field(t: &mut FiveTuple, field: &FieldDescriptor, v: u64) {
    match field.name {
        "ip-saddr" => t.src_addr = Ipv4Addr::from(v as u32),
        "ip-daddr" => t.dst_addr = Ipv4Addr::from(v as u32),
        "tcp-sport" | "udp-sport" => t.src_port = v as u16,
        "tcp-dport" | "udp-dport" => t.dst_port = v as u16,
        _ => {}
    }
}

fn tuple_field(t: &FiveTuple, field: &FieldDescriptor) -> Option<u64> {
    Some(match field.name {
        "ip-saddr" => u64::from(u32::from(t.src_addr)),
        "ip-daddr" => u64::from(u32::from(t.dst_addr)),
        "tcp-sport" | "udp-sport" => u64::from(t.src_port),
        "tcp-dport" | "udp-dport" => u64::from(t.dst_port),
        _ => return None,
    })
}

/// Range a shuffle over `field` draws from: the configured range clipped to
/// the field width, or the whole field when it is narrower than 16 bits.
pub fn shuffle_bounds(field: &FieldDescriptor, lo: u64, hi: u64) -> (u64, u64) {
    let width = field.width_bits().unwrap_or(64);
    let max = if width >= 64 { u64::MAX } else { (1u64 << width) - 1 };
    if width < 16 {
        (0, max)
    } else {
        (lo.min(max), hi.min(max))
    }
}

impl ConnTable {
    pub fn new(config: ConnConfig) -> Self {
        Self::with_pool(config, BindingPool::shared())
    }

    pub fn with_pool(config: ConnConfig, pool: Arc<Mutex<BindingPool>>) -> Self {
        ConnTable {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            slots: Vec::new(),
            free: Vec::new(),
            map: HashMap::new(),
            live: 0,
            cursor: 0,
            pool,
            counters: ConnCounters::default(),
        }
    }

    pub fn config(&self) -> &ConnConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn counters(&self) -> ConnCounters {
        self.counters
    }

    pub fn get(&self, r: ConnRef) -> Option<&ConnEntry> {
        self.slots.get(r.slot as usize)?.as_ref()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ConnEntry> {
        self.slots.iter().flatten()
    }

    fn direction(e: &ConnEntry, t: &FiveTuple) -> Direction {
        if *t == e.original || *t == e.translated {
            Direction::Forward
        } else {
            Direction::Reverse
        }
    }

    fn find(&self, pkt: &PacketBuffer) -> Option<(u32, FiveTuple)> {
        if !tracked(pkt.ip_proto()) || pkt.is_fragment() {
            return None;
        }
        let t = pkt.five_tuple();
        self.map.get(&ConnKey::from_tuple(&t)).map(|s| (*s, t))
    }

    /// Finds the packet's connection, expiring it first if it has been idle
    /// too long. A hit refreshes `last_seen` and the per-direction
    /// counters; TCP state is left to [`update_state`](Self::update_state).
    pub fn lookup(&mut self, pkt: &PacketBuffer, now: Duration) -> Option<ConnRef> {
        let (slot, t) = self.find(pkt)?;
        let e = self.slots[slot as usize].as_ref().expect("mapped slot is live");
        if expired(e, now, &self.config.timeouts) {
            self.remove_slot(slot);
            self.counters.expired += 1;
            return None;
        }
        let e = self.slots[slot as usize].as_mut().expect("mapped slot is live");
        let direction = Self::direction(e, &t);
        e.last_seen = e.last_seen.max(now);
        e.packets[direction.index()] += 1;
        e.bytes[direction.index()] += (pkt.l3_end() - pkt.l3_offset()) as u64;
        Some(ConnRef { slot, direction })
    }

    /// Creates an entry for the packet's flow owned by `rule`. Returns the
    /// existing entry if the flow is already tracked. `accept` vets the key
    /// replies will arrive on; sharded tables use it to keep both keys in
    /// one shard.
    pub fn insert(
        &mut self,
        pkt: &PacketBuffer,
        rule: RuleId,
        plans: &[BindingPlan],
        now: Duration,
        accept: &dyn Fn(&ConnKey) -> bool,
    ) -> Result<ConnRef, InsertError> {
        if let Some(hit) = self.lookup(pkt, now) {
            return Ok(hit);
        }
        let proto = pkt.ip_proto();
        if !tracked(proto) || pkt.is_fragment() {
            return Err(InsertError::Untracked(proto));
        }
        if self.live >= self.config.capacity {
            self.counters.table_full += 1;
            return Err(InsertError::TableFull);
        }
        let original = pkt.five_tuple();
        let key = ConnKey::from_tuple(&original);
        let mut translated = original;
        let mut bindings = Vec::with_capacity(plans.len());
        for plan in plans {
            if let BindingPlan::Fixed { field, value } = plan {
                if let Some(orig) = tuple_field(&original, field) {
                    set_tuple_field(&mut translated, field, *value);
                    bindings.push(DynamicBinding {
                        field: *field,
                        original: orig,
                        rewritten: *value,
                        shuffled: false,
                    });
                }
            }
        }
        let mut pool = self.pool.lock().expect("binding pool poisoned");
        let mut taken: Vec<(RuleId, &'static str, u64)> = Vec::new();
        for plan in plans {
            let BindingPlan::Shuffle { field, lo, hi } = plan else {
                continue;
            };
            let (lo, hi) = shuffle_bounds(field, *lo, *hi);
            let orig = tuple_field(&original, field)
                .or_else(|| {
                    crate::packet::read_field(pkt, field)
                        .ok()
                        .flatten()
                        .and_then(|v| match v {
                            crate::packet::FieldValue::Int(i) => Some(i),
                            _ => None,
                        })
                })
                .unwrap_or(0);
            let span = hi - lo + 1;
            let start = lo + self.rng.gen_range(0..span);
            let mut chosen = None;
            for step in 0..span.min(1 << 20) {
                let v = lo + (start - lo + step) % span;
                if pool.used.contains(&(rule, field.name, v)) {
                    continue;
                }
                let mut candidate = translated;
                set_tuple_field(&mut candidate, field, v);
                let reply_key = ConnKey::from_tuple(&candidate);
                if reply_key != key && (self.map.contains_key(&reply_key) || !accept(&reply_key)) {
                    continue;
                }
                chosen = Some(v);
                break;
            }
            let Some(v) = chosen else {
                for t in taken {
                    pool.used.remove(&t);
                }
                self.counters.range_exhausted += 1;
                return Err(InsertError::RangeExhausted(field.name));
            };
            pool.used.insert((rule, field.name, v));
            taken.push((rule, field.name, v));
            set_tuple_field(&mut translated, field, v);
            bindings.push(DynamicBinding {
                field: *field,
                original: orig,
                rewritten: v,
                shuffled: true,
            });
        }
        drop(pool);
        let reply_key = ConnKey::from_tuple(&translated);
        if reply_key != key && self.map.contains_key(&reply_key) {
            // A fixed rewrite collides with a live flow; nothing to pick.
            self.release(rule, &bindings);
            self.counters.range_exhausted += 1;
            return Err(InsertError::RangeExhausted("tuple"));
        }

        let state = if proto == IPPROTO_TCP {
            ConnState::Tcp(TcpState::New)
        } else {
            ConnState::Active
        };
        let entry = ConnEntry {
            key,
            original,
            translated,
            state,
            tcp: TcpTrack::default(),
            created: now,
            last_seen: now,
            rule_id: rule,
            bindings,
            packets: [1, 0],
            bytes: [(pkt.l3_end() - pkt.l3_offset()) as u64, 0],
        };
        let slot = match self.free.pop() {
            Some(s) => {
                self.slots[s as usize] = Some(entry);
                s
            }
            None => {
                self.slots.push(Some(entry));
                (self.slots.len() - 1) as u32
            }
        };
        self.map.insert(key, slot);
        if reply_key != key {
            self.map.insert(reply_key, slot);
        }
        self.live += 1;
        self.counters.inserted += 1;
        Ok(ConnRef {
            slot,
            direction: Direction::Forward,
        })
    }

    fn release(&self, rule: RuleId, bindings: &[DynamicBinding]) {
        let mut pool = self.pool.lock().expect("binding pool poisoned");
        for b in bindings.iter().filter(|b| b.shuffled) {
            pool.used.remove(&(rule, b.field.name, b.rewritten));
        }
    }

    fn remove_slot(&mut self, slot: u32) {
        if let Some(e) = self.slots[slot as usize].take() {
            self.map.remove(&e.key);
            self.map.remove(&ConnKey::from_tuple(&e.translated));
            self.release(e.rule_id, &e.bindings);
            self.free.push(slot);
            self.live -= 1;
        }
    }

    /// Advances TCP state for a packet of a tracked flow.
    pub fn update_state(&mut self, r: ConnRef, flags: u8, has_payload: bool) {
        if let Some(e) = self.slots.get_mut(r.slot as usize).and_then(Option::as_mut) {
            if let ConnState::Tcp(s) = e.state {
                e.state = ConnState::Tcp(next_tcp_state(s, &mut e.tcp, flags, r.direction, has_payload));
            }
        }
    }

    /// Scans at most `budget` slots from where the previous call stopped
    /// and removes the expired entries among them.
    pub fn purge(&mut self, now: Duration, budget: usize) -> usize {
        if self.slots.is_empty() {
            return 0;
        }
        let mut removed = 0;
        for _ in 0..budget.min(self.slots.len()) {
            if self.cursor >= self.slots.len() {
                self.cursor = 0;
            }
            let slot = self.cursor;
            self.cursor += 1;
            let stale = self.slots[slot]
                .as_ref()
                .is_some_and(|e| expired(e, now, &self.config.timeouts));
            if stale {
                self.remove_slot(slot as u32);
                removed += 1;
            }
        }
        self.counters.expired += removed as u64;
        removed
    }

    /// Removes every entry owned by `rule`, releasing its bindings.
    pub fn remove_rule(&mut self, rule: RuleId) -> usize {
        let owned: Vec<u32> = (0..self.slots.len() as u32)
            .filter(|i| self.slots[*i as usize].as_ref().is_some_and(|e| e.rule_id == rule))
            .collect();
        for slot in &owned {
            self.remove_slot(*slot);
        }
        owned.len()
    }

    pub fn clear(&mut self) -> usize {
        let live: Vec<u32> = (0..self.slots.len() as u32)
            .filter(|i| self.slots[*i as usize].is_some())
            .collect();
        for slot in &live {
            self.remove_slot(*slot);
        }
        live.len()
    }

    /// One line per entry for `list connections`.
    pub fn describe(&self, now: Duration) -> Vec<String> {
        let mut lines: Vec<(ConnKey, String)> = self
            .entries()
            .map(|e| {
                let nat = if e.translated != e.original {
                    format!(" as {}:{}", e.translated.src_addr, e.translated.src_port)
                } else {
                    String::new()
                };
                let proto = if e.key.proto == IPPROTO_TCP { "tcp" } else { "udp" };
                (
                    e.key,
                    format!(
                        "{proto} {}:{} -> {}:{}{nat} {} age {:.3}s rule {} pkts {}/{} bytes {}/{}",
                        e.original.src_addr,
                        e.original.src_port,
                        e.original.dst_addr,
                        e.original.dst_port,
                        e.state,
                        now.saturating_sub(e.created).as_secs_f64(),
                        e.rule_id,
                        e.packets[0],
                        e.packets[1],
                        e.bytes[0],
                        e.bytes[1],
                    ),
                )
            })
            .collect();
        lines.sort();
        lines.into_iter().map(|(_, l)| l).collect()
    }
}

#[cfg(test)]
mod tests;
