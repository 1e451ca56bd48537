// SPDX-License-Identifier: Apache-2.0

//! Rule classification.
//!
//! Fast-path conditions of a rule (equality and presence on fixed header
//! fields and TCP flags) are folded into a mask and a key over the first 80
//! bytes of the packet, anchored at the IPv4 header. Rules sharing a mask
//! share a table; a packet is matched against a table by AND-ing its bytes
//! with the mask and looking the result up by hash. Whatever a rule needs
//! beyond that (ordering conditions, negations, option and payload tests)
//! is kept as a residue and evaluated only for packets that hit the table.
//! Rules with nothing to fold are evaluated in full for every packet.

mod eval;
mod table;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::conntrack::{ConnRef, ConnTable};
use crate::packet::{L4Proto, Locator, PacketBuffer, CLASSIFY_SPAN, IPV4_MIN_HEADER_LEN};
use crate::rules::{prefix_mask, Cond, MatchExpr, Rule, RuleId, Value};

pub use eval::{evaluate_match, evaluate_residue, match_options, PacketContext};
pub use table::hash_words;
use table::KeyIndex;

pub const CHUNK_LEN: usize = 16;
pub const MAX_CHUNKS: usize = CLASSIFY_SPAN / CHUNK_LEN;

type Words = [u128; MAX_CHUNKS];

/// Loads the 80-byte classification view as five 128-bit words.
pub fn load_words(view: &[u8; CLASSIFY_SPAN]) -> Words {
    let mut w = [0u128; MAX_CHUNKS];
    for (i, word) in w.iter_mut().enumerate() {
        let mut chunk = [0u8; CHUNK_LEN];
        chunk.copy_from_slice(&view[i * CHUNK_LEN..(i + 1) * CHUNK_LEN]);
        *word = u128::from_be_bytes(chunk);
    }
    w
}

fn store_words(words: &Words) -> [u8; CLASSIFY_SPAN] {
    let mut out = [0u8; CLASSIFY_SPAN];
    for (i, w) in words.iter().enumerate() {
        out[i * CHUNK_LEN..(i + 1) * CHUNK_LEN].copy_from_slice(&w.to_be_bytes());
    }
    out
}

/// Mask and key over the normalized 80-byte layout. Only chunks
/// `skip..skip + chunks` are active; the others are zero in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MaskKey {
    pub mask: Words,
    pub key: Words,
    pub skip: u8,
    pub chunks: u8,
}

impl MaskKey {
    /// Builds a mask/key pair from byte arrays. Returns `None` for an
    /// all-zero mask. Key bits outside the mask are discarded.
    pub fn from_bytes(mask: &[u8; CLASSIFY_SPAN], key: &[u8; CLASSIFY_SPAN]) -> Option<MaskKey> {
        let mask = load_words(mask);
        let mut key = load_words(key);
        for (k, m) in key.iter_mut().zip(&mask) {
            *k &= *m;
        }
        let first = mask.iter().position(|w| *w != 0)?;
        let last = mask.iter().rposition(|w| *w != 0)?;
        Some(MaskKey {
            mask,
            key,
            skip: first as u8,
            chunks: (last - first + 1) as u8,
        })
    }

    pub fn mask_bytes(&self) -> [u8; CLASSIFY_SPAN] {
        store_words(&self.mask)
    }

    pub fn key_bytes(&self) -> [u8; CLASSIFY_SPAN] {
        store_words(&self.key)
    }

    fn active(&self) -> std::ops::Range<usize> {
        usize::from(self.skip)..usize::from(self.skip + self.chunks)
    }

    /// True when the mask covers bytes of the transport header.
    pub fn touches_l4(&self) -> bool {
        self.mask_bytes()[IPV4_MIN_HEADER_LEN..].iter().any(|b| *b != 0)
    }
}

/// The chunked matching loop: accumulates `(packet & mask) ^ key` over the
/// active chunks and succeeds when the accumulator is zero.
#[inline]
pub fn match_words(pkt: &Words, mk: &MaskKey) -> bool {
    match_parts(pkt, &mk.mask, &mk.key, mk.active())
}

#[inline]
fn match_parts(pkt: &Words, mask: &Words, key: &Words, active: std::ops::Range<usize>) -> bool {
    let mut res = 0u128;
    for i in active {
        res |= (pkt[i] & mask[i]) ^ key[i];
    }
    res == 0
}

/// Matches a packet's normalized header bytes against a mask/key pair.
/// Bytes past the end of the datagram read as zero.
pub fn match_chunks(pkt: &PacketBuffer, mk: &MaskKey) -> bool {
    let mut view = [0u8; CLASSIFY_SPAN];
    pkt.classify_view(&mut view);
    match_words(&load_words(&view), mk)
}

/// Output of [`compile_rule`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledMatch {
    /// `None` when the rule has nothing the tables can check, or when its
    /// folded conditions contradict each other; such a rule is evaluated in
    /// full per packet.
    pub mask_key: Option<MaskKey>,
    /// Transport protocol the folded fields belong to, if any.
    pub l4: Option<L4Proto>,
    /// Non-option conditions left for per-packet evaluation.
    pub residue: Vec<MatchExpr>,
    /// TCP option conditions left for per-packet evaluation.
    pub option_residue: Vec<MatchExpr>,
}

/// Mask and key contribution of a foldable expression over the normalized
/// layout, or `None` if the expression is not foldable.
fn fold_expr(e: &MatchExpr) -> Option<(usize, Vec<u8>, Vec<u8>)> {
    if !e.is_maskable() {
        return None;
    }
    let offset = e.field.normalized_offset()?;
    match (e.field.locator, e.cond, &e.value) {
        (Locator::TcpFlag(_), Cond::Present, _) => {
            let m = e.field.bit_mask()?;
            Some((offset, m.clone(), m))
        }
        (_, Cond::Eq, Some(value)) => {
            let v = value.as_int()?;
            let (mask, key) = match value {
                Value::Addr { prefix: Some(len), .. } => {
                    let m = u64::from(prefix_mask(*len));
                    (e.field.encode(m)?, e.field.encode(v & m)?)
                }
                _ => (e.field.bit_mask()?, e.field.encode(v)?),
            };
            Some((offset, mask, key))
        }
        // Presence of a fixed field only says which protocol the packet
        // carries; that is checked as a residue.
        _ => None,
    }
}

/// Splits a rule's matches into a mask/key pair and residues.
pub fn compile_rule(rule: &Rule) -> CompiledMatch {
    let mut mask = [0u8; CLASSIFY_SPAN];
    let mut key = [0u8; CLASSIFY_SPAN];
    let mut l4: Option<L4Proto> = None;
    let mut conflict = false;
    let mut residue = Vec::new();
    let mut option_residue = Vec::new();
    for e in &rule.def.matches {
        match fold_expr(e) {
            Some((offset, m, k)) => {
                if let Some(p) = e.field.proto {
                    conflict |= l4.is_some_and(|q| q != p);
                    l4 = Some(p);
                }
                for (i, (mb, kb)) in m.iter().zip(&k).enumerate() {
                    let overlap = mask[offset + i] & mb;
                    conflict |= (key[offset + i] & overlap) != (kb & overlap);
                    mask[offset + i] |= mb;
                    key[offset + i] |= kb;
                }
            }
            None if e.is_option() => option_residue.push(e.clone()),
            None => residue.push(e.clone()),
        }
    }
    let mask_key = if conflict {
        None
    } else {
        MaskKey::from_bytes(&mask, &key)
    };
    if mask_key.is_none() {
        return CompiledMatch {
            mask_key: None,
            l4: None,
            residue: rule.def.matches.iter().filter(|e| !e.is_option()).cloned().collect(),
            option_residue: rule.def.matches.iter().filter(|e| e.is_option()).cloned().collect(),
        };
    }
    CompiledMatch {
        mask_key,
        l4,
        residue,
        option_residue,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerdictHint {
    Drop,
    Rewrite,
    Stateful,
}

/// One rule referenced from a table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryRule {
    pub id: RuleId,
    pub drop: bool,
    pub stateful: bool,
    /// The rule has conditions beyond the mask.
    pub residue: bool,
}

/// The rules sharing one key in one table, in ascending id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionEntry {
    pub rules: Vec<EntryRule>,
    pub needs_complex: bool,
    pub needs_opts: bool,
    pub verdict_hint: VerdictHint,
}

impl SessionEntry {
    pub fn rule_ids(&self) -> impl Iterator<Item = RuleId> + '_ {
        self.rules.iter().map(|r| r.id)
    }

    fn refresh(&mut self, residues: &HashMap<RuleId, Arc<Residue>>) {
        self.needs_complex = false;
        self.needs_opts = false;
        for r in &self.rules {
            if let Some(res) = residues.get(&r.id) {
                self.needs_complex |= !res.complex.is_empty();
                self.needs_opts |= !res.options.is_empty();
            }
        }
        self.verdict_hint = if self.rules.iter().any(|r| r.drop) {
            VerdictHint::Drop
        } else if self.rules.iter().any(|r| r.stateful) {
            VerdictHint::Stateful
        } else {
            VerdictHint::Rewrite
        };
    }
}

/// Conditions of a table rule that the mask does not cover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Residue {
    pub complex: Vec<MatchExpr>,
    pub options: Vec<MatchExpr>,
}

fn guard_code(p: Option<L4Proto>) -> u8 {
    match p {
        None => 0,
        Some(L4Proto::Tcp) => 1,
        Some(L4Proto::Udp) => 2,
        Some(L4Proto::Icmp) => 3,
        Some(L4Proto::Other) => 4,
    }
}

#[derive(Debug, Clone)]
struct TableEntry {
    key: Words,
    guard: u8,
    hash: u64,
    session: SessionEntry,
}

/// All fast-path rules with one mask. When the mask covers transport
/// header bytes, each entry also records the transport protocol its fields
/// belong to, so that `tcp-dport 80` never matches a UDP packet.
#[derive(Debug, Clone)]
pub struct ClassifierTable {
    shape: MaskKey,
    l4: bool,
    entries: Vec<TableEntry>,
    index: KeyIndex,
}

impl ClassifierTable {
    fn new(mask: &MaskKey) -> Self {
        ClassifierTable {
            shape: MaskKey {
                key: [0; MAX_CHUNKS],
                ..*mask
            },
            l4: mask.touches_l4(),
            entries: Vec::new(),
            index: KeyIndex::default(),
        }
    }

    /// The table's mask; the key part is zero.
    pub fn shape(&self) -> &MaskKey {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn hash_key(&self, key: &Words, guard: u8) -> u64 {
        hash_words(&key[self.shape.active()], guard)
    }

    fn find(&self, key: &Words, guard: u8) -> Option<usize> {
        let hash = self.hash_key(key, guard);
        self.index.find(hash, |i| {
            let e = &self.entries[i];
            e.guard == guard && e.key == *key
        })
    }

    /// Probes with a packet's words. Every candidate is verified with the
    /// chunked matching loop before it is returned.
    #[inline]
    pub fn lookup(&self, pkt: &Words, proto: L4Proto) -> Option<&SessionEntry> {
        let guard = if self.l4 { guard_code(Some(proto)) } else { 0 };
        let mut masked = [0u128; MAX_CHUNKS];
        for i in self.shape.active() {
            masked[i] = pkt[i] & self.shape.mask[i];
        }
        let hash = self.hash_key(&masked, guard);
        let idx = self.index.find(hash, |i| {
            let e = &self.entries[i];
            e.guard == guard && match_parts(pkt, &self.shape.mask, &e.key, self.shape.active())
        })?;
        Some(&self.entries[idx].session)
    }

    pub fn sessions(&self) -> impl Iterator<Item = (&Words, &SessionEntry)> {
        self.entries.iter().map(|e| (&e.key, &e.session))
    }
}

#[derive(Debug, Clone)]
struct SlowRule {
    id: RuleId,
    drop: bool,
    stateful: bool,
    matches: Arc<Vec<MatchExpr>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Placement {
    Table { mask: Words, key: Words, guard: u8 },
    Slow,
}

/// Summary line for `list tables`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableStats {
    pub mask: [u8; CLASSIFY_SPAN],
    pub skip: u8,
    pub chunks: u8,
    pub keys: usize,
    pub rules: usize,
    pub slots: usize,
}

impl fmt::Display for TableStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let start = usize::from(self.skip) * CHUNK_LEN;
        let end = start + usize::from(self.chunks) * CHUNK_LEN;
        write!(
            f,
            "skip {} chunks {} keys {} rules {} slots {} mask ",
            self.skip, self.chunks, self.keys, self.rules, self.slots
        )?;
        for b in &self.mask[start..end] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Matching rules for one packet, before the connection table is
/// consulted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleMatches {
    /// Ascending.
    pub ids: Vec<RuleId>,
    pub drop: bool,
    pub stateful: Vec<RuleId>,
    pub tables_probed: usize,
    pub malformed_options: bool,
}

impl RuleMatches {
    pub fn clear(&mut self) {
        self.ids.clear();
        self.drop = false;
        self.stateful.clear();
        self.tables_probed = 0;
        self.malformed_options = false;
    }

    fn push(&mut self, id: RuleId, drop: bool, stateful: bool) {
        self.ids.push(id);
        self.drop |= drop;
        if stateful {
            self.stateful.push(id);
        }
    }
}

/// The compiled rule set: mask tables in creation order plus the rules
/// evaluated in full per packet.
#[derive(Debug, Clone, Default)]
pub struct Classifier {
    tables: Vec<ClassifierTable>,
    by_mask: HashMap<Words, usize>,
    slow: Vec<SlowRule>,
    residues: HashMap<RuleId, Arc<Residue>>,
    placement: HashMap<RuleId, Placement>,
}

impl Classifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tables(&self) -> &[ClassifierTable] {
        &self.tables
    }

    pub fn table_count(&self) -> usize {
        self.tables.len()
    }

    pub fn slow_rule_count(&self) -> usize {
        self.slow.len()
    }

    pub fn rule_count(&self) -> usize {
        self.placement.len()
    }

    pub fn contains(&self, id: RuleId) -> bool {
        self.placement.contains_key(&id)
    }

    /// Adds a rule. Rules must be inserted in ascending id order for
    /// entries to stay sorted; the rule store guarantees this.
    pub fn insert(&mut self, rule: &Rule) {
        let compiled = compile_rule(rule);
        let drop = rule.is_drop();
        let stateful = rule.def.stateful;
        let Some(mk) = compiled.mask_key else {
            self.slow.push(SlowRule {
                id: rule.id,
                drop,
                stateful,
                matches: Arc::new(rule.def.matches.clone()),
            });
            self.placement.insert(rule.id, Placement::Slow);
            return;
        };
        let has_residue = !compiled.residue.is_empty() || !compiled.option_residue.is_empty();
        if has_residue {
            self.residues.insert(
                rule.id,
                Arc::new(Residue {
                    complex: compiled.residue,
                    options: compiled.option_residue,
                }),
            );
        }
        let t = match self.by_mask.get(&mk.mask) {
            Some(t) => *t,
            None => {
                self.tables.push(ClassifierTable::new(&mk));
                self.by_mask.insert(mk.mask, self.tables.len() - 1);
                self.tables.len() - 1
            }
        };
        let table = &mut self.tables[t];
        let guard = if table.l4 { guard_code(compiled.l4) } else { 0 };
        let entry_rule = EntryRule {
            id: rule.id,
            drop,
            stateful,
            residue: has_residue,
        };
        match table.find(&mk.key, guard) {
            Some(i) => {
                let session = &mut table.entries[i].session;
                let pos = session.rules.partition_point(|r| r.id < rule.id);
                session.rules.insert(pos, entry_rule);
                session.refresh(&self.residues);
            }
            None => {
                let hash = table.hash_key(&mk.key, guard);
                let mut session = SessionEntry {
                    rules: vec![entry_rule],
                    needs_complex: false,
                    needs_opts: false,
                    verdict_hint: VerdictHint::Rewrite,
                };
                session.refresh(&self.residues);
                table.entries.push(TableEntry {
                    key: mk.key,
                    guard,
                    hash,
                    session,
                });
                table.index.insert(hash, table.entries.len() - 1);
            }
        }
        self.placement.insert(
            rule.id,
            Placement::Table {
                mask: mk.mask,
                key: mk.key,
                guard,
            },
        );
    }

    /// Removes a rule; returns false if it was not present.
    pub fn remove(&mut self, id: RuleId) -> bool {
        let Some(placement) = self.placement.remove(&id) else {
            return false;
        };
        self.residues.remove(&id);
        match placement {
            Placement::Slow => self.slow.retain(|r| r.id != id),
            Placement::Table { mask, key, guard } => {
                let t = self.by_mask[&mask];
                let table = &mut self.tables[t];
                let i = table.find(&key, guard).expect("placed rule has an entry");
                let session = &mut table.entries[i].session;
                session.rules.retain(|r| r.id != id);
                if session.rules.is_empty() {
                    let last = table.entries.len() - 1;
                    let moved = (i != last).then(|| (table.entries[last].hash, last));
                    table.index.remove_swap(table.entries[i].hash, i, moved);
                    table.entries.swap_remove(i);
                    debug_assert_eq!(table.index.len(), table.entries.len());
                    if table.entries.is_empty() {
                        self.tables.remove(t);
                        self.by_mask = self.tables.iter().enumerate().map(|(i, t)| (t.shape.mask, i)).collect();
                    }
                } else {
                    session.refresh(&self.residues);
                }
            }
        }
        true
    }

    pub fn table_stats(&self) -> Vec<TableStats> {
        self.tables
            .iter()
            .map(|t| TableStats {
                mask: t.shape.mask_bytes(),
                skip: t.shape.skip,
                chunks: t.shape.chunks,
                keys: t.entries.len(),
                rules: t.entries.iter().map(|e| e.session.rules.len()).sum(),
                slots: t.index.capacity(),
            })
            .collect()
    }

    /// Finds every rule matching `pkt`, probing every table once.
    pub fn match_rules(&self, pkt: &PacketBuffer, out: &mut RuleMatches) {
        out.clear();
        let mut view = [0u8; CLASSIFY_SPAN];
        pkt.classify_view(&mut view);
        let words = load_words(&view);
        let proto = pkt.l4_proto();
        let mut ctx = PacketContext::new(pkt);
        for table in &self.tables {
            out.tables_probed += 1;
            let Some(session) = table.lookup(&words, proto) else {
                continue;
            };
            for r in &session.rules {
                let ok = !r.residue || {
                    let res = &self.residues[&r.id];
                    res.complex.iter().all(|e| evaluate_match(&mut ctx, e))
                        && res.options.iter().all(|e| evaluate_match(&mut ctx, e))
                };
                if ok {
                    out.push(r.id, r.drop, r.stateful);
                }
            }
        }
        for r in &self.slow {
            if r.matches.iter().all(|e| evaluate_match(&mut ctx, e)) {
                out.push(r.id, r.drop, r.stateful);
            }
        }
        out.malformed_options = ctx.options_malformed();
        out.ids.sort_unstable();
        out.stateful.sort_unstable();
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Drop { rules: Vec<RuleId> },
    Miss,
    Match { rules: Vec<RuleId>, conn: Option<ConnRef> },
}

/// Classifies a packet: table and slow-path rules first, then the
/// connection table. A live connection yields a match even when no rule
/// matched; any matching drop rule makes the verdict a drop.
pub fn classify(pkt: &PacketBuffer, classifier: &Classifier, conn: &mut ConnTable) -> Verdict {
    classify_into(pkt, classifier, conn, &mut RuleMatches::default())
}

/// [`classify`], leaving the rule matches in `m` for callers that need the
/// stateful subset.
pub fn classify_into(
    pkt: &PacketBuffer,
    classifier: &Classifier,
    conn: &mut ConnTable,
    m: &mut RuleMatches,
) -> Verdict {
    m.clear();
    classifier.match_rules(pkt, m);
    let hit = conn.lookup(pkt, pkt.timestamp());
    if m.drop {
        return Verdict::Drop { rules: m.ids.clone() };
    }
    if m.ids.is_empty() && hit.is_none() {
        return Verdict::Miss;
    }
    Verdict::Match {
        rules: m.ids.clone(),
        conn: hit,
    }
}
