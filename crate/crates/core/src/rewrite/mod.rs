// SPDX-License-Identifier: Apache-2.0

//! Target application.
//!
//! Fixed-field `mod` targets compile into a mask and key over the same
//! normalized 80-byte layout the classifier uses; applying them is
//! `(packet & mask) | key`. Option edits, payload writes and per-connection
//! values are applied afterwards, and checksums are recomputed once if
//! anything changed.

mod options;

use std::collections::HashMap;
use std::sync::Arc;

use serde::Serialize;

use crate::conntrack::{BindingPlan, ConnEntry, Direction};
use crate::packet::{
    fix_checksums, read_field, write_field, FieldDescriptor, FieldValue, L4Proto, Locator, PacketBuffer, CLASSIFY_SPAN,
    IPV4_MIN_HEADER_LEN,
};
use crate::rules::{option_payload, Rule, RuleId, TargetExpr, Value};

pub use options::{apply_option_edits, encode_options, encoded_len, OptionEdits, MAX_OPTION_BYTES};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RewriteCounters {
    pub malformed_options: u64,
    pub no_header_room: u64,
    pub missing_binding: u64,
    pub payload_skipped: u64,
}

impl RewriteCounters {
    pub fn add(&mut self, o: &RewriteCounters) {
        self.malformed_options += o.malformed_options;
        self.no_header_room += o.no_header_room;
        self.missing_binding += o.missing_binding;
        self.payload_skipped += o.payload_skipped;
    }
}

/// A rule's targets, compiled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetProgram {
    pub rule: RuleId,
    pub drop: bool,
    /// Zero bits are cleared before `static_key` is OR-ed in.
    pub static_mask: [u8; CLASSIFY_SPAN],
    pub static_key: [u8; CLASSIFY_SPAN],
    /// Transport protocol the static transport-header writes belong to;
    /// packets of another protocol get only the IPv4 header writes.
    pub static_l4: Option<L4Proto>,
    pub option_edits: OptionEdits,
    pub payload_writes: Vec<(FieldDescriptor, Vec<u8>)>,
    /// Shuffled fields, bound per connection.
    pub dynamic: Vec<BindingPlan>,
    /// Fixed rewrites of address and port fields, recorded per connection
    /// so replies can be mapped back.
    pub recorded: Vec<BindingPlan>,
    pub needs_conn: bool,
    touched: Vec<u8>,
}

impl TargetProgram {
    /// Plans the connection table needs when this rule creates an entry.
    pub fn binding_plans(&self) -> Vec<BindingPlan> {
        self.recorded.iter().chain(&self.dynamic).copied().collect()
    }

    /// Normalized offsets the static part writes.
    pub fn static_span(&self) -> impl Iterator<Item = usize> + '_ {
        self.touched.iter().map(|i| usize::from(*i))
    }
}

/// Compiles a validated rule's targets. `shuffle_range` bounds shuffled
/// values of fields 16 bits or wider.
pub fn compile_targets(rule: &Rule, shuffle_range: (u64, u64)) -> TargetProgram {
    let mut tp = TargetProgram {
        rule: rule.id,
        drop: rule.is_drop(),
        static_mask: [0xff; CLASSIFY_SPAN],
        static_key: [0; CLASSIFY_SPAN],
        static_l4: None,
        option_edits: OptionEdits::default(),
        payload_writes: Vec::new(),
        dynamic: Vec::new(),
        recorded: Vec::new(),
        needs_conn: rule.def.stateful,
        touched: Vec::new(),
    };
    for t in &rule.def.targets {
        match t {
            TargetExpr::Drop => {}
            TargetExpr::Mod { field, value } => match field.locator {
                Locator::Fixed { .. } | Locator::TcpFlag(_) => {
                    let v = value.as_int().expect("validated integer value");
                    let offset = field.normalized_offset().expect("fixed field");
                    let m = field.bit_mask().expect("fixed field");
                    let k = field.encode(v).expect("fixed field");
                    for (i, (mb, kb)) in m.iter().zip(&k).enumerate() {
                        tp.static_mask[offset + i] &= !mb;
                        tp.static_key[offset + i] = (tp.static_key[offset + i] & !mb) | kb;
                    }
                    if field.proto.is_some() {
                        tp.static_l4 = field.proto;
                    }
                    if rule.def.stateful && field.mirror().is_some() {
                        tp.recorded.retain(|p| p.field() != *field);
                        tp.recorded.push(BindingPlan::Fixed {
                            field: *field,
                            value: v,
                        });
                    }
                }
                Locator::TcpOption(kind) => {
                    let payload = option_payload(kind, Some(value)).expect("validated option value");
                    tp.option_edits.mods.push((kind, payload));
                }
                Locator::Payload(_) => {
                    if let Value::Bytes(b) = value {
                        tp.payload_writes.push((*field, b.clone()));
                    }
                }
            },
            TargetExpr::Strip(fields) => {
                tp.option_edits
                    .strip
                    .extend(fields.iter().filter_map(|f| f.option_kind()));
            }
            TargetExpr::StripExcept(fields) => {
                tp.option_edits.strip_except = Some(fields.iter().filter_map(|f| f.option_kind()).collect());
            }
            TargetExpr::AddOpt { field, value } => {
                let kind = field.option_kind().expect("validated option field");
                let payload = option_payload(kind, value.as_ref()).expect("validated option value");
                tp.option_edits.adds.push((kind, payload));
            }
            TargetExpr::Shuffle { field } => {
                let (lo, hi) = crate::conntrack::shuffle_bounds(field, shuffle_range.0, shuffle_range.1);
                tp.dynamic.push(BindingPlan::Shuffle { field: *field, lo, hi });
            }
        }
    }
    tp.touched = (0..CLASSIFY_SPAN as u8)
        .filter(|i| tp.static_mask[usize::from(*i)] != 0xff)
        .collect();
    tp
}

/// `(packet & mask) | key` over the bytes the program writes. Returns
/// whether any byte changed.
pub fn apply_static(pkt: &mut PacketBuffer, tp: &TargetProgram) -> bool {
    let l4_ok = tp.static_l4.is_none_or(|p| p == pkt.l4_proto()) && pkt.l4_proto() != L4Proto::Other;
    let mut changed = false;
    for i in tp.static_span() {
        if i >= IPV4_MIN_HEADER_LEN && !l4_ok {
            continue;
        }
        let idx = pkt.normalized_index(i);
        let bytes = pkt.bytes_mut();
        let new = (bytes[idx] & tp.static_mask[i]) | tp.static_key[i];
        changed |= new != bytes[idx];
        bytes[idx] = new;
    }
    changed
}

fn write_int(pkt: &mut PacketBuffer, field: &FieldDescriptor, v: u64) -> bool {
    match read_field(pkt, field) {
        Ok(Some(FieldValue::Int(old))) if old == v => false,
        Ok(Some(_)) => write_field(pkt, field, &FieldValue::Int(v)).is_ok(),
        _ => false,
    }
}

fn apply_payload(pkt: &mut PacketBuffer, tp: &TargetProgram, counters: &mut RewriteCounters) -> bool {
    let mut changed = false;
    for (field, data) in &tp.payload_writes {
        if field.check_proto(pkt).is_err() {
            continue;
        }
        let (start, end) = field.payload_range(pkt).expect("payload field");
        if end - start < data.len() {
            counters.payload_skipped += 1;
            continue;
        }
        if &pkt.bytes()[start..start + data.len()] != data.as_slice() {
            pkt.bytes_mut()[start..start + data.len()].copy_from_slice(data);
            changed = true;
        }
    }
    changed
}

/// Per-connection values. Forward packets get the program's shuffled
/// values; reverse packets get every recorded original value written back
/// into the mirrored field (destination for a source rewrite).
pub fn apply_dynamic(
    pkt: &mut PacketBuffer,
    tp: &TargetProgram,
    entry: &ConnEntry,
    direction: Direction,
    counters: &mut RewriteCounters,
) -> bool {
    let mut changed = false;
    match direction {
        Direction::Forward => {
            for plan in &tp.dynamic {
                match entry.binding(&plan.field()) {
                    Some(b) => changed |= write_int(pkt, &b.field, b.rewritten),
                    None => counters.missing_binding += 1,
                }
            }
        }
        Direction::Reverse => changed = restore_reverse(pkt, entry),
    }
    changed
}

fn restore_reverse(pkt: &mut PacketBuffer, entry: &ConnEntry) -> bool {
    let mut changed = false;
    for b in &entry.bindings {
        if let Some(m) = b.field.mirror() {
            changed |= write_int(pkt, &m, b.original);
        }
    }
    changed
}

/// Compiled programs by rule id.
pub type ProgramSet = HashMap<RuleId, Arc<TargetProgram>>;

/// Applies everything a classified packet is due: the targets of every
/// matched rule in ascending id order (plus the owning rule of a forward
/// connection hit), then the reverse mapping of a reverse connection hit.
/// Checksums are recomputed only if a byte changed. Returns whether the
/// packet changed.
pub fn rewrite_packet(
    pkt: &mut PacketBuffer,
    rules: &[RuleId],
    conn: Option<(&ConnEntry, Direction)>,
    programs: &ProgramSet,
    counters: &mut RewriteCounters,
) -> bool {
    let owner = conn.map(|(e, d)| (e.rule_id, d));
    let mut ids: Vec<RuleId> = rules.to_vec();
    if let Some((id, Direction::Forward)) = owner {
        if let Err(pos) = ids.binary_search(&id) {
            ids.insert(pos, id);
        }
    }
    let mut changed = false;
    for id in &ids {
        let Some(tp) = programs.get(id) else {
            continue;
        };
        if tp.drop {
            continue;
        }
        changed |= apply_static(pkt, tp);
        changed |= apply_option_edits(pkt, &tp.option_edits, counters);
        changed |= apply_payload(pkt, tp, counters);
        if !tp.dynamic.is_empty() {
            match (conn, owner) {
                (Some((entry, Direction::Forward)), Some((o, _))) if o == *id => {
                    changed |= apply_dynamic(pkt, tp, entry, Direction::Forward, counters);
                }
                // The reverse mapping below takes care of it.
                (Some((_, Direction::Reverse)), Some((o, _))) if o == *id => {}
                _ => counters.missing_binding += tp.dynamic.len() as u64,
            }
        }
    }
    if let Some((entry, Direction::Reverse)) = conn {
        changed |= restore_reverse(pkt, entry);
    }
    if changed {
        fix_checksums(pkt);
    }
    changed
}
