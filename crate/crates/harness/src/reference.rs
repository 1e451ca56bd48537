// SPDX-License-Identifier: Apache-2.0

//! Linear brute-force evaluator for stateless rule sets.
//!
//! Works straight on raw IPv4 bytes with its own field table, option walk
//! and checksum code, and checks every rule against every packet. Only the
//! rule parser is shared with the engine.

use std::cmp::Ordering;

use mmb::rules::{Cond, MatchExpr, RuleDef, TargetExpr, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefVerdict {
    /// The packet does not parse as IPv4 with a complete transport header.
    Invalid,
    Drop,
    Miss,
    /// Rules applied, in id order, and the resulting bytes.
    Match {
        rules: Vec<u64>,
        bytes: Vec<u8>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReferenceError {
    #[error("rule {0} is stateful; the reference only covers stateless rules")]
    Stateful(u64),
}

/// Where an integer field sits: `nbytes` big-endian bytes at `at`, then
/// `width` bits starting `shift` bits from the least significant end.
#[derive(Debug, Clone, Copy)]
struct Spot {
    transport: Option<u8>,
    at: usize,
    nbytes: usize,
    shift: u32,
    width: u32,
}

const TCP: Option<u8> = Some(6);
const UDP: Option<u8> = Some(17);
const ICMP: Option<u8> = Some(1);

fn spot(name: &str) -> Option<Spot> {
    let s = |transport, at, nbytes, shift, width| Spot {
        transport,
        at,
        nbytes,
        shift,
        width,
    };
    Some(match name {
        "ip-dscp" => s(None, 1, 1, 2, 6),
        "ip-ecn" => s(None, 1, 1, 0, 2),
        "ip-len" => s(None, 2, 2, 0, 16),
        "ip-id" => s(None, 4, 2, 0, 16),
        "ip-ttl" => s(None, 8, 1, 0, 8),
        "ip-proto" => s(None, 9, 1, 0, 8),
        "ip-saddr" => s(None, 12, 4, 0, 32),
        "ip-daddr" => s(None, 16, 4, 0, 32),
        "tcp-sport" => s(TCP, 0, 2, 0, 16),
        "tcp-dport" => s(TCP, 2, 2, 0, 16),
        "tcp-seq" => s(TCP, 4, 4, 0, 32),
        "tcp-ack-num" => s(TCP, 8, 4, 0, 32),
        "tcp-flags" => s(TCP, 13, 1, 0, 8),
        "tcp-fin" => s(TCP, 13, 1, 0, 1),
        "tcp-syn" => s(TCP, 13, 1, 1, 1),
        "tcp-rst" => s(TCP, 13, 1, 2, 1),
        "tcp-psh" => s(TCP, 13, 1, 3, 1),
        "tcp-ack" => s(TCP, 13, 1, 4, 1),
        "tcp-urg" => s(TCP, 13, 1, 5, 1),
        "tcp-win" => s(TCP, 14, 2, 0, 16),
        "udp-sport" => s(UDP, 0, 2, 0, 16),
        "udp-dport" => s(UDP, 2, 2, 0, 16),
        "udp-len" => s(UDP, 4, 2, 0, 16),
        "icmp-type" => s(ICMP, 0, 1, 0, 8),
        "icmp-code" => s(ICMP, 1, 1, 0, 8),
        _ => return None,
    })
}

fn is_flag(name: &str) -> bool {
    matches!(
        name,
        "tcp-fin" | "tcp-syn" | "tcp-rst" | "tcp-psh" | "tcp-ack" | "tcp-urg"
    )
}

/// Offsets of a parsed datagram.
#[derive(Debug, Clone, Copy)]
struct Layout {
    l4: usize,
    end: usize,
    /// Transport protocol when its header is present: first fragments and
    /// unfragmented packets of TCP, UDP or ICMP.
    transport: Option<u8>,
    fragment: bool,
}

fn be(b: &[u8]) -> u64 {
    b.iter().fold(0, |acc, x| (acc << 8) | u64::from(*x))
}

fn sum16(data: &[u8], mut acc: u64) -> u64 {
    for pair in data.chunks(2) {
        acc += u64::from(pair[0]) << 8 | pair.get(1).map_or(0, |x| u64::from(*x));
    }
    acc
}

fn fold(mut acc: u64) -> u16 {
    while acc > 0xffff {
        acc = (acc & 0xffff) + (acc >> 16);
    }
    acc as u16
}

fn layout(b: &[u8]) -> Option<Layout> {
    if b.len() < 20 || b[0] >> 4 != 4 || b[0] & 0xf < 5 {
        return None;
    }
    let hl = usize::from(b[0] & 0xf) * 4;
    let total = be(&b[2..4]) as usize;
    if b.len() < hl || total < hl || b.len() < total {
        return None;
    }
    if fold(sum16(&b[..hl], 0)) != 0xffff {
        return None;
    }
    let frag = be(&b[6..8]) as u16;
    let first = frag & 0x1fff == 0;
    let transport = match b[9] {
        p @ (1 | 6 | 17) if first => Some(p),
        _ => None,
    };
    let need = match transport {
        Some(6) => {
            if total < hl + 20 {
                return None;
            }
            let doff = usize::from(b[hl + 12] >> 4) * 4;
            if doff < 20 {
                return None;
            }
            doff
        }
        Some(_) => 8,
        None => 0,
    };
    if total < hl + need {
        return None;
    }
    Some(Layout {
        l4: hl,
        end: total,
        transport,
        fragment: frag & 0x3fff != 0,
    })
}

fn spot_index(l: &Layout, s: &Spot) -> Option<usize> {
    match s.transport {
        None => Some(s.at),
        Some(p) if l.transport == Some(p) => Some(l.l4 + s.at),
        Some(_) => None,
    }
}

fn read_spot(b: &[u8], l: &Layout, s: &Spot) -> Option<u64> {
    let i = spot_index(l, s)?;
    let raw = be(&b[i..i + s.nbytes]);
    Some((raw >> s.shift) & ((1u64 << s.width) - 1))
}

fn write_spot(b: &mut [u8], l: &Layout, s: &Spot, v: u64) {
    let Some(i) = spot_index(l, s) else {
        return;
    };
    let old = be(&b[i..i + s.nbytes]);
    let mask = ((1u64 << s.width) - 1) << s.shift;
    let new = (old & !mask) | ((v << s.shift) & mask);
    for k in 0..s.nbytes {
        b[i + k] = (new >> (8 * (s.nbytes - 1 - k))) as u8;
    }
}

type Opt = (u8, Vec<u8>);

/// Kind/value pairs of the option area, NOPs included, up to EOL.
fn walk(b: &[u8], start: usize, end: usize) -> Result<Vec<Opt>, ()> {
    let mut out = Vec::new();
    let mut i = start;
    while i < end {
        match b[i] {
            0 => break,
            1 => {
                out.push((1, Vec::new()));
                i += 1;
            }
            k => {
                if i + 2 > end {
                    return Err(());
                }
                let len = usize::from(b[i + 1]);
                if len < 2 || i + len > end {
                    return Err(());
                }
                out.push((k, b[i + 2..i + len].to_vec()));
                i += len;
            }
        }
    }
    Ok(out)
}

fn tcp_options(b: &[u8], l: &Layout) -> Option<Result<Vec<Opt>, ()>> {
    if l.transport != TCP {
        return None;
    }
    let doff = usize::from(b[l.l4 + 12] >> 4) * 4;
    Some(walk(b, l.l4 + 20, l.l4 + doff))
}

fn strip_zeros(v: &[u8]) -> &[u8] {
    let n = v.iter().take_while(|x| **x == 0).count();
    &v[n..]
}

fn cmp_numbers(a: &[u8], b: &[u8]) -> Ordering {
    let (a, b) = (strip_zeros(a), strip_zeros(b));
    a.len().cmp(&b.len()).then(a.cmp(b))
}

fn holds(c: Cond, o: Ordering) -> bool {
    match c {
        Cond::Eq | Cond::Present => o == Ordering::Equal,
        Cond::Neq => o != Ordering::Equal,
        Cond::Lt => o == Ordering::Less,
        Cond::Gt => o == Ordering::Greater,
        Cond::Leq => o != Ordering::Greater,
        Cond::Geq => o != Ordering::Less,
    }
}

fn payload_start(name: &str, l: &Layout) -> Option<usize> {
    match name {
        "ip4-payload" => Some(l.l4),
        "udp-payload" if l.transport == UDP => Some(l.l4 + 8),
        _ => None,
    }
}

enum Truth {
    Yes,
    No,
    Absent,
    /// The expression looked at a malformed option list.
    Broken,
}

fn base(b: &[u8], l: &Layout, e: &MatchExpr) -> Truth {
    let yes = |t: bool| if t { Truth::Yes } else { Truth::No };
    let name = e.field.name;
    if let Some(s) = spot(name) {
        let Some(v) = read_spot(b, l, &s) else {
            return Truth::Absent;
        };
        return match (&e.cond, &e.value) {
            (Cond::Present, _) | (_, None) => yes(!is_flag(name) || v == 1),
            (c, Some(Value::Int(x))) => yes(holds(*c, v.cmp(x))),
            (c, Some(Value::Addr { addr, prefix })) => {
                let m = match prefix {
                    Some(0) => 0,
                    Some(p) => u64::from(u32::MAX << (32 - u32::from(*p))),
                    None => 0xffff_ffff,
                };
                yes(holds(*c, (v & m).cmp(&(u64::from(u32::from(*addr)) & m))))
            }
            (_, Some(Value::Bytes(_))) => Truth::No,
        };
    }
    if let Some(kind) = e.field.option_kind() {
        let opts = match tcp_options(b, l) {
            None => return Truth::Absent,
            Some(Err(())) => return Truth::Broken,
            Some(Ok(o)) => o,
        };
        let Some((_, value)) = opts.iter().find(|(k, _)| *k == kind) else {
            return Truth::Absent;
        };
        return match (&e.cond, &e.value) {
            (Cond::Present, _) | (_, None) => Truth::Yes,
            (c, Some(Value::Int(x))) => yes(holds(*c, cmp_numbers(value, &x.to_be_bytes()))),
            (c, Some(Value::Addr { addr, prefix })) => {
                let m = prefix.map_or(u32::MAX, |p| if p == 0 { 0 } else { u32::MAX << (32 - u32::from(p)) });
                yes(holds(*c, cmp_numbers(value, &(u32::from(*addr) & m).to_be_bytes())))
            }
            (c, Some(Value::Bytes(x))) => yes(holds(*c, cmp_numbers(value, x))),
        };
    }
    let Some(start) = payload_start(name, l) else {
        return Truth::Absent;
    };
    match (&e.cond, &e.value) {
        (Cond::Present, _) | (_, None) => Truth::Yes,
        (c, Some(Value::Bytes(x))) => {
            if l.end - start < x.len() {
                Truth::Absent
            } else {
                yes(holds(*c, b[start..start + x.len()].cmp(x)))
            }
        }
        _ => Truth::No,
    }
}

fn expr_holds(b: &[u8], l: &Layout, e: &MatchExpr) -> bool {
    match base(b, l, e) {
        Truth::Yes => !e.negated,
        Truth::No | Truth::Absent => e.negated,
        Truth::Broken => false,
    }
}

fn option_value(kind: u8, v: Option<&Value>) -> Vec<u8> {
    let canonical = match kind {
        2 => Some(2),
        3 => Some(1),
        4 => Some(0),
        8 => Some(8),
        _ => None,
    };
    match v {
        None => vec![0; canonical.unwrap_or(0)],
        Some(Value::Bytes(x)) => x.clone(),
        Some(Value::Int(x)) => {
            let minimal = (8 - x.leading_zeros() as usize / 8).max(1);
            let n = canonical.unwrap_or(minimal);
            x.to_be_bytes()[8 - n..].to_vec()
        }
        Some(Value::Addr { addr, .. }) => addr.octets().to_vec(),
    }
}

fn wire_len(list: &[Opt]) -> usize {
    let raw: usize = list.iter().map(|(k, v)| if *k <= 1 { 1 } else { 2 + v.len() }).sum();
    raw.div_ceil(4) * 4
}

#[derive(Default)]
struct OptionPlan {
    keep_only: Option<Vec<u8>>,
    strip: Vec<u8>,
    set: Vec<(u8, Vec<u8>)>,
    append: Vec<(u8, Vec<u8>)>,
}

fn edit_options(b: &mut Vec<u8>, l: &mut Layout, plan: &OptionPlan) -> bool {
    if plan.keep_only.is_none() && plan.strip.is_empty() && plan.set.is_empty() && plan.append.is_empty() {
        return false;
    }
    let Some(Ok(original)) = tcp_options(b, l) else {
        return false;
    };
    let mut list = original.clone();
    if let Some(keep) = &plan.keep_only {
        list.retain(|(k, _)| keep.contains(k));
    }
    list.retain(|(k, _)| !plan.strip.contains(k));
    for (kind, value) in &plan.set {
        let mut next = list.clone();
        for (k, v) in &mut next {
            if k == kind {
                *v = value.clone();
            }
        }
        if wire_len(&next) <= 40 {
            list = next;
        }
    }
    for (kind, value) in &plan.append {
        list.push((*kind, value.clone()));
        if wire_len(&list) > 40 {
            list.pop();
        }
    }
    if list == original {
        return false;
    }
    let mut area = Vec::new();
    for (k, v) in &list {
        area.push(*k);
        if *k > 1 {
            area.push((v.len() + 2) as u8);
            area.extend_from_slice(v);
        }
    }
    area.resize(wire_len(&list), 0);
    let start = l.l4 + 20;
    let old_end = l.l4 + usize::from(b[l.l4 + 12] >> 4) * 4;
    let grown = area.len() as isize - (old_end - start) as isize;
    b.splice(start..old_end, area.iter().copied());
    b[l.l4 + 12] = (((20 + area.len()) / 4) as u8) << 4 | (b[l.l4 + 12] & 0xf);
    l.end = (l.end as isize + grown) as usize;
    b[2..4].copy_from_slice(&(l.end as u16).to_be_bytes());
    true
}

fn recompute_checksums(b: &mut [u8], l: &Layout) {
    b[10] = 0;
    b[11] = 0;
    let ip = !fold(sum16(&b[..l.l4], 0));
    b[10..12].copy_from_slice(&ip.to_be_bytes());
    if l.fragment {
        return;
    }
    let (at, pseudo) = match l.transport {
        Some(6) => (16, true),
        Some(17) => (6, true),
        Some(1) => (2, false),
        _ => return,
    };
    let c = l.l4 + at;
    let udp = l.transport == UDP;
    if udp && b[c] == 0 && b[c + 1] == 0 {
        return;
    }
    b[c] = 0;
    b[c + 1] = 0;
    let mut acc = 0;
    if pseudo {
        acc = sum16(&b[12..20], 0) + u64::from(b[9]) + (l.end - l.l4) as u64;
    }
    let mut sum = !fold(sum16(&b[l.l4..l.end], acc));
    if udp && sum == 0 {
        sum = 0xffff;
    }
    b[c..c + 2].copy_from_slice(&sum.to_be_bytes());
}

/// Applies one rule's targets: header writes, then option edits, then
/// payload writes. A rule's header writes count as a change only if they
/// leave different bytes behind.
fn apply(b: &mut Vec<u8>, l: &mut Layout, def: &RuleDef) -> bool {
    let before = b.clone();
    let mut plan = OptionPlan::default();
    let mut payload = Vec::new();
    for t in &def.targets {
        match t {
            TargetExpr::Mod { field, value } => {
                if let Some(s) = spot(field.name) {
                    let v = match value {
                        Value::Int(x) => *x,
                        Value::Addr { addr, .. } => u64::from(u32::from(*addr)),
                        Value::Bytes(x) => be(x),
                    };
                    write_spot(b, l, &s, v);
                } else if let Some(kind) = field.option_kind() {
                    plan.set.push((kind, option_value(kind, Some(value))));
                } else if let Value::Bytes(x) = value {
                    payload.push((field.name, x.clone()));
                }
            }
            TargetExpr::Strip(fields) => plan.strip.extend(fields.iter().filter_map(|f| f.option_kind())),
            TargetExpr::StripExcept(fields) => {
                plan.keep_only = Some(fields.iter().filter_map(|f| f.option_kind()).collect());
            }
            TargetExpr::AddOpt { field, value } => {
                if let Some(kind) = field.option_kind() {
                    plan.append.push((kind, option_value(kind, value.as_ref())));
                }
            }
            TargetExpr::Drop | TargetExpr::Shuffle { .. } => {}
        }
    }
    let mut changed = *b != before;
    changed |= edit_options(b, l, &plan);
    for (name, data) in payload {
        let Some(start) = payload_start(name, l) else {
            continue;
        };
        if l.end - start >= data.len() && b[start..start + data.len()] != data[..] {
            b[start..start + data.len()].copy_from_slice(&data);
            changed = true;
        }
    }
    changed
}

/// The reference evaluator over a fixed list of rules.
#[derive(Debug, Clone, Default)]
pub struct Reference {
    rules: Vec<(u64, RuleDef)>,
}

impl Reference {
    /// `rules` as `(id, definition)`; any order.
    pub fn new(mut rules: Vec<(u64, RuleDef)>) -> Result<Self, ReferenceError> {
        if let Some((id, _)) = rules.iter().find(|(_, d)| d.stateful) {
            return Err(ReferenceError::Stateful(*id));
        }
        rules.sort_by_key(|(id, _)| *id);
        Ok(Reference { rules })
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Ids of rules whose every expression holds.
    pub fn matching(&self, packet: &[u8]) -> Option<Vec<u64>> {
        let l = layout(packet)?;
        Some(
            self.rules
                .iter()
                .filter(|(_, d)| d.matches.iter().all(|e| expr_holds(packet, &l, e)))
                .map(|(id, _)| *id)
                .collect(),
        )
    }

    /// Verdict and output bytes for a raw IPv4 packet.
    pub fn evaluate(&self, packet: &[u8]) -> RefVerdict {
        let Some(ids) = self.matching(packet) else {
            return RefVerdict::Invalid;
        };
        if ids.is_empty() {
            return RefVerdict::Miss;
        }
        let defs: Vec<&RuleDef> = ids
            .iter()
            .map(|id| &self.rules[self.rules.binary_search_by_key(id, |(i, _)| *i).expect("known id")].1)
            .collect();
        if defs.iter().any(|d| d.targets.contains(&TargetExpr::Drop)) {
            return RefVerdict::Drop;
        }
        let mut b = packet.to_vec();
        let mut l = layout(&b).expect("parsed above");
        let mut changed = false;
        for d in defs {
            changed |= apply(&mut b, &mut l, d);
        }
        if changed {
            recompute_checksums(&mut b, &l);
        }
        RefVerdict::Match { rules: ids, bytes: b }
    }
}

/// Independent IPv4 and transport checksum verification. UDP packets with
/// a zero checksum pass; fragments only need a valid IPv4 header.
pub fn verify_checksums(b: &[u8]) -> bool {
    let Some(l) = layout(b) else {
        return false;
    };
    if l.fragment {
        return true;
    }
    let (at, pseudo) = match l.transport {
        Some(6) => (16, true),
        Some(17) => (6, true),
        Some(1) => (2, false),
        _ => return true,
    };
    if l.transport == UDP && b[l.l4 + at] == 0 && b[l.l4 + at + 1] == 0 {
        return true;
    }
    let acc = if pseudo {
        sum16(&b[12..20], 0) + u64::from(b[9]) + (l.end - l.l4) as u64
    } else {
        0
    };
    fold(sum16(&b[l.l4..l.end], acc)) == 0xffff
}

/// Option kinds of a TCP packet in wire order, NOPs included.
pub fn option_kinds(b: &[u8]) -> Option<Vec<u8>> {
    let l = layout(b)?;
    match tcp_options(b, &l)? {
        Ok(list) => Some(list.into_iter().map(|(k, _)| k).collect()),
        Err(()) => None,
    }
}
