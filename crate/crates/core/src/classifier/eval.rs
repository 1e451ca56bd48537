// SPDX-License-Identifier: Apache-2.0

//! Per-packet evaluation of match expressions that the mask tables cannot
//! express: ordering conditions, negations, option and payload tests.

use std::cmp::Ordering;

use crate::packet::{
    parse_tcp_options, read_field, FieldValue, L4Proto, Locator, OptionError, PacketBuffer, TcpOptionView,
};
use crate::rules::{prefix_mask, Cond, MatchExpr, Value};

/// A packet plus its TCP options, parsed at most once however many
/// expressions look at them.
pub struct PacketContext<'a> {
    pkt: &'a PacketBuffer,
    options: Option<Result<Vec<TcpOptionView>, OptionError>>,
}

impl<'a> PacketContext<'a> {
    pub fn new(pkt: &'a PacketBuffer) -> Self {
        PacketContext { pkt, options: None }
    }

    pub fn packet(&self) -> &'a PacketBuffer {
        self.pkt
    }

    pub fn options(&mut self) -> Result<&[TcpOptionView], OptionError> {
        let pkt = self.pkt;
        match self.options.get_or_insert_with(|| parse_tcp_options(pkt)) {
            Ok(v) => Ok(v),
            Err(e) => Err(e.clone()),
        }
    }

    /// True once the options were parsed and found malformed.
    pub fn options_malformed(&self) -> bool {
        matches!(self.options, Some(Err(OptionError::Malformed { .. })))
    }
}

/// Compares two big-endian unsigned integers of any length.
fn cmp_be(a: &[u8], b: &[u8]) -> Ordering {
    let a = &a[a.iter().take_while(|x| **x == 0).count()..];
    let b = &b[b.iter().take_while(|x| **x == 0).count()..];
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

fn literal_bytes(v: &Value) -> Option<Vec<u8>> {
    match v {
        Value::Bytes(b) => Some(b.clone()),
        Value::Int(i) => Some(i.to_be_bytes().to_vec()),
        Value::Addr { .. } => v.as_int().map(|i| i.to_be_bytes().to_vec()),
    }
}

fn compare_int(field_value: u64, cond: Cond, value: &Value) -> bool {
    let (lhs, rhs) = match value {
        Value::Addr { prefix: Some(len), .. } => {
            (field_value & u64::from(prefix_mask(*len)), value.as_int().unwrap_or(0))
        }
        _ => match value.as_int() {
            Some(v) => (field_value, v),
            None => return false,
        },
    };
    cond.holds(lhs.cmp(&rhs))
}

/// The expression before negation. `None` when the packet lacks the field,
/// which makes a plain expression false and a negated one true.
fn base_value(ctx: &mut PacketContext<'_>, e: &MatchExpr) -> Result<Option<bool>, OptionError> {
    let pkt = ctx.pkt;
    match e.field.locator {
        Locator::Fixed { .. } | Locator::TcpFlag(_) => {
            let v = match read_field(pkt, &e.field) {
                Ok(Some(FieldValue::Int(v))) => v,
                _ => return Ok(None),
            };
            Ok(Some(match (&e.cond, &e.value) {
                (Cond::Present, _) | (_, None) => !matches!(e.field.locator, Locator::TcpFlag(_)) || v == 1,
                (cond, Some(value)) => compare_int(v, *cond, value),
            }))
        }
        Locator::TcpOption(kind) => {
            if pkt.l4_proto() != L4Proto::Tcp {
                return Ok(None);
            }
            let opts = ctx.options()?;
            let Some(opt) = opts.iter().find(|o| o.kind == kind) else {
                return Ok(None);
            };
            Ok(Some(match (&e.cond, &e.value) {
                (Cond::Present, _) | (_, None) => true,
                (cond, Some(value)) => match literal_bytes(value) {
                    Some(lit) => cond.holds(cmp_be(opt.value(pkt.bytes()), &lit)),
                    None => false,
                },
            }))
        }
        Locator::Payload(_) => {
            if e.field.check_proto(pkt).is_err() {
                return Ok(None);
            }
            let (start, end) = e.field.payload_range(pkt).expect("payload field");
            Ok(match (&e.cond, &e.value) {
                (Cond::Present, _) | (_, None) => Some(true),
                (cond, Some(Value::Bytes(lit))) => {
                    if end - start < lit.len() {
                        None
                    } else {
                        Some(cond.holds(pkt.bytes()[start..start + lit.len()].cmp(lit)))
                    }
                }
                _ => Some(false),
            })
        }
    }
}

/// Evaluates one expression. Any expression touching malformed TCP
/// options is false, negated or not.
pub fn evaluate_match(ctx: &mut PacketContext<'_>, e: &MatchExpr) -> bool {
    match base_value(ctx, e) {
        Ok(Some(b)) => b != e.negated,
        Ok(None) => e.negated,
        Err(_) => false,
    }
}

/// Conjunction over `exprs`.
pub fn evaluate_residue(pkt: &PacketBuffer, exprs: &[MatchExpr]) -> bool {
    let mut ctx = PacketContext::new(pkt);
    exprs.iter().all(|e| evaluate_match(&mut ctx, e))
}

/// Conjunction over option expressions; false for non-TCP packets and for
/// packets whose option list is malformed.
pub fn match_options(pkt: &PacketBuffer, exprs: &[MatchExpr]) -> bool {
    if pkt.l4_proto() != L4Proto::Tcp {
        return false;
    }
    let mut ctx = PacketContext::new(pkt);
    if ctx.options().is_err() {
        return false;
    }
    exprs.iter().all(|e| evaluate_match(&mut ctx, e))
}
