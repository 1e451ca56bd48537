// SPDX-License-Identifier: Apache-2.0

//! The `mmb` command language.
//!
//! ```text
//! command   := "mmb" ( "add" rule | "add-stateful" rule | "del" NUM
//!                    | "list" [ "rules" | "tables" | "connections" ]
//!                    | "flush" | "enable" | "disable" )
//! rule      := match+ target+
//! match     := ["!"] FIELD [ cond value ]
//! cond      := ε | "==" | "!=" | "<" | ">" | "<=" | ">="     (ε means "==")
//! value     := NUM | HEXBYTES | ADDR["/"NUM] | "tcp" | "udp" | "icmp"
//! target    := "drop"
//!            | "mod" FIELD value
//!            | "strip" ["!"] TCPOPT        (repeatable)
//!            | "add" TCPOPT [value]
//!            | "shuffle" FIELD
//! ```
//!
//! A bare field is a presence test: for TCP flag fields it means the flag is
//! set, for option fields that the option is present, and for other fields
//! that the packet carries the field's protocol.

mod parser;

use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::packet::{option_kind, FieldDescriptor, L4Proto, Locator};

pub use parser::parse_command;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Neq,
    Lt,
    Gt,
    Leq,
    Geq,
    Present,
}

impl Cond {
    pub fn symbol(self) -> &'static str {
        match self {
            Cond::Eq => "==",
            Cond::Neq => "!=",
            Cond::Lt => "<",
            Cond::Gt => ">",
            Cond::Leq => "<=",
            Cond::Geq => ">=",
            Cond::Present => "",
        }
    }

    /// Applies the comparison to an already-ordered pair.
    pub fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            Cond::Eq => ord == Equal,
            Cond::Neq => ord != Equal,
            Cond::Lt => ord == Less,
            Cond::Gt => ord == Greater,
            Cond::Leq => ord != Greater,
            Cond::Geq => ord != Less,
            Cond::Present => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Value {
    Int(u64),
    Addr { addr: Ipv4Addr, prefix: Option<u8> },
    Bytes(Vec<u8>),
}

impl Value {
    /// Integer view of integer and address values; prefixes yield the
    /// network address.
    pub fn as_int(&self) -> Option<u64> {
        match self {
            Value::Int(v) => Some(*v),
            Value::Addr { addr, prefix } => Some(u64::from(u32::from(*addr) & prefix_mask(prefix.unwrap_or(32)))),
            Value::Bytes(_) => None,
        }
    }

    pub fn prefix_len(&self) -> Option<u8> {
        match self {
            Value::Addr { prefix, .. } => *prefix,
            _ => None,
        }
    }
}

/// Network mask for a prefix length in `0..=32`.
pub fn prefix_mask(len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(len.min(32)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchExpr {
    pub field: FieldDescriptor,
    pub cond: Cond,
    pub value: Option<Value>,
    pub negated: bool,
}

impl MatchExpr {
    pub fn is_option(&self) -> bool {
        matches!(self.field.locator, Locator::TcpOption(_))
    }

    /// Equality or presence on a fixed-offset field or TCP flag: the only
    /// shape the mask-based fast path can express.
    pub fn is_maskable(&self) -> bool {
        !self.negated
            && matches!(self.cond, Cond::Eq | Cond::Present)
            && matches!(self.field.locator, Locator::Fixed { .. } | Locator::TcpFlag(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetExpr {
    Drop,
    Mod {
        field: FieldDescriptor,
        value: Value,
    },
    /// Remove the listed options.
    Strip(Vec<FieldDescriptor>),
    /// Remove every option not listed.
    StripExcept(Vec<FieldDescriptor>),
    AddOpt {
        field: FieldDescriptor,
        value: Option<Value>,
    },
    Shuffle {
        field: FieldDescriptor,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleDef {
    pub matches: Vec<MatchExpr>,
    pub targets: Vec<TargetExpr>,
    pub stateful: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ListTarget {
    Rules,
    Tables,
    Connections,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Add(RuleDef),
    Del(u64),
    List(ListTarget),
    Flush,
    Enable,
    Disable,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown field `{name}` at byte {pos}")]
    UnknownField { pos: usize, name: String },
    #[error("type mismatch at byte {pos}: {msg}")]
    TypeMismatch { pos: usize, msg: String },
    #[error("invalid rule: {0}")]
    Semantic(String),
}

impl RuleError {
    pub fn position(&self) -> Option<usize> {
        match self {
            RuleError::Syntax { pos, .. }
            | RuleError::UnknownField { pos, .. }
            | RuleError::TypeMismatch { pos, .. } => Some(*pos),
            RuleError::Semantic(_) => None,
        }
    }
}

/// Rule identifier, assigned by the rule store and never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RuleId(pub u64);

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A rule that passed [`validate_rule`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub id: RuleId,
    pub def: RuleDef,
    pub fast_path_eligible: bool,
}

impl Rule {
    pub fn is_drop(&self) -> bool {
        self.def.targets.iter().any(|t| matches!(t, TargetExpr::Drop))
    }
}

/// Payload length an option gets when written without an explicit value,
/// and the length integer literals are encoded to.
pub fn canonical_option_len(kind: u8) -> Option<usize> {
    match kind {
        option_kind::MSS => Some(2),
        option_kind::WSCALE => Some(1),
        option_kind::SACK_PERMITTED => Some(0),
        option_kind::TIMESTAMP => Some(8),
        _ => None,
    }
}

/// Encodes a literal as the value bytes of an option of `kind`.
pub fn option_payload(kind: u8, value: Option<&Value>) -> Option<Vec<u8>> {
    match value {
        None => Some(vec![0; canonical_option_len(kind).unwrap_or(0)]),
        Some(Value::Bytes(b)) => Some(b.clone()),
        Some(Value::Int(v)) => {
            let len = match canonical_option_len(kind) {
                Some(len) => len,
                None => (8 - v.leading_zeros() as usize / 8).max(1),
            };
            if len < 8 && *v >> (len * 8) != 0 {
                return None;
            }
            let be = v.to_be_bytes();
            Some(be[8 - len.min(8)..].to_vec())
        }
        Some(Value::Addr { .. }) => None,
    }
}

/// Checks rule-level constraints and computes fast-path eligibility.
pub fn validate_rule(def: RuleDef, id: RuleId) -> Result<Rule, RuleError> {
    if def.matches.is_empty() {
        return Err(RuleError::Semantic("rule has no match".into()));
    }
    if def.targets.is_empty() {
        return Err(RuleError::Semantic("rule has no target".into()));
    }
    let drops = def.targets.iter().filter(|t| matches!(t, TargetExpr::Drop)).count();
    if drops > 0 && def.targets.len() > 1 {
        return Err(RuleError::Semantic("drop cannot be combined with other targets".into()));
    }
    let strips = def.targets.iter().filter(|t| matches!(t, TargetExpr::Strip(_))).count();
    let excepts = def
        .targets
        .iter()
        .filter(|t| matches!(t, TargetExpr::StripExcept(_)))
        .count();
    if strips > 0 && excepts > 0 {
        return Err(RuleError::Semantic("`strip X` and `strip ! X` cannot be mixed".into()));
    }
    let mut l4: Option<L4Proto> = None;
    for t in &def.targets {
        match t {
            TargetExpr::Shuffle { field } => {
                if !def.stateful {
                    return Err(RuleError::Semantic(format!("shuffle {field} requires add-stateful")));
                }
                if !field.is_fixed() {
                    return Err(RuleError::Semantic(format!("cannot shuffle {field}")));
                }
            }
            TargetExpr::Mod { field, .. } | TargetExpr::AddOpt { field, .. }
                if matches!(field.option_kind(), Some(option_kind::EOL | option_kind::NOP)) =>
            {
                return Err(RuleError::Semantic(format!(
                    "{field} is padding and cannot carry a value"
                )));
            }
            TargetExpr::Mod { field, .. } if matches!(field.name, "ip-len" | "ip-proto") => {
                return Err(RuleError::Semantic(format!(
                    "{field} describes the packet layout and cannot be rewritten"
                )));
            }
            TargetExpr::Mod { field, .. } => {
                if let (Some(p), true) = (field.proto, field.normalized_offset().is_some()) {
                    if l4.is_some_and(|q| q != p) {
                        return Err(RuleError::Semantic(
                            "rule rewrites fields of two transport protocols".into(),
                        ));
                    }
                    l4 = Some(p);
                }
            }
            _ => {}
        }
    }
    let fast_path_eligible = def.matches.iter().all(|m| m.is_maskable());
    Ok(Rule {
        id,
        def,
        fast_path_eligible,
    })
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Addr { addr, prefix: None } => write!(f, "{addr}"),
            Value::Addr {
                addr,
                prefix: Some(len),
            } => write!(f, "{addr}/{len}"),
            Value::Bytes(b) => {
                f.write_str("0x")?;
                for byte in b {
                    write!(f, "{byte:02x}")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for MatchExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.negated {
            f.write_str("! ")?;
        }
        write!(f, "{}", self.field)?;
        match (&self.cond, &self.value) {
            (Cond::Present, _) | (_, None) => Ok(()),
            (Cond::Eq, Some(v)) => write!(f, " {v}"),
            (c, Some(v)) => write!(f, " {} {v}", c.symbol()),
        }
    }
}

impl fmt::Display for TargetExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetExpr::Drop => f.write_str("drop"),
            TargetExpr::Mod { field, value } => write!(f, "mod {field} {value}"),
            TargetExpr::Strip(fields) => {
                let parts: Vec<_> = fields.iter().map(|x| format!("strip {x}")).collect();
                f.write_str(&parts.join(" "))
            }
            TargetExpr::StripExcept(fields) => {
                let parts: Vec<_> = fields.iter().map(|x| format!("strip ! {x}")).collect();
                f.write_str(&parts.join(" "))
            }
            TargetExpr::AddOpt { field, value: None } => write!(f, "add {field}"),
            TargetExpr::AddOpt { field, value: Some(v) } => write!(f, "add {field} {v}"),
            TargetExpr::Shuffle { field } => write!(f, "shuffle {field}"),
        }
    }
}

impl fmt::Display for RuleDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .matches
            .iter()
            .map(ToString::to_string)
            .chain(self.targets.iter().map(ToString::to_string))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::Add(def) if def.stateful => write!(f, "mmb add-stateful {def}"),
            Command::Add(def) => write!(f, "mmb add {def}"),
            Command::Del(id) => write!(f, "mmb del {id}"),
            Command::List(ListTarget::Rules) => f.write_str("mmb list"),
            Command::List(ListTarget::Tables) => f.write_str("mmb list tables"),
            Command::List(ListTarget::Connections) => f.write_str("mmb list connections"),
            Command::Flush => f.write_str("mmb flush"),
            Command::Enable => f.write_str("mmb enable"),
            Command::Disable => f.write_str("mmb disable"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(text: &str) -> Result<Rule, RuleError> {
        match parse_command(text)? {
            Command::Add(def) => validate_rule(def, RuleId(1)),
            other => panic!("not an add: {other:?}"),
        }
    }

    #[test]
    fn eligibility() {
        assert!(
            rule("mmb add ip-saddr 1.2.3.4 ip-daddr 5.6.7.8 ip-proto tcp tcp-sport 1 tcp-dport 2 drop")
                .unwrap()
                .fast_path_eligible
        );
        assert!(!rule("mmb add tcp-dport <= 1024 drop").unwrap().fast_path_eligible);
        assert!(!rule("mmb add tcp-opt-mss 1460 drop").unwrap().fast_path_eligible);
        assert!(!rule("mmb add ! tcp-syn drop").unwrap().fast_path_eligible);
        assert!(rule("mmb add tcp-syn tcp-ack drop").unwrap().fast_path_eligible);
    }

    #[test]
    fn semantic_errors() {
        assert!(matches!(
            rule("mmb add tcp-dport 80 shuffle tcp-sport"),
            Err(RuleError::Semantic(_))
        ));
        assert!(matches!(
            rule("mmb add tcp-dport 80 drop mod tcp-dport 443"),
            Err(RuleError::Semantic(_))
        ));
        assert!(matches!(
            rule("mmb add tcp-syn strip tcp-opt-sack strip ! tcp-opt-mss"),
            Err(RuleError::Semantic(_))
        ));
        assert!(matches!(
            rule("mmb add ip-proto 6 mod tcp-dport 1 mod udp-dport 2"),
            Err(RuleError::Semantic(_))
        ));
        assert!(rule("mmb add-stateful tcp-syn shuffle tcp-sport").is_ok());
        assert!(matches!(
            rule("mmb add tcp-syn mod ip-len 40"),
            Err(RuleError::Semantic(_))
        ));
        assert!(matches!(
            rule("mmb add tcp-syn mod ip-proto 17"),
            Err(RuleError::Semantic(_))
        ));
        assert!(matches!(
            rule("mmb add tcp-syn add tcp-opt 1"),
            Err(RuleError::Semantic(_))
        ));
        assert!(rule("mmb add tcp-syn strip tcp-opt 1").is_ok());
    }

    #[test]
    fn option_payload_encoding() {
        assert_eq!(
            option_payload(option_kind::MSS, Some(&Value::Int(1460))),
            Some(vec![0x05, 0xb4])
        );
        assert_eq!(option_payload(option_kind::MSS, Some(&Value::Int(70000))), None);
        assert_eq!(option_payload(option_kind::WSCALE, None), Some(vec![0]));
        assert_eq!(option_payload(253, Some(&Value::Int(0x1234))), Some(vec![0x12, 0x34]));
        assert_eq!(option_payload(253, Some(&Value::Int(0))), Some(vec![0]));
    }

    #[test]
    fn prefix_masks() {
        assert_eq!(prefix_mask(0), 0);
        assert_eq!(prefix_mask(24), 0xffff_ff00);
        assert_eq!(prefix_mask(32), u32::MAX);
        let v = Value::Addr {
            addr: Ipv4Addr::new(10, 0, 0, 77),
            prefix: Some(24),
        };
        assert_eq!(v.as_int(), Some(0x0a00_0000));
    }
}
