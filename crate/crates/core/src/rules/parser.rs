// SPDX-License-Identifier: Apache-2.0

use std::net::Ipv4Addr;

use super::{Command, Cond, ListTarget, MatchExpr, RuleDef, RuleError, TargetExpr, Value};
use crate::packet::{lookup_field, tcp_option_field, FieldDescriptor, Locator, IPPROTO_ICMP, IPPROTO_TCP, IPPROTO_UDP};

#[derive(Debug, Clone, Copy)]
struct Token<'a> {
    text: &'a str,
    pos: usize,
}

fn lex(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                push_word(&mut out, &line[s..i], s);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        push_word(&mut out, &line[s..], s);
    }
    out
}

/// `!field` is accepted as shorthand for `! field`; `!=` is left intact.
fn push_word<'a>(out: &mut Vec<Token<'a>>, word: &'a str, pos: usize) {
    if word.len() > 1 && word.starts_with('!') && !word.starts_with("!=") {
        out.push(Token { text: "!", pos });
        out.push(Token {
            text: &word[1..],
            pos: pos + 1,
        });
    } else {
        out.push(Token { text: word, pos });
    }
}

const TARGET_KEYWORDS: [&str; 5] = ["drop", "mod", "strip", "add", "shuffle"];

struct Parser<'a> {
    tokens: Vec<Token<'a>>,
    at: usize,
    end: usize,
}

fn syntax(pos: usize, msg: impl Into<String>) -> RuleError {
    RuleError::Syntax { pos, msg: msg.into() }
}

fn mismatch(pos: usize, msg: impl Into<String>) -> RuleError {
    RuleError::TypeMismatch { pos, msg: msg.into() }
}

fn parse_cond(text: &str) -> Option<Cond> {
    Some(match text {
        "==" => Cond::Eq,
        "!=" => Cond::Neq,
        "<" => Cond::Lt,
        ">" => Cond::Gt,
        "<=" => Cond::Leq,
        ">=" => Cond::Geq,
        _ => return None,
    })
}

fn parse_uint(text: &str) -> Option<u64> {
    if let Some(hex) = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        if hex.is_empty() {
            return None;
        }
        u64::from_str_radix(hex, 16).ok()
    } else if !text.is_empty() && text.bytes().all(|b| b.is_ascii_digit()) {
        text.parse().ok()
    } else {
        None
    }
}

fn parse_hex_bytes(text: &str) -> Option<Vec<u8>> {
    let hex = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X"))?;
    if hex.is_empty() || hex.len() % 2 != 0 {
        return None;
    }
    (0..hex.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(hex.get(i..i + 2)?, 16).ok())
        .collect()
}

fn protocol_name(text: &str) -> Option<u8> {
    match text {
        "tcp" => Some(IPPROTO_TCP),
        "udp" => Some(IPPROTO_UDP),
        "icmp" => Some(IPPROTO_ICMP),
        _ => None,
    }
}

fn looks_like_value(text: &str) -> bool {
    text.as_bytes().first().is_some_and(|b| b.is_ascii_digit()) || protocol_name(text).is_some()
}

/// Interprets a literal for `field`.
fn parse_value(field: &FieldDescriptor, tok: Token<'_>) -> Result<Value, RuleError> {
    let text = tok.text;
    if !looks_like_value(text) {
        return Err(syntax(tok.pos, format!("expected a value, found `{text}`")));
    }
    match field.locator {
        Locator::Fixed { .. } | Locator::TcpFlag(_) => {
            if field.is_address() && text.contains('.') {
                let (addr, prefix) = match text.split_once('/') {
                    Some((a, p)) => (a, Some(p)),
                    None => (text, None),
                };
                let addr: Ipv4Addr = addr
                    .parse()
                    .map_err(|_| mismatch(tok.pos, format!("`{text}` is not an IPv4 address")))?;
                let prefix = match prefix {
                    None => None,
                    Some(p) => match p.parse::<u8>() {
                        Ok(len) if len <= 32 => Some(len),
                        _ => return Err(mismatch(tok.pos, format!("bad prefix length in `{text}`"))),
                    },
                };
                return Ok(Value::Addr { addr, prefix });
            }
            let v = if field.name == "ip-proto" {
                protocol_name(text).map(u64::from).or_else(|| parse_uint(text))
            } else {
                parse_uint(text)
            };
            let v = v.ok_or_else(|| mismatch(tok.pos, format!("`{text}` is not valid for {field}")))?;
            let width = field.width_bits().unwrap_or(64);
            if width < 64 && v >> width != 0 {
                return Err(mismatch(
                    tok.pos,
                    format!("{v} does not fit the {width}-bit field {field}"),
                ));
            }
            Ok(Value::Int(v))
        }
        Locator::TcpOption(_) => {
            if text.starts_with("0x") || text.starts_with("0X") {
                parse_hex_bytes(text)
                    .map(Value::Bytes)
                    .ok_or_else(|| mismatch(tok.pos, format!("`{text}` is not a byte string")))
            } else {
                parse_uint(text)
                    .map(Value::Int)
                    .ok_or_else(|| mismatch(tok.pos, format!("`{text}` is not valid for {field}")))
            }
        }
        Locator::Payload(_) => parse_hex_bytes(text)
            .map(Value::Bytes)
            .ok_or_else(|| mismatch(tok.pos, format!("{field} takes a 0x byte string, found `{text}`"))),
    }
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<Token<'a>> {
        self.tokens.get(self.at).copied()
    }

    fn next(&mut self) -> Option<Token<'a>> {
        let t = self.peek();
        if t.is_some() {
            self.at += 1;
        }
        t
    }

    fn eat(&mut self, text: &str) -> bool {
        if self.peek().is_some_and(|t| t.text == text) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, what: &str) -> Result<Token<'a>, RuleError> {
        self.next().ok_or_else(|| syntax(self.end, format!("expected {what}")))
    }

    fn finish(&mut self) -> Result<(), RuleError> {
        match self.peek() {
            Some(t) => Err(syntax(t.pos, format!("unexpected `{}`", t.text))),
            None => Ok(()),
        }
    }

    fn field(&mut self) -> Result<(FieldDescriptor, usize), RuleError> {
        let tok = self.expect("a field name")?;
        if tok.text == "tcp-opt" {
            let kind_tok = self.expect("an option kind after tcp-opt")?;
            let kind = parse_uint(kind_tok.text)
                .filter(|k| *k <= 255)
                .ok_or_else(|| mismatch(kind_tok.pos, format!("`{}` is not an option kind", kind_tok.text)))?;
            return Ok((tcp_option_field(kind as u8), tok.pos));
        }
        match lookup_field(tok.text) {
            Some(fd) => Ok((fd, tok.pos)),
            None if TARGET_KEYWORDS.contains(&tok.text) || looks_like_value(tok.text) || tok.text == "!" => {
                Err(syntax(tok.pos, format!("expected a field name, found `{}`", tok.text)))
            }
            None => Err(RuleError::UnknownField {
                pos: tok.pos,
                name: tok.text.to_string(),
            }),
        }
    }

    fn option_field(&mut self) -> Result<FieldDescriptor, RuleError> {
        let (fd, pos) = self.field()?;
        if fd.option_kind().is_none() {
            return Err(mismatch(pos, format!("{fd} is not a TCP option")));
        }
        Ok(fd)
    }

    fn match_expr(&mut self) -> Result<MatchExpr, RuleError> {
        let negated = self.eat("!");
        let (field, _) = self.field()?;
        let (cond, value) = match self.peek() {
            Some(t) if parse_cond(t.text).is_some() => {
                self.at += 1;
                let vt = self.expect("a value")?;
                let value = parse_value(&field, vt)?;
                (parse_cond(t.text).unwrap(), Some((value, vt.pos)))
            }
            Some(t) if looks_like_value(t.text) => {
                self.at += 1;
                (Cond::Eq, Some((parse_value(&field, t)?, t.pos)))
            }
            _ => (Cond::Present, None),
        };
        if let Some((v, pos)) = &value {
            if v.prefix_len().is_some() && !matches!(cond, Cond::Eq | Cond::Neq) {
                return Err(mismatch(*pos, "prefixes only support == and !="));
            }
        }
        Ok(MatchExpr {
            field,
            cond,
            value: value.map(|(v, _)| v),
            negated,
        })
    }

    fn rule(&mut self, stateful: bool) -> Result<RuleDef, RuleError> {
        let mut matches = Vec::new();
        while let Some(t) = self.peek() {
            if TARGET_KEYWORDS.contains(&t.text) {
                break;
            }
            matches.push(self.match_expr()?);
        }
        if matches.is_empty() {
            let pos = self.peek().map_or(self.end, |t| t.pos);
            return Err(syntax(pos, "expected a match"));
        }

        let mut targets = Vec::new();
        let mut strip = Vec::new();
        let mut keep = Vec::new();
        while let Some(t) = self.next() {
            match t.text {
                "drop" => targets.push(TargetExpr::Drop),
                "mod" => {
                    let (field, _) = self.field()?;
                    let vt = self.expect("a value")?;
                    let value = parse_value(&field, vt)?;
                    if value.prefix_len().is_some() {
                        return Err(mismatch(vt.pos, "mod takes an address, not a prefix"));
                    }
                    if let Some(kind) = field.option_kind() {
                        if super::option_payload(kind, Some(&value)).is_none() {
                            return Err(mismatch(vt.pos, format!("`{}` does not fit {field}", vt.text)));
                        }
                    }
                    targets.push(TargetExpr::Mod { field, value });
                }
                "strip" => {
                    let except = self.eat("!");
                    let field = self.option_field()?;
                    let list = if except { &mut keep } else { &mut strip };
                    if !list.contains(&field) {
                        list.push(field);
                    }
                }
                "add" => {
                    let field = self.option_field()?;
                    let value = match self.peek() {
                        Some(vt) if looks_like_value(vt.text) => {
                            self.at += 1;
                            let v = parse_value(&field, vt)?;
                            let kind = field.option_kind().unwrap();
                            if super::option_payload(kind, Some(&v)).is_none() {
                                return Err(mismatch(vt.pos, format!("`{}` does not fit {field}", vt.text)));
                            }
                            Some(v)
                        }
                        _ => None,
                    };
                    targets.push(TargetExpr::AddOpt { field, value });
                }
                "shuffle" => {
                    let (field, pos) = self.field()?;
                    if !field.is_fixed() {
                        return Err(mismatch(pos, format!("cannot shuffle {field}")));
                    }
                    targets.push(TargetExpr::Shuffle { field });
                }
                other => return Err(syntax(t.pos, format!("expected a target, found `{other}`"))),
            }
        }
        if !strip.is_empty() {
            targets.push(TargetExpr::Strip(strip));
        }
        if !keep.is_empty() {
            targets.push(TargetExpr::StripExcept(keep));
        }
        if targets.is_empty() {
            return Err(syntax(self.end, "expected a target"));
        }
        Ok(RuleDef {
            matches,
            targets,
            stateful,
        })
    }

    fn command(&mut self) -> Result<Command, RuleError> {
        let first = self.expect("`mmb`")?;
        if first.text != "mmb" {
            return Err(syntax(first.pos, format!("expected `mmb`, found `{}`", first.text)));
        }
        let verb = self.expect("a command")?;
        let cmd = match verb.text {
            "add" => Command::Add(self.rule(false)?),
            "add-stateful" => Command::Add(self.rule(true)?),
            "del" => {
                let t = self.expect("a rule id")?;
                let id = parse_uint(t.text).ok_or_else(|| syntax(t.pos, format!("`{}` is not a rule id", t.text)))?;
                Command::Del(id)
            }
            "list" => {
                let what = match self.peek().map(|t| t.text) {
                    Some("rules") => ListTarget::Rules,
                    Some("tables") => ListTarget::Tables,
                    Some("connections") => ListTarget::Connections,
                    _ => return self.finish().map(|_| Command::List(ListTarget::Rules)),
                };
                self.at += 1;
                Command::List(what)
            }
            "flush" => Command::Flush,
            "enable" => Command::Enable,
            "disable" => Command::Disable,
            other => return Err(syntax(verb.pos, format!("unknown command `{other}`"))),
        };
        self.finish()?;
        Ok(cmd)
    }
}

/// Parses one command line. Never panics; malformed input yields a
/// positioned error.
pub fn parse_command(line: &str) -> Result<Command, RuleError> {
    let mut p = Parser {
        tokens: lex(line),
        at: 0,
        end: line.len(),
    };
    p.command()
}
