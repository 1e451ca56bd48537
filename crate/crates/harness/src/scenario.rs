// SPDX-License-Identifier: Apache-2.0

//! Benchmark scenarios: a rule set, generated traffic, a pipeline run, and
//! checks on what came out.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::net::Ipv4Addr;
use std::rc::Rc;
use std::str::FromStr;

use mmb::engine::{Engine, EngineError};
use mmb::packet::{fix_checksums, lookup_field, write_field, FieldValue, LinkType, PacketBuffer};
use mmb::pipeline::{Disposition, Frame, PipelineConfig, RunReport, StreamError};
use serde::Serialize;
use thiserror::Error;
use tracing::{debug, info};

use crate::reference::{option_kinds, verify_checksums};
use crate::rulegen;
use crate::traffic::{generate_traffic, TrafficProfile};

/// Source address the NAT rule writes.
pub const NAT_ADDR: Ipv4Addr = Ipv4Addr::new(200, 0, 0, 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Forward,
    Firewall,
    Stateful,
    Nat,
    TcpOpts,
    MaskLimit,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Forward,
        ScenarioKind::Firewall,
        ScenarioKind::Stateful,
        ScenarioKind::Nat,
        ScenarioKind::TcpOpts,
        ScenarioKind::MaskLimit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Forward => "forward",
            ScenarioKind::Firewall => "firewall",
            ScenarioKind::Stateful => "stateful",
            ScenarioKind::Nat => "nat",
            ScenarioKind::TcpOpts => "tcp-opts",
            ScenarioKind::MaskLimit => "mask-limit",
        }
    }

    pub fn default_rule_count(self) -> usize {
        match self {
            ScenarioKind::Forward => 0,
            ScenarioKind::Firewall | ScenarioKind::Stateful => 10_000,
            ScenarioKind::Nat => 1,
            ScenarioKind::TcpOpts => 100,
            ScenarioKind::MaskLimit => 26,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown scenario `{0}` (expected forward, firewall, stateful, nat, tcp-opts or mask-limit)")]
pub struct UnknownScenario(pub String);

impl FromStr for ScenarioKind {
    type Err = UnknownScenario;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub rule_count: usize,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub traffic: TrafficProfile,
}

impl Scenario {
    /// A scenario with its default rule count and traffic.
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        let mut traffic = TrafficProfile::default();
        match kind {
            ScenarioKind::Nat => {
                traffic.flows = 1000;
                traffic.concurrency = 64;
                traffic.data_packets = 4;
                traffic.mtu = 576;
            }
            ScenarioKind::TcpOpts => traffic.decorate_options = true,
            _ => {}
        }
        Scenario {
            kind,
            rule_count: kind.default_rule_count(),
            seed,
            pipeline: PipelineConfig::default(),
            traffic,
        }
    }

    pub fn with_rule_count(mut self, n: usize) -> Self {
        self.rule_count = n;
        self
    }

    /// The scenario's rule set as command lines.
    pub fn rules(&self) -> Vec<String> {
        let n = self.rule_count;
        match self.kind {
            ScenarioKind::Forward => Vec::new(),
            ScenarioKind::Firewall => rulegen::firewall(n, self.seed),
            ScenarioKind::Stateful => rulegen::stateful(n, self.seed),
            ScenarioKind::Nat => rulegen::nat(),
            ScenarioKind::TcpOpts => rulegen::tcp_opts(n, self.seed),
            ScenarioKind::MaskLimit => rulegen::mask_limit(n, self.seed),
        }
    }

    /// A fresh engine loaded with the scenario's rules.
    pub fn build_engine(&self) -> Result<Engine, ScenarioError> {
        let mut engine = Engine::new(self.pipeline);
        for line in self.rules() {
            engine.execute(&line).map_err(|source| ScenarioError::Rule {
                line: line.clone(),
                source,
            })?;
        }
        engine.publish();
        debug!(
            rules = engine.store().len(),
            tables = engine.store().classifier().table_count(),
            "rules loaded"
        );
        Ok(engine)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub scenario: ScenarioKind,
    pub rules: usize,
    pub tables: usize,
    pub slow_rules: usize,
    pub run: RunReport,
    pub checks: Vec<Check>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "scenario {}: {} rules, {} tables, {} slow rules",
            self.scenario, self.rules, self.tables, self.slow_rules
        )?;
        write!(f, "{}", self.run)?;
        for c in &self.checks {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            writeln!(f, "{mark} {}: {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("rule `{line}` rejected: {source}")]
    Rule {
        line: String,
        #[source]
        source: EngineError,
    },
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("scenario check `{check}` failed: {detail}")]
    Failure {
        check: &'static str,
        detail: String,
        report: Box<ScenarioReport>,
    },
}

/// Builds the rules, runs the traffic and evaluates the scenario's checks.
/// The first failed check is returned as [`ScenarioError::Failure`].
pub fn run_scenario(s: &Scenario) -> Result<ScenarioReport, ScenarioError> {
    let mut engine = s.build_engine()?;
    let report = run_on(&mut engine, s)?;
    info!(scenario = %s.kind, packets = report.run.packets, pps = report.run.packets_per_second, "scenario finished");
    match report.checks.iter().find(|c| !c.passed) {
        Some(c) => Err(ScenarioError::Failure {
            check: c.name,
            detail: c.detail.clone(),
            report: Box::new(report.clone()),
        }),
        None => Ok(report),
    }
}

/// Runs the scenario's traffic through an engine that already holds the
/// scenario's rules. Checks are reported, not enforced.
pub fn run_on(engine: &mut Engine, s: &Scenario) -> Result<ScenarioReport, ScenarioError> {
    let (run, mut checks) = match s.kind {
        ScenarioKind::Nat => run_nat(engine, s),
        _ => run_paired(engine, s)?,
    };
    let expected = s.traffic.total_packets() as u64;
    checks.insert(
        0,
        Check::new(
            "conservation",
            run.conserves_packets() && run.packets == expected && run.invalid == 0,
            format!(
                "{} in, {} dropped, {} forwarded, {} invalid",
                run.packets, run.dropped, run.forwarded, run.invalid
            ),
        ),
    );
    let c = engine.store().classifier();
    Ok(ScenarioReport {
        scenario: s.kind,
        rules: engine.store().len(),
        tables: c.table_count(),
        slow_rules: c.slow_rule_count(),
        run,
        checks,
    })
}

#[derive(Default)]
struct Tally {
    unchanged: u64,
    compared: u64,
    option_ok: u64,
    option_checked: u64,
    reparse_failures: u64,
    first_problem: Option<String>,
}

impl Tally {
    fn problem(&mut self, msg: impl FnOnce() -> String) {
        if self.first_problem.is_none() {
            self.first_problem = Some(msg());
        }
    }
}

fn kind_of(b: &[u8]) -> Vec<u8> {
    option_kinds(b).unwrap_or_default()
}

/// Inputs not yet matched to an output, keyed by trace id.
type Pending = Rc<RefCell<VecDeque<(u64, Vec<u8>)>>>;

/// Streams the traffic and pairs every forwarded packet with its input via
/// the trace id the pipeline assigns.
fn run_paired(engine: &mut Engine, s: &Scenario) -> Result<(RunReport, Vec<Check>), ScenarioError> {
    let pending: Pending = Rc::default();
    let mut next = 0u64;
    let feed = Rc::clone(&pending);
    let source = generate_traffic(&s.traffic, s.seed).map(move |f: Frame| {
        feed.borrow_mut().push_back((next, f.data.clone()));
        next += 1;
        Ok::<_, String>(f)
    });
    let mut tally = Tally::default();
    let kind = s.kind;
    let run = engine.run_stream(source, |out: &PacketBuffer| {
        let mut q = pending.borrow_mut();
        while q.front().is_some_and(|(i, _)| *i < out.trace_id()) {
            q.pop_front();
        }
        let Some((_, input)) = q.pop_front() else {
            return Err("output without input");
        };
        tally.compared += 1;
        if out.bytes() == input.as_slice() {
            tally.unchanged += 1;
        }
        if kind == ScenarioKind::TcpOpts {
            check_option_edit(&input, out.bytes(), &mut tally);
        }
        Ok(())
    })?;

    let mut checks = Vec::new();
    match s.kind {
        ScenarioKind::Forward => checks.push(Check::new(
            "output equals input",
            run.forwarded == run.packets && tally.unchanged == run.packets,
            format!("{} of {} packets forwarded unchanged", tally.unchanged, run.packets),
        )),
        ScenarioKind::Firewall => checks.push(Check::new(
            "no rule matches",
            run.matched == 0 && run.rule_drops == 0 && tally.unchanged == run.packets,
            format!("{} matched, {} dropped by rule", run.matched, run.rule_drops),
        )),
        ScenarioKind::Stateful => checks.push(Check::new(
            "every packet matches",
            run.matched == run.packets,
            format!("{} of {} matched", run.matched, run.packets),
        )),
        ScenarioKind::TcpOpts => {
            checks.push(Check::new(
                "option whitelist",
                tally.option_ok == tally.compared && tally.compared == run.packets,
                match &tally.first_problem {
                    Some(p) => format!("{} of {} correct; first problem: {p}", tally.option_ok, tally.compared),
                    None => format!(
                        "{} packets, {} timestamp-bearing rewritten to the whitelist",
                        tally.compared, tally.option_checked
                    ),
                },
            ));
            checks.push(Check::new(
                "valid output",
                tally.reparse_failures == 0,
                format!("{} outputs failed to reparse or verify", tally.reparse_failures),
            ));
        }
        ScenarioKind::MaskLimit => checks.push(Check::new(
            "tables",
            engine.store().classifier().table_count() == s.rule_count,
            format!(
                "{} tables for {} rules, {:.1} ns/packet in classify",
                engine.store().classifier().table_count(),
                s.rule_count,
                run.classify_ns_per_packet()
            ),
        )),
        ScenarioKind::Nat => unreachable!("nat runs separately"),
    }
    Ok((run, checks))
}

fn check_option_edit(input: &[u8], output: &[u8], tally: &mut Tally) {
    let before = kind_of(input);
    let valid = PacketBuffer::parse(output.to_vec(), LinkType::RawIp).is_ok() && verify_checksums(output);
    if !valid {
        tally.reparse_failures += 1;
        tally.problem(|| "output does not reparse".into());
        return;
    }
    if before.contains(&8) {
        tally.option_checked += 1;
        let want: Vec<u8> = before.iter().copied().filter(|k| matches!(k, 2 | 3)).collect();
        let got = kind_of(output);
        let payload_kept = input[input.len() - payload_len(input)..] == output[output.len() - payload_len(output)..];
        if got == want && payload_kept {
            tally.option_ok += 1;
        } else {
            tally.problem(|| format!("options {before:?} became {got:?}, expected {want:?}"));
        }
    } else if input == output {
        tally.option_ok += 1;
    } else {
        tally.problem(|| "packet without timestamp was modified".into());
    }
}

fn payload_len(b: &[u8]) -> usize {
    let ihl = usize::from(b[0] & 0xf) * 4;
    let doff = usize::from(b[ihl + 12] >> 4) * 4;
    b.len() - ihl - doff
}

type FlowKey = (Ipv4Addr, u16, Ipv4Addr, u16);

fn tuple(b: &[u8]) -> FlowKey {
    let ihl = usize::from(b[0] & 0xf) * 4;
    let addr = |i: usize| Ipv4Addr::new(b[i], b[i + 1], b[i + 2], b[i + 3]);
    let port = |i: usize| u16::from_be_bytes([b[ihl + i], b[ihl + i + 1]]);
    (addr(12), port(0), addr(16), port(2))
}

#[derive(Default)]
struct NatState {
    /// Original client-side flow to its translated source port.
    mapping: HashMap<FlowKey, u16>,
    /// Ports of flows that are still sending.
    live_ports: HashSet<u16>,
    seen: HashMap<FlowKey, usize>,
    forward: u64,
    forward_ok: u64,
    reverse: u64,
    reverse_ok: u64,
    checksum_failures: u64,
    collisions: u64,
    unmapped_replies: u64,
    first_problem: Option<String>,
}

impl NatState {
    fn problem(&mut self, msg: String) {
        self.first_problem.get_or_insert(msg);
    }
}

/// Readdresses a generated server reply to the translated address and port
/// the server saw.
fn readdress(data: &[u8], port: u16) -> Vec<u8> {
    let mut pkt = PacketBuffer::parse(data.to_vec(), LinkType::RawIp).expect("generated packet");
    let daddr = lookup_field("ip-daddr").expect("registered field");
    let dport = lookup_field("tcp-dport").expect("registered field");
    write_field(&mut pkt, &daddr, &FieldValue::Int(u64::from(u32::from(NAT_ADDR)))).expect("ipv4 field");
    write_field(&mut pkt, &dport, &FieldValue::Int(u64::from(port))).expect("tcp field");
    fix_checksums(&mut pkt);
    pkt.into_bytes()
}

/// Drives client and server sides of every flow through the NAT rule.
/// Server replies need the translated port, so the pending vector is run
/// through the pipeline whenever a reply for a not yet translated flow
/// comes up.
fn run_nat(engine: &mut Engine, s: &Scenario) -> (RunReport, Vec<Check>) {
    let client_net = u32::from(s.traffic.client_net) & 0xffff_ff00;
    let per_flow = s.traffic.packets_per_flow();
    let (lo, hi) = s.pipeline.conn.shuffle_range;
    let mut st = NatState::default();
    let mut batch: Vec<(FlowKey, bool, Frame)> = Vec::new();
    engine.pipeline_mut().reset_stats();

    let flush = |engine: &mut Engine, batch: &mut Vec<(FlowKey, bool, Frame)>, st: &mut NatState| {
        if batch.is_empty() {
            return;
        }
        let items = std::mem::take(batch);
        let frames: Vec<Frame> = items.iter().map(|(_, _, f)| f.clone()).collect();
        let outputs = engine.process(frames);
        for ((key, up, _), out) in items.into_iter().zip(outputs) {
            let Some(pkt) = out.packet else {
                st.problem(format!("{key:?} dropped: {:?}", out.disposition));
                continue;
            };
            if !verify_checksums(pkt.bytes()) {
                st.checksum_failures += 1;
            }
            let got = tuple(pkt.bytes());
            if up {
                st.forward += 1;
                let port = got.1;
                let in_range = u64::from(port) >= lo && u64::from(port) <= hi;
                let rewritten = out.disposition == Disposition::Rewritten;
                let consistent = match st.mapping.get(&key) {
                    Some(p) => *p == port,
                    None => {
                        if !st.live_ports.insert(port) {
                            st.collisions += 1;
                        }
                        st.mapping.insert(key, port);
                        true
                    }
                };
                if got.0 == NAT_ADDR && got.2 == key.2 && got.3 == key.3 && in_range && consistent && rewritten {
                    st.forward_ok += 1;
                } else {
                    st.problem(format!("forward {key:?} left as {got:?}"));
                }
            } else {
                st.reverse += 1;
                let want = (key.2, key.3, key.0, key.1);
                if got == want {
                    st.reverse_ok += 1;
                } else {
                    st.problem(format!("reply for {key:?} restored to {got:?}"));
                }
            }
            let n = st.seen.entry(key).or_insert(0);
            *n += 1;
            if *n == per_flow {
                if let Some(p) = st.mapping.get(&key) {
                    st.live_ports.remove(p);
                }
            }
        }
    };

    let v = s.pipeline.vector_size * s.pipeline.workers.max(1);
    for mut frame in generate_traffic(&s.traffic, s.seed) {
        let t = tuple(&frame.data);
        let up = u32::from(t.0) & 0xffff_ff00 == client_net;
        let key = if up { t } else { (t.2, t.3, t.0, t.1) };
        if !up {
            if !st.mapping.contains_key(&key) {
                flush(engine, &mut batch, &mut st);
            }
            match st.mapping.get(&key) {
                Some(port) => frame.data = readdress(&frame.data, *port),
                None => st.unmapped_replies += 1,
            }
        }
        batch.push((key, up, frame));
        if batch.len() >= v {
            flush(engine, &mut batch, &mut st);
        }
    }
    flush(engine, &mut batch, &mut st);

    let run = engine.pipeline().report();
    let detail = |ok: u64, all: u64| match &st.first_problem {
        Some(p) => format!("{ok} of {all}; first problem: {p}"),
        None => format!("{ok} of {all}"),
    };
    let checks = vec![
        Check::new(
            "forward translation",
            st.forward_ok == st.forward && st.forward > 0,
            detail(st.forward_ok, st.forward),
        ),
        Check::new(
            "reverse mapping",
            st.reverse_ok == st.reverse && st.reverse > 0 && st.unmapped_replies == 0,
            detail(st.reverse_ok, st.reverse),
        ),
        Check::new(
            "checksums",
            st.checksum_failures == 0,
            format!("{} packets failed verification", st.checksum_failures),
        ),
        Check::new(
            "distinct ports",
            st.collisions == 0,
            format!(
                "{} flows, {} port collisions among live flows",
                st.mapping.len(),
                st.collisions
            ),
        ),
    ];
    (run, checks)
}
