// SPDX-License-Identifier: Apache-2.0

//! Control plane: the rule store, snapshot publication and command
//! execution, tied to a pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::classifier::Classifier;
use crate::packet::PacketBuffer;
use crate::pipeline::{Frame, Output, Pipeline, PipelineConfig, RunReport, Snapshot, SnapshotCell, StreamError};
use crate::rewrite::{compile_targets, ProgramSet};
use crate::rules::{parse_command, validate_rule, Command, ListTarget, Rule, RuleDef, RuleError, RuleId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error("no rule with id {0}")]
    NoSuchRule(u64),
}

/// Installed rules plus their compiled forms. Changes are collected and
/// published as one snapshot on demand, so loading many rules costs one
/// publication.
#[derive(Debug)]
pub struct RuleStore {
    next_id: u64,
    rules: BTreeMap<RuleId, Rule>,
    classifier: Classifier,
    programs: ProgramSet,
    enabled: bool,
    shuffle_range: (u64, u64),
    version: u64,
    dirty: bool,
}

impl RuleStore {
    pub fn new(shuffle_range: (u64, u64)) -> Self {
        RuleStore {
            next_id: 1,
            rules: BTreeMap::new(),
            classifier: Classifier::new(),
            programs: ProgramSet::new(),
            enabled: true,
            shuffle_range,
            version: 0,
            dirty: true,
        }
    }

    pub fn add(&mut self, def: RuleDef) -> Result<RuleId, RuleError> {
        let id = RuleId(self.next_id);
        let rule = validate_rule(def, id)?;
        self.next_id += 1;
        self.classifier.insert(&rule);
        self.programs
            .insert(id, Arc::new(compile_targets(&rule, self.shuffle_range)));
        self.rules.insert(id, rule);
        self.dirty = true;
        Ok(id)
    }

    pub fn remove(&mut self, id: RuleId) -> bool {
        if self.rules.remove(&id).is_none() {
            return false;
        }
        self.classifier.remove(id);
        self.programs.remove(&id);
        self.dirty = true;
        true
    }

    pub fn flush(&mut self) -> usize {
        let n = self.rules.len();
        self.rules.clear();
        self.classifier = Classifier::new();
        self.programs.clear();
        self.dirty = true;
        n
    }

    pub fn set_enabled(&mut self, on: bool) {
        self.enabled = on;
        self.dirty = true;
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.values()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    /// Builds a fresh snapshot if anything changed since the last one.
    pub fn publish(&mut self) -> Option<Snapshot> {
        if !self.dirty {
            return None;
        }
        self.dirty = false;
        self.version += 1;
        Some(Snapshot {
            version: self.version,
            enabled: self.enabled,
            classifier: self.classifier.clone(),
            programs: self.programs.clone(),
        })
    }
}

/// One `mmb` instance: rules, published snapshot and the packet pipeline.
#[derive(Debug)]
pub struct Engine {
    store: RuleStore,
    cell: Arc<SnapshotCell>,
    pipeline: Pipeline,
}

impl Engine {
    pub fn new(config: PipelineConfig) -> Self {
        let mut store = RuleStore::new(config.conn.shuffle_range);
        let cell = Arc::new(SnapshotCell::new(store.publish().expect("fresh store is dirty")));
        Engine {
            store,
            cell,
            pipeline: Pipeline::new(config),
        }
    }

    pub fn store(&self) -> &RuleStore {
        &self.store
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn pipeline_mut(&mut self) -> &mut Pipeline {
        &mut self.pipeline
    }

    /// The cell workers read snapshots from.
    pub fn snapshot_cell(&self) -> Arc<SnapshotCell> {
        Arc::clone(&self.cell)
    }

    /// Publishes pending rule changes and returns the current snapshot.
    pub fn publish(&mut self) -> Arc<Snapshot> {
        if let Some(s) = self.store.publish() {
            self.cell.store(Arc::new(s));
        }
        self.cell.load()
    }

    /// Parses and applies one command line.
    pub fn execute(&mut self, line: &str) -> Result<String, EngineError> {
        let cmd = parse_command(line)?;
        self.apply(cmd)
    }

    pub fn apply(&mut self, cmd: Command) -> Result<String, EngineError> {
        match cmd {
            Command::Add(def) => {
                let id = self.store.add(def)?;
                Ok(format!("rule {id} added"))
            }
            Command::Del(n) => {
                let id = RuleId(n);
                if !self.store.remove(id) {
                    return Err(EngineError::NoSuchRule(n));
                }
                self.pipeline.remove_rule(id);
                Ok(format!("rule {id} deleted"))
            }
            Command::Flush => {
                let n = self.store.flush();
                self.pipeline.clear();
                Ok(format!("{n} rules flushed"))
            }
            Command::Enable => {
                self.store.set_enabled(true);
                Ok("enabled".into())
            }
            Command::Disable => {
                self.store.set_enabled(false);
                Ok("disabled".into())
            }
            Command::List(what) => Ok(self.list(what)),
        }
    }

    pub fn list(&self, what: ListTarget) -> String {
        let mut out = String::new();
        match what {
            ListTarget::Rules => {
                if !self.store.enabled() {
                    out.push_str("(disabled)\n");
                }
                for r in self.store.rules() {
                    let verb = if r.def.stateful { "add-stateful" } else { "add" };
                    let path = if r.fast_path_eligible { "fast" } else { "slow" };
                    let _ = writeln!(
                        out,
                        "{}: mmb {verb} {} [{path}] hits {}",
                        r.id,
                        r.def,
                        self.pipeline.hits(r.id)
                    );
                }
            }
            ListTarget::Tables => {
                let c = self.store.classifier();
                for (i, t) in c.table_stats().iter().enumerate() {
                    let _ = writeln!(out, "table {i}: {t}");
                }
                let _ = writeln!(out, "slow rules {}", c.slow_rule_count());
            }
            ListTarget::Connections => {
                let now = self.pipeline.clock();
                let mut lines: Vec<String> = self.pipeline.conn_tables().flat_map(|t| t.describe(now)).collect();
                lines.sort();
                for l in lines {
                    out.push_str(&l);
                    out.push('\n');
                }
            }
        }
        out
    }

    /// Publishes pending changes, then runs frames through the pipeline.
    pub fn process(&mut self, frames: Vec<Frame>) -> Vec<Output> {
        let snap = self.publish();
        self.pipeline.process(&snap, frames)
    }

    pub fn run_stream<I, E, S, F>(&mut self, source: I, sink: S) -> Result<RunReport, StreamError>
    where
        I: IntoIterator<Item = Result<Frame, E>>,
        E: std::fmt::Display,
        S: FnMut(&PacketBuffer) -> Result<(), F>,
        F: std::fmt::Display,
    {
        self.publish();
        let cell = Arc::clone(&self.cell);
        self.pipeline.run_stream(&cell, source, sink)
    }
}
