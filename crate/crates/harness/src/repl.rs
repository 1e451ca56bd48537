// SPDX-License-Identifier: Apache-2.0

//! The interactive `mmb` shell.

use std::io::{self, BufRead, Write};

use mmb::engine::{Engine, EngineError};

pub const PROMPT: &str = "mmb> ";

const HELP: &str = "\
commands:
  mmb add MATCH... TARGET...            add a stateless rule
  mmb add-stateful MATCH... TARGET...   add a rule that tracks connections
  mmb del ID                            remove a rule
  mmb list [rules|tables|connections]
  mmb flush | mmb enable | mmb disable
  help | quit
";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub commands: usize,
    pub errors: usize,
}

/// Renders an engine error, with a caret under the offending byte when the
/// error has a position. `indent` is the width of whatever preceded the
/// command on its line.
pub fn render_error(err: &EngineError, indent: usize) -> String {
    let pos = match err {
        EngineError::Rule(r) => r.position(),
        EngineError::NoSuchRule(_) => None,
    };
    match pos {
        Some(p) => format!("{}^\nerror: {err}\n", " ".repeat(indent + p)),
        None => format!("error: {err}\n"),
    }
}

/// Reads commands from `input` until end of input or `quit`. With `echo`,
/// each command is written after the prompt, so a replayed script yields a
/// readable transcript. Bad commands are reported and the session goes on.
pub fn run_session<R: BufRead, W: Write>(
    engine: &mut Engine,
    input: R,
    out: &mut W,
    echo: bool,
) -> io::Result<SessionStats> {
    let mut stats = SessionStats::default();
    let mut lines = input.lines();
    loop {
        out.write_all(PROMPT.as_bytes())?;
        out.flush()?;
        let Some(line) = lines.next().transpose()? else {
            if echo {
                out.write_all(b"\n")?;
            }
            break;
        };
        if echo {
            writeln!(out, "{line}")?;
        }
        let cmd = line.trim();
        if cmd.is_empty() || cmd.starts_with('#') {
            continue;
        }
        match cmd {
            "quit" | "exit" => break,
            "help" => {
                out.write_all(HELP.as_bytes())?;
                continue;
            }
            _ => {}
        }
        stats.commands += 1;
        let lead = line.len() - line.trim_start().len();
        match engine.execute(cmd) {
            Ok(text) => {
                out.write_all(text.as_bytes())?;
                if !text.is_empty() && !text.ends_with('\n') {
                    out.write_all(b"\n")?;
                }
            }
            Err(e) => {
                stats.errors += 1;
                out.write_all(render_error(&e, PROMPT.len() + lead).as_bytes())?;
            }
        }
    }
    Ok(stats)
}

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {source}")]
pub struct ScriptError {
    pub line: usize,
    #[source]
    pub source: EngineError,
}

/// Applies a rules file: one command per line, blank lines and `#`
/// comments ignored. Stops at the first failing command.
pub fn load_script(engine: &mut Engine, text: &str) -> Result<usize, ScriptError> {
    let mut applied = 0;
    for (i, line) in text.lines().enumerate() {
        let cmd = line.trim();
        if cmd.is_empty() || cmd.starts_with('#') {
            continue;
        }
        engine
            .execute(cmd)
            .map_err(|source| ScriptError { line: i + 1, source })?;
        applied += 1;
    }
    Ok(applied)
}
