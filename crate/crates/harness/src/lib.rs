// SPDX-License-Identifier: Apache-2.0

//! Shell, traffic and rule generators, benchmark scenarios and a reference
//! evaluator for the `mmb` engine.

pub mod corpus;
pub mod reference;
pub mod repl;
pub mod replay;
pub mod rulegen;
pub mod scenario;
pub mod traffic;
