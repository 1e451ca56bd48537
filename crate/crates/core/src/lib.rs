// SPDX-License-Identifier: Apache-2.0

//! A userspace middlebox: a rule language compiled into mask-based
//! classification tables, a connection table, and a mask/key rewrite stage,
//! driven by a batched packet pipeline.

pub mod classifier;
pub mod conntrack;
pub mod engine;
pub mod packet;
pub mod pcap;
pub mod pipeline;
pub mod rewrite;
pub mod rules;
