// SPDX-License-Identifier: Apache-2.0

//! Runs a pcap capture through an engine and writes what it forwards.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::rc::Rc;

use mmb::engine::Engine;
use mmb::packet::PacketBuffer;
use mmb::pcap::{PcapError, PcapReader, PcapRecord, PcapWriter};
use mmb::pipeline::{Frame, RunReport, StreamError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

/// Replays every record of `input`. Forwarded packets go to `output` with
/// the input's file header, their original timestamps and, for packets
/// whose length did not change, their original capture length.
pub fn replay_pcap<R: Read, W: Write>(
    engine: &mut Engine,
    input: R,
    output: Option<W>,
) -> Result<RunReport, ReplayError> {
    let reader = PcapReader::new(input)?;
    let header = *reader.header();
    let mut writer = output.map(|w| PcapWriter::new(w, header)).transpose()?;
    // Per input record: trace id, captured length and on-the-wire length.
    let lengths: Rc<RefCell<VecDeque<(u64, usize, u32)>>> = Rc::default();
    let feed = Rc::clone(&lengths);
    let mut next = 0u64;
    let source = reader.map(move |rec| {
        rec.map(|r| {
            feed.borrow_mut().push_back((next, r.data.len(), r.orig_len));
            next += 1;
            Frame {
                timestamp: r.timestamp(header.nanos),
                data: r.data,
                link: header.link,
            }
        })
    });
    let report = engine.run_stream(source, |pkt: &PacketBuffer| -> Result<(), PcapError> {
        let mut q = lengths.borrow_mut();
        while q.front().is_some_and(|(i, _, _)| *i < pkt.trace_id()) {
            q.pop_front();
        }
        let (_, caplen, orig) = q.pop_front().unwrap_or((0, 0, 0));
        let Some(w) = writer.as_mut() else {
            return Ok(());
        };
        let len = pkt.bytes().len();
        let ts = pkt.timestamp();
        let frac = if header.nanos {
            ts.subsec_nanos()
        } else {
            ts.subsec_micros()
        };
        w.write_record(&PcapRecord {
            ts_sec: ts.as_secs() as u32,
            ts_frac: frac,
            orig_len: if len == caplen { orig } else { len as u32 },
            data: pkt.bytes().to_vec(),
        })
    })?;
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    Ok(report)
}
