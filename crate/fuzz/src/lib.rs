// SPDX-License-Identifier: Apache-2.0

//! Bodies of the fuzz targets. Each takes arbitrary bytes, must not panic,
//! and asserts the invariants that hold for whatever the input decodes to.

use std::io::Cursor;
use std::time::Duration;

use mmb::engine::Engine;
use mmb::packet::craft::{self, Ipv4Spec, TcpSpec};
use mmb::packet::{
    checksums_valid, fix_checksums, parse_tcp_options, read_field, registry, walk_options, LinkType, PacketBuffer,
    CLASSIFY_SPAN,
};
use mmb::pcap::{PcapReader, PcapWriter};
use mmb::pipeline::{Disposition, Frame, PipelineConfig};
use mmb::rules::parse_command;

const RULES: [&str; 5] = [
    "mmb add ip-proto tcp tcp-syn mod ip-ttl 9",
    "mmb add tcp-opt-timestamp strip ! tcp-opt-mss strip ! tcp-opt-wscale",
    "mmb add-stateful ip-proto tcp tcp-syn shuffle tcp-sport mod ip-saddr 200.0.0.1",
    "mmb add ip-proto udp udp-dport 53 drop",
    "mmb add ip-proto tcp add tcp-opt-sackp",
];

/// First byte picks the link type, the rest is the frame.
pub fn parse_packet(data: &[u8]) {
    let Some((first, frame)) = data.split_first() else {
        return;
    };
    let link = if first & 1 == 0 {
        LinkType::RawIp
    } else {
        LinkType::Ethernet
    };
    let Ok(pkt) = PacketBuffer::parse(frame.to_vec(), link) else {
        return;
    };
    let mut view = [0u8; CLASSIFY_SPAN];
    pkt.classify_view(&mut view);
    let _ = pkt.five_tuple();
    if let Ok(opts) = parse_tcp_options(&pkt) {
        let end = pkt.l4_offset() + pkt.tcp_header_len().unwrap_or(20);
        assert!(opts.iter().all(|o| o.value_offset + o.value_len() <= end));
    }
    for fd in registry() {
        let _ = read_field(&pkt, fd);
    }
    let mut fixed = pkt.clone();
    fix_checksums(&mut fixed);
    assert!(checksums_valid(&fixed));
    if checksums_valid(&pkt) {
        assert_eq!(fixed.bytes(), pkt.bytes());
    }
    assert_eq!(pkt.into_bytes(), frame);
}

/// Any text; accepted commands must print back to the same command.
pub fn parse_command_text(data: &[u8]) {
    let line = String::from_utf8_lossy(data);
    match parse_command(&line) {
        Ok(cmd) => assert_eq!(parse_command(&cmd.to_string()), Ok(cmd)),
        Err(e) => assert!(e.position().is_none_or(|p| p <= line.len())),
    }
}

/// Raw option bytes, walked directly and then carried in a SYN through the
/// option-editing rules.
pub fn tcp_options(data: &[u8]) {
    if let Ok(views) = walk_options(data, 0, data.len()) {
        assert!(views.iter().all(|v| v.value_offset + v.value_len() <= data.len()));
    }
    let opts = &data[..data.len().min(40)];
    let spec = TcpSpec {
        flags: 0x02,
        options: opts.to_vec(),
        ..TcpSpec::default()
    };
    let Ok(pkt) = craft::tcp(&Ipv4Spec::default(), &spec, b"payload") else {
        return;
    };
    let well_formed = parse_tcp_options(&pkt).is_ok();
    let mut engine = Engine::new(PipelineConfig::default());
    for r in RULES {
        engine.execute(r).expect("fixed rule");
    }
    let out = engine.process(vec![Frame::raw(pkt.into_bytes(), Duration::ZERO)]);
    if let Some(p) = &out[0].packet {
        assert!(checksums_valid(p));
        let reparsed = PacketBuffer::parse(p.bytes().to_vec(), LinkType::RawIp).expect("emitted packet parses");
        if well_formed {
            assert!(parse_tcp_options(&reparsed).is_ok());
        }
    }
}

/// A capture file; whatever reads must write back byte for byte.
pub fn pcap_reader(data: &[u8]) {
    let Ok(reader) = PcapReader::new(Cursor::new(data)) else {
        return;
    };
    let header = *reader.header();
    let records: Vec<_> = reader.take(256).map_while(Result::ok).collect();
    let mut w = PcapWriter::new(Vec::new(), header).expect("vec write");
    for r in &records {
        w.write_record(r).expect("vec write");
    }
    let written = w.into_inner();
    assert_eq!(&written[..], &data[..written.len()]);
}

/// Length-prefixed frames through an engine with a few rules.
pub fn pipeline(data: &[u8]) {
    let mut frames = Vec::new();
    let mut rest = data;
    while let Some((&n, tail)) = rest.split_first() {
        let n = usize::from(n).min(tail.len());
        frames.push(Frame::raw(
            tail[..n].to_vec(),
            Duration::from_millis(frames.len() as u64),
        ));
        rest = &tail[n..];
    }
    let inputs: Vec<Vec<u8>> = frames.iter().map(|f| f.data.clone()).collect();
    let mut engine = Engine::new(PipelineConfig {
        vector_size: 4,
        ..PipelineConfig::default()
    });
    for r in RULES {
        engine.execute(r).expect("fixed rule");
    }
    let out = engine.process(frames);
    assert_eq!(out.len(), inputs.len());
    for (o, input) in out.iter().zip(&inputs) {
        assert_eq!(o.packet.is_some(), !matches!(o.disposition, Disposition::Drop(_)));
        let Some(p) = &o.packet else {
            continue;
        };
        if o.disposition == Disposition::Forward {
            assert_eq!(p.bytes(), &input[..]);
        }
        let before = PacketBuffer::parse(input.clone(), LinkType::RawIp).expect("forwarded input parses");
        if p.bytes() != input && checksums_valid(&before) {
            assert!(checksums_valid(p));
        }
    }
}
