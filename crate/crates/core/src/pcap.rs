// SPDX-License-Identifier: Apache-2.0

//! Classic libpcap file reading and writing.
//!
//! Readers accept both byte orders and both the microsecond (`0xa1b2c3d4`)
//! and nanosecond (`0xa1b23c4d`) magics. Writers reproduce the header and
//! byte order they are given, so a read/write cycle without modifications is
//! byte-identical.

use std::io::{self, Read, Write};
use std::time::Duration;

use thiserror::Error;

use crate::packet::LinkType;

pub const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
pub const MAGIC_NANOS: u32 = 0xa1b2_3c4d;

/// Records larger than this are rejected rather than allocated.
pub const MAX_RECORD_LEN: u32 = 256 * 1024;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad pcap magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported pcap link type {0}")]
    UnsupportedLinkType(u32),
    #[error("truncated pcap {0}")]
    Truncated(&'static str),
    #[error("pcap record of {0} bytes exceeds the supported maximum")]
    RecordTooLarge(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcapHeader {
    pub big_endian: bool,
    pub nanos: bool,
    pub version_major: u16,
    pub version_minor: u16,
    pub thiszone: i32,
    pub sigfigs: u32,
    pub snaplen: u32,
    pub link: LinkType,
}

impl PcapHeader {
    pub fn new(link: LinkType) -> Self {
        PcapHeader {
            big_endian: false,
            nanos: false,
            version_major: 2,
            version_minor: 4,
            thiszone: 0,
            sigfigs: 0,
            snaplen: 65535,
            link,
        }
    }

    fn u32_bytes(&self, v: u32) -> [u8; 4] {
        if self.big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        }
    }

    fn u16_bytes(&self, v: u16) -> [u8; 2] {
        if self.big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        }
    }

    fn read_u32(&self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        if self.big_endian {
            u32::from_be_bytes(a)
        } else {
            u32::from_le_bytes(a)
        }
    }

    fn read_u16(&self, b: &[u8]) -> u16 {
        let a = [b[0], b[1]];
        if self.big_endian {
            u16::from_be_bytes(a)
        } else {
            u16::from_le_bytes(a)
        }
    }

    fn encode(&self) -> [u8; 24] {
        let mut out = [0u8; 24];
        let magic = if self.nanos { MAGIC_NANOS } else { MAGIC_MICROS };
        out[0..4].copy_from_slice(&self.u32_bytes(magic));
        out[4..6].copy_from_slice(&self.u16_bytes(self.version_major));
        out[6..8].copy_from_slice(&self.u16_bytes(self.version_minor));
        out[8..12].copy_from_slice(&self.u32_bytes(self.thiszone as u32));
        out[12..16].copy_from_slice(&self.u32_bytes(self.sigfigs));
        out[16..20].copy_from_slice(&self.u32_bytes(self.snaplen));
        out[20..24].copy_from_slice(&self.u32_bytes(self.link.pcap_code()));
        out
    }

    pub fn decode(b: &[u8; 24]) -> Result<Self, PcapError> {
        let le = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let (big_endian, nanos) = match le {
            MAGIC_MICROS => (false, false),
            MAGIC_NANOS => (false, true),
            _ => match u32::from_be_bytes([b[0], b[1], b[2], b[3]]) {
                MAGIC_MICROS => (true, false),
                MAGIC_NANOS => (true, true),
                _ => return Err(PcapError::BadMagic(le)),
            },
        };
        let mut h = PcapHeader {
            big_endian,
            nanos,
            version_major: 0,
            version_minor: 0,
            thiszone: 0,
            sigfigs: 0,
            snaplen: 0,
            link: LinkType::RawIp,
        };
        h.version_major = h.read_u16(&b[4..]);
        h.version_minor = h.read_u16(&b[6..]);
        h.thiszone = h.read_u32(&b[8..]) as i32;
        h.sigfigs = h.read_u32(&b[12..]);
        h.snaplen = h.read_u32(&b[16..]);
        let code = h.read_u32(&b[20..]);
        h.link = LinkType::from_pcap(code).ok_or(PcapError::UnsupportedLinkType(code))?;
        Ok(h)
    }
}

/// One captured frame. `orig_len` is the on-the-wire length, which exceeds
/// `data.len()` when the capture was truncated by the snap length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapRecord {
    pub ts_sec: u32,
    /// Microseconds or nanoseconds, per the file header.
    pub ts_frac: u32,
    pub orig_len: u32,
    pub data: Vec<u8>,
}

impl PcapRecord {
    pub fn timestamp(&self, nanos: bool) -> Duration {
        let frac = if nanos {
            self.ts_frac
        } else {
            self.ts_frac.saturating_mul(1000)
        };
        Duration::new(u64::from(self.ts_sec), 0) + Duration::from_nanos(u64::from(frac))
    }
}

pub struct PcapReader<R> {
    inner: R,
    header: PcapHeader,
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool, PcapError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(PcapError::Truncated("record header")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut raw = [0u8; 24];
        if !read_exact_or_eof(&mut inner, &mut raw)? {
            return Err(PcapError::Truncated("file header"));
        }
        let header = PcapHeader::decode(&raw).map_err(|e| match e {
            PcapError::Truncated(_) => PcapError::Truncated("file header"),
            other => other,
        })?;
        Ok(PcapReader { inner, header })
    }

    pub fn header(&self) -> &PcapHeader {
        &self.header
    }

    pub fn next_record(&mut self) -> Result<Option<PcapRecord>, PcapError> {
        let mut raw = [0u8; 16];
        if !read_exact_or_eof(&mut self.inner, &mut raw)? {
            return Ok(None);
        }
        let h = &self.header;
        let ts_sec = h.read_u32(&raw[0..]);
        let ts_frac = h.read_u32(&raw[4..]);
        let incl_len = h.read_u32(&raw[8..]);
        let orig_len = h.read_u32(&raw[12..]);
        if incl_len > MAX_RECORD_LEN {
            return Err(PcapError::RecordTooLarge(incl_len));
        }
        let mut data = vec![0u8; incl_len as usize];
        match self.inner.read_exact(&mut data) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                return Err(PcapError::Truncated("record data"));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Some(PcapRecord {
            ts_sec,
            ts_frac,
            orig_len,
            data,
        }))
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<PcapRecord, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

pub struct PcapWriter<W: Write> {
    inner: W,
    header: PcapHeader,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W, header: PcapHeader) -> Result<Self, PcapError> {
        inner.write_all(&header.encode())?;
        Ok(PcapWriter { inner, header })
    }

    pub fn header(&self) -> &PcapHeader {
        &self.header
    }

    pub fn write_record(&mut self, rec: &PcapRecord) -> Result<(), PcapError> {
        let h = &self.header;
        let mut raw = [0u8; 16];
        raw[0..4].copy_from_slice(&h.u32_bytes(rec.ts_sec));
        raw[4..8].copy_from_slice(&h.u32_bytes(rec.ts_frac));
        raw[8..12].copy_from_slice(&h.u32_bytes(rec.data.len() as u32));
        raw[12..16].copy_from_slice(&h.u32_bytes(rec.orig_len));
        self.inner.write_all(&raw)?;
        self.inner.write_all(&rec.data)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), PcapError> {
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}
