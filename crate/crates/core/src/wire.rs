//! Synchrophasor data-frame codec.
//!
//! Only the data-frame subset streamed by the PMU emulators is supported.
//! All multi-byte fields are big-endian.
//!
//! | offset        | size | field     | notes                                   |
//! |---------------|------|-----------|-----------------------------------------|
//! | 0             | 2    | SYNC      | `0xAA01` (data frame, version 1)        |
//! | 2             | 2    | FRAMESIZE | total bytes including CHK               |
//! | 4             | 2    | IDCODE    | stream identifier                       |
//! | 6             | 4    | SOC       | seconds since epoch                     |
//! | 10            | 4    | FRACSEC   | fraction ticks, time base 1 000 000     |
//! | 14            | 2    | STAT      | status bitfield                         |
//! | 16            | 8·n  | PHASORS   | per phasor: real f32, imaginary f32     |
//! | 16 + 8n       | 4    | FREQ      | f32, Hz                                 |
//! | 20 + 8n       | 4    | DFREQ     | f32, ROCOF in Hz/s                      |
//! | 24 + 8n       | 2    | CHK       | CRC-CCITT over bytes `0 .. 24 + 8n`     |
//!
//! The CRC is CRC-16/CCITT-FALSE: polynomial `0x1021`, initial value
//! `0xFFFF`, no reflection, no final xor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phasor::Phasor;
use crate::time::{GpsTimestamp, TIME_BASE};
use crate::Complex64;

pub const SYNC_DATA_FRAME: u16 = 0xAA01;
pub const HEADER_LEN: usize = 16;
pub const PHASOR_LEN: usize = 8;
/// FREQ + DFREQ.
pub const TRAILER_LEN: usize = 8;
pub const CHK_LEN: usize = 2;
pub const MAX_PHASORS: usize = 64;
pub const MIN_FRAME_LEN: usize = HEADER_LEN + TRAILER_LEN + CHK_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("too many phasors: {0} (max {MAX_PHASORS})")]
    TooManyPhasors(usize),
    #[error("non-finite value in field `{0}`")]
    NonFinite(&'static str),
    #[error("timestamp not on the {TIME_BASE} tick time base")]
    TimeBase,
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bad sync word {0:#06x}")]
    BadSync(u16),
    #[error("invalid FRAMESIZE {0}")]
    BadFrameSize(u16),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("CRC mismatch: frame carries {carried:#06x}, computed {computed:#06x}")]
    CrcMismatch { carried: u16, computed: u16 },
    #[error("FRACSEC {0} not below the time base")]
    BadFraction(u32),
}

/// STAT word. Bit layout follows the usual synchrophasor data-frame STAT:
/// bits 15–14 data error, 13 PMU sync lost, 12 sorted by arrival,
/// 11 PMU trigger, 10 configuration change, 9 data modified,
/// 8–6 time quality, 5–4 unlocked time, 3–0 trigger reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Status(pub u16);

impl Status {
    pub const OK: Status = Status(0);

    pub fn data_error(self) -> u8 {
        (self.0 >> 14) as u8 & 0b11
    }
    pub fn data_valid(self) -> bool {
        self.data_error() == 0
    }
    pub fn sync_lost(self) -> bool {
        self.0 & (1 << 13) != 0
    }
    pub fn sorted_by_arrival(self) -> bool {
        self.0 & (1 << 12) != 0
    }
    pub fn trigger(self) -> bool {
        self.0 & (1 << 11) != 0
    }
    pub fn config_change(self) -> bool {
        self.0 & (1 << 10) != 0
    }
    pub fn data_modified(self) -> bool {
        self.0 & (1 << 9) != 0
    }
    pub fn time_quality(self) -> u8 {
        (self.0 >> 6) as u8 & 0b111
    }
    pub fn unlocked_time(self) -> u8 {
        (self.0 >> 4) as u8 & 0b11
    }
    pub fn trigger_reason(self) -> u8 {
        self.0 as u8 & 0b1111
    }
}

/// One timestamped synchrophasor data frame.
///
/// Phasors are polar in memory and rectangular `f32` pairs on the wire, so a
/// frame is only bit-stable after one pass through the codec; see
/// [`PmuDataFrame::canonical`].
#[derive(Debug, Clone, PartialEq)]
pub struct PmuDataFrame {
    pub idcode: u16,
    pub timestamp: GpsTimestamp,
    pub status: Status,
    pub phasors: Vec<Phasor>,
    pub freq: f64,
    pub rocof: f64,
}

impl PmuDataFrame {
    /// The frame as the decoder would reproduce it.
    pub fn canonical(&self) -> Result<PmuDataFrame, WireError> {
        decode_frame(&encode_frame(self)?)
    }

    pub fn wire_len(&self) -> usize {
        frame_size(self.phasors.len())
    }
}

/// Encoded length of a data frame carrying `n_phasors` phasors.
pub const fn frame_size(n_phasors: usize) -> usize {
    HEADER_LEN + PHASOR_LEN * n_phasors + TRAILER_LEN + CHK_LEN
}

const CRC_TABLE: [u16; 256] = build_crc_table();

const fn build_crc_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// CRC-16/CCITT-FALSE.
pub fn crc_ccitt(bytes: &[u8]) -> u16 {
    bytes.iter().fold(0xFFFF, |crc, &b| {
        (crc << 8) ^ CRC_TABLE[((crc >> 8) as u8 ^ b) as usize]
    })
}

fn finite_f32(value: f64, field: &'static str) -> Result<f32, WireError> {
    let narrowed = value as f32;
    if value.is_finite() && narrowed.is_finite() {
        Ok(narrowed)
    } else {
        Err(WireError::NonFinite(field))
    }
}

pub fn encode_frame(frame: &PmuDataFrame) -> Result<Vec<u8>, WireError> {
    let n = frame.phasors.len();
    if n > MAX_PHASORS {
        return Err(WireError::TooManyPhasors(n));
    }
    let ts = &frame.timestamp;
    if ts.time_base != TIME_BASE {
        return Err(WireError::TimeBase);
    }
    if ts.frac >= TIME_BASE {
        return Err(WireError::BadFraction(ts.frac));
    }
    let size = frame_size(n);
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(&SYNC_DATA_FRAME.to_be_bytes());
    out.extend_from_slice(&(size as u16).to_be_bytes());
    out.extend_from_slice(&frame.idcode.to_be_bytes());
    out.extend_from_slice(&ts.soc.to_be_bytes());
    out.extend_from_slice(&ts.frac.to_be_bytes());
    out.extend_from_slice(&frame.status.0.to_be_bytes());
    for p in &frame.phasors {
        if !p.is_finite() {
            return Err(WireError::NonFinite("phasor"));
        }
        let z = p.to_rect();
        out.extend_from_slice(&finite_f32(z.re, "phasor")?.to_be_bytes());
        out.extend_from_slice(&finite_f32(z.im, "phasor")?.to_be_bytes());
    }
    out.extend_from_slice(&finite_f32(frame.freq, "freq")?.to_be_bytes());
    out.extend_from_slice(&finite_f32(frame.rocof, "rocof")?.to_be_bytes());
    let chk = crc_ccitt(&out);
    out.extend_from_slice(&chk.to_be_bytes());
    debug_assert_eq!(out.len(), size);
    Ok(out)
}

fn be_u16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn be_f32(b: &[u8], at: usize) -> f32 {
    f32::from_bits(be_u32(b, at))
}

/// Validates SYNC and FRAMESIZE at the start of `buf` and returns the frame
/// length, or `None` while fewer than four bytes are buffered. Used by stream
/// readers to delimit frames.
pub fn peek_frame_len(buf: &[u8]) -> Result<Option<usize>, WireError> {
    if buf.len() < 2 {
        return Ok(None);
    }
    let sync = be_u16(buf, 0);
    if sync != SYNC_DATA_FRAME {
        return Err(WireError::BadSync(sync));
    }
    if buf.len() < 4 {
        return Ok(None);
    }
    let size = be_u16(buf, 2);
    let len = size as usize;
    if len < MIN_FRAME_LEN
        || len > frame_size(MAX_PHASORS)
        || (len - MIN_FRAME_LEN) % PHASOR_LEN != 0
    {
        return Err(WireError::BadFrameSize(size));
    }
    Ok(Some(len))
}

/// Decodes exactly one frame. Total over arbitrary input: malformed bytes
/// yield an error, never a panic.
pub fn decode_frame(bytes: &[u8]) -> Result<PmuDataFrame, WireError> {
    let len = match peek_frame_len(bytes)? {
        Some(len) => len,
        None => {
            return Err(WireError::Truncated {
                needed: 4,
                have: bytes.len(),
            })
        }
    };
    if bytes.len() < len {
        return Err(WireError::Truncated {
            needed: len,
            have: bytes.len(),
        });
    }
    if bytes.len() > len {
        return Err(WireError::TrailingBytes(bytes.len() - len));
    }
    let body = &bytes[..len - CHK_LEN];
    let carried = be_u16(bytes, len - CHK_LEN);
    let computed = crc_ccitt(body);
    if carried != computed {
        return Err(WireError::CrcMismatch { carried, computed });
    }

    let frac = be_u32(bytes, 10);
    if frac >= TIME_BASE {
        return Err(WireError::BadFraction(frac));
    }
    let n = (len - MIN_FRAME_LEN) / PHASOR_LEN;
    let mut phasors = Vec::with_capacity(n);
    for i in 0..n {
        let at = HEADER_LEN + i * PHASOR_LEN;
        let re = be_f32(bytes, at);
        let im = be_f32(bytes, at + 4);
        if !re.is_finite() || !im.is_finite() {
            return Err(WireError::NonFinite("phasor"));
        }
        phasors.push(Phasor::from_rect(Complex64::new(re as f64, im as f64)));
    }
    let trailer = HEADER_LEN + n * PHASOR_LEN;
    let freq = be_f32(bytes, trailer);
    let rocof = be_f32(bytes, trailer + 4);
    if !freq.is_finite() {
        return Err(WireError::NonFinite("freq"));
    }
    if !rocof.is_finite() {
        return Err(WireError::NonFinite("rocof"));
    }
    Ok(PmuDataFrame {
        idcode: be_u16(bytes, 4),
        timestamp: GpsTimestamp::new(be_u32(bytes, 6), frac),
        status: Status(be_u16(bytes, 14)),
        phasors,
        freq: freq as f64,
        rocof: rocof as f64,
    })
}
