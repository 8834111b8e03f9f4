//! DVS event streams and fixed-window frame aggregation.
//!
//! SFE1 layout: magic `SFE1`, sensor width and height (u32 LE), then
//! 9-byte records `t: u32` (µs), `x: u16`, `y: u16`, `p: u8` (0 = negative,
//! 1 = positive), all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

const MAGIC: &[u8; 4] = b"SFE1";
const HEADER: usize = 12;
const RECORD: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub t: u32,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    width: u32,
    height: u32,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates bounds and time order.
    pub fn new(width: u32, height: u32, events: Vec<Event>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            check_event(width, height, e, i.checked_sub(1).map(|j| events[j].t))
                .map_err(|m| Error::Domain(format!("event {i}: {m}")))?;
        }
        Ok(EventStream { width, height, events })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(HEADER + RECORD * self.events.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.width.to_le_bytes());
        buf.extend_from_slice(&self.height.to_le_bytes());
        for e in &self.events {
            buf.extend_from_slice(&e.t.to_le_bytes());
            buf.extend_from_slice(&e.x.to_le_bytes());
            buf.extend_from_slice(&e.y.to_le_bytes());
            buf.push(matches!(e.p, Polarity::Positive) as u8);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(Error::parse(0, "missing SFE1 header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().expect("2 bytes"));
        let (width, height) = (u32_at(4), u32_at(8));
        let body = bytes.len() - HEADER;
        if body % RECORD != 0 {
            let off = HEADER + body / RECORD * RECORD;
            return Err(Error::parse(off, format!("truncated record ({} of {RECORD} bytes)", body % RECORD)));
        }
        let mut events = Vec::with_capacity(body / RECORD);
        for i in 0..body / RECORD {
            let off = HEADER + i * RECORD;
            let p = match bytes[off + 8] {
                0 => Polarity::Negative,
                1 => Polarity::Positive,
                v => return Err(Error::parse(off + 8, format!("polarity byte {v} is neither 0 nor 1"))),
            };
            let e = Event {
                t: u32_at(off),
                x: u16_at(off + 4),
                y: u16_at(off + 6),
                p,
            };
            check_event(width, height, &e, events.last().map(|l: &Event| l.t)).map_err(|m| Error::parse(off, m))?;
            events.push(e);
        }
        Ok(EventStream { width, height, events })
    }
}

fn check_event(width: u32, height: u32, e: &Event, prev_t: Option<u32>) -> std::result::Result<(), String> {
    if u32::from(e.x) >= width || u32::from(e.y) >= height {
        return Err(format!("pixel ({}, {}) outside {width}×{height} sensor", e.x, e.y));
    }
    if let Some(p) = prev_t {
        if e.t < p {
            return Err(format!("timestamp {} precedes previous {p}", e.t));
        }
    }
    Ok(())
}

pub fn load_events(path: impl AsRef<Path>) -> Result<EventStream> {
    EventStream::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_events(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    stream.write_to(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolarityMode {
    /// Channel 0 counts positive events, channel 1 negative ones.
    TwoChannel,
    /// One channel counting all events.
    Combined,
}

impl PolarityMode {
    pub fn channels(self) -> usize {
        match self {
            PolarityMode::TwoChannel => 2,
            PolarityMode::Combined => 1,
        }
    }
}

/// Bins the window ending one microsecond after the last event.
pub fn aggregate(stream: &EventStream, t: usize, dt: u64, mode: PolarityMode) -> Result<Tensor4> {
    let end = stream.events.last().map_or(0, |e| u64::from(e.t) + 1);
    aggregate_window(stream, t, dt, end, mode)
}

/// Per-pixel event counts over `[t_end - T·dt, t_end)`, split into `T`
/// half-open slices of length `dt`.
pub fn aggregate_window(stream: &EventStream, t: usize, dt: u64, t_end: u64, mode: PolarityMode) -> Result<Tensor4> {
    if t == 0 || dt == 0 {
        return Err(Error::Domain(format!("aggregate needs T >= 1 and dt > 0, got T={t} dt={dt}")));
    }
    let (w, h) = (stream.width as usize, stream.height as usize);
    let mut out = Tensor4::zeros((t, mode.channels(), h, w));
    let span = (t as u64).saturating_mul(dt);
    let start = i128::from(t_end) - i128::from(span);
    for e in &stream.events {
        let et = i128::from(e.t);
        if et < start || et >= i128::from(t_end) {
            continue;
        }
        let slice = ((et - start) / i128::from(dt)) as usize;
        let c = match (mode, e.p) {
            (PolarityMode::TwoChannel, Polarity::Negative) => 1,
            _ => 0,
        };
        out[(slice, c, e.y as usize, e.x as usize)] += 1.0;
    }
    Ok(out)
}

/// Number of events with timestamps in `[t_end - span, t_end)`.
pub fn count_in_window(stream: &EventStream, span: u64, t_end: u64) -> usize {
    let start = t_end.saturating_sub(span);
    stream
        .events
        .iter()
        .filter(|e| u64::from(e.t) >= start && u64::from(e.t) < t_end)
        .count()
}
