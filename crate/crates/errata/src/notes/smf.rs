//! Minimal Standard MIDI File reader (formats 0 and 1).
//!
//! Only the events the pipeline needs are interpreted: note-on, note-off
//! (including note-on with velocity 0), and set-tempo. Everything else is
//! skipped by length. Ticks become seconds through the tempo map, starting
//! from the MIDI default of 500000 microseconds per quarter note.

use super::{NoteError, NoteEvent, NoteTrack};

const DEFAULT_TEMPO: u32 = 500_000; // microseconds per quarter note

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    Tempo(u32),
    NoteOff(u8),
    NoteOn(u8),
}

impl EventKind {
    // Same-tick ordering: tempo applies first, offs close before ons start.
    fn priority(self) -> u8 {
        match self {
            EventKind::Tempo(_) => 0,
            EventKind::NoteOff(_) => 1,
            EventKind::NoteOn(_) => 2,
        }
    }

    fn pitch(self) -> u8 {
        match self {
            EventKind::Tempo(_) => 0,
            EventKind::NoteOff(p) | EventKind::NoteOn(p) => p,
        }
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], NoteError> {
        if self.remaining() < n {
            return Err(NoteError::SmfFormat("truncated chunk".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NoteError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NoteError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, NoteError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn varint(&mut self) -> Result<u32, NoteError> {
        let mut value: u32 = 0;
        for _ in 0..4 {
            let byte = self.u8()?;
            value = (value << 7) | u32::from(byte & 0x7f);
            if byte & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(NoteError::SmfFormat("variable-length quantity too long".into()))
    }
}

/// Parse a format 0 or 1 Standard MIDI File into a single merged track.
///
/// Note-ons with velocity 0 count as note-offs; unmatched note-ons are closed
/// at the end of the file. Format-1 tracks are merged by absolute tick before
/// the tempo walk, so track interleaving does not affect the result.
pub fn parse_smf(bytes: &[u8]) -> Result<NoteTrack, NoteError> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4)? != b"MThd" {
        return Err(NoteError::SmfFormat("bad header magic".into()));
    }
    let header_len = cur.u32()? as usize;
    if header_len < 6 {
        return Err(NoteError::SmfFormat("header too short".into()));
    }
    let header = Cursor::new(cur.take(header_len)?);
    let mut header = header;
    let format = header.u16()?;
    if format > 1 {
        return Err(NoteError::SmfFormat(format!("unsupported format {format}")));
    }
    let ntrks = header.u16()?;
    let division = header.u16()?;
    if division & 0x8000 != 0 {
        return Err(NoteError::SmfFormat("SMPTE division not supported".into()));
    }
    if division == 0 {
        return Err(NoteError::SmfFormat("zero ticks per quarter".into()));
    }

    let mut events: Vec<(u64, EventKind)> = Vec::new();
    let mut end_tick: u64 = 0;
    for _ in 0..ntrks {
        if cur.take(4)? != b"MTrk" {
            return Err(NoteError::SmfFormat("bad track magic".into()));
        }
        let len = cur.u32()? as usize;
        let mut track = Cursor::new(cur.take(len)?);
        let track_end = read_track(&mut track, &mut events)?;
        end_tick = end_tick.max(track_end);
    }

    // Merge-then-sort: absolute tick, then kind priority, then pitch. The
    // result is independent of how events were interleaved across tracks.
    events.sort_by_key(|(tick, kind)| (*tick, kind.priority(), kind.pitch()));

    let tpq = f64::from(division);
    let mut tempo = DEFAULT_TEMPO;
    let mut last_tick: u64 = 0;
    let mut seconds: f64 = 0.0;
    let mut open: Vec<Vec<(f64, u8)>> = vec![Vec::new(); 128]; // FIFO per pitch
    let mut notes = Vec::new();

    let advance = |seconds: &mut f64, last_tick: &mut u64, tick: u64, tempo: u32| {
        *seconds += (tick - *last_tick) as f64 * f64::from(tempo) / (tpq * 1e6);
        *last_tick = tick;
    };

    for (tick, kind) in &events {
        advance(&mut seconds, &mut last_tick, *tick, tempo);
        match kind {
            EventKind::Tempo(t) => tempo = *t,
            EventKind::NoteOn(p) => open[*p as usize].push((seconds, *p)),
            EventKind::NoteOff(p) => {
                if !open[*p as usize].is_empty() {
                    let (onset, pitch) = open[*p as usize].remove(0);
                    if seconds > onset {
                        notes.push(NoteEvent::new(onset, seconds, pitch));
                    }
                }
            }
        }
    }
    advance(&mut seconds, &mut last_tick, end_tick, tempo);
    for fifo in &mut open {
        for (onset, pitch) in fifo.drain(..) {
            if seconds > onset {
                notes.push(NoteEvent::new(onset, seconds, pitch));
            }
        }
    }

    NoteTrack::new(notes, "")
}

/// Read one MTrk chunk, appending (abs_tick, event) pairs. Returns the tick
/// of the end-of-track marker (or the last event if the marker is missing).
fn read_track(cur: &mut Cursor, events: &mut Vec<(u64, EventKind)>) -> Result<u64, NoteError> {
    let mut tick: u64 = 0;
    let mut running_status: Option<u8> = None;
    while cur.remaining() > 0 {
        tick += u64::from(cur.varint()?);
        let mut status = cur.u8()?;
        if status < 0x80 {
            // running status: the byte we read is the first data byte
            status = running_status
                .ok_or_else(|| NoteError::SmfFormat("data byte without running status".into()))?;
            cur.pos -= 1;
        }
        match status {
            0x80..=0x8f => {
                let pitch = cur.u8()? & 0x7f;
                let _vel = cur.u8()?;
                events.push((tick, EventKind::NoteOff(pitch)));
                running_status = Some(status);
            }
            0x90..=0x9f => {
                let pitch = cur.u8()? & 0x7f;
                let vel = cur.u8()?;
                let kind = if vel == 0 { EventKind::NoteOff(pitch) } else { EventKind::NoteOn(pitch) };
                events.push((tick, kind));
                running_status = Some(status);
            }
            0xa0..=0xbf | 0xe0..=0xef => {
                cur.take(2)?;
                running_status = Some(status);
            }
            0xc0..=0xdf => {
                cur.take(1)?;
                running_status = Some(status);
            }
            0xf0 | 0xf7 => {
                let len = cur.varint()? as usize;
                cur.take(len)?;
                running_status = None;
            }
            0xff => {
                let meta_type = cur.u8()?;
                let len = cur.varint()? as usize;
                let data = cur.take(len)?;
                match meta_type {
                    0x51 => {
                        if len != 3 {
                            return Err(NoteError::SmfFormat("set-tempo length must be 3".into()));
                        }
                        let us = (u32::from(data[0]) << 16) | (u32::from(data[1]) << 8) | u32::from(data[2]);
                        if us == 0 {
                            return Err(NoteError::SmfFormat("zero tempo".into()));
                        }
                        events.push((tick, EventKind::Tempo(us)));
                    }
                    0x2f => return Ok(tick),
                    _ => {}
                }
            }
            _ => return Err(NoteError::SmfFormat(format!("unexpected status byte {status:#04x}"))),
        }
    }
    Ok(tick)
}
