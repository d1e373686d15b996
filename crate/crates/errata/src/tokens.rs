//! MIDI-like token vocabulary and codecs.
//!
//! Target sequences describe labeled note events inside one segment:
//! an onset group is `[Time, Label, On, Note]`, an offset group is
//! `[Time, Note, Off]`, and consecutive groups sharing a time bin emit the
//! `Time` token once. Prompts use the same grammar minus the label tokens
//! and the SOS/EOS wrapper. Times are quantized to 10 ms bins relative to
//! the segment start.

use crate::audio::SEGMENT_SECONDS;
use crate::notes::{ErrorLabel, NoteEvent};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

/// Width of one time bin in seconds.
pub const TIME_BIN_S: f64 = 0.01;
/// Number of time bins covering one segment (ceil of 2.145 s / 10 ms).
pub const NUM_TIME_BINS: u32 = 215;

/// Token id layout. Ranges are contiguous and disjoint.
pub mod vocab {
    use crate::notes::ErrorLabel;

    pub const PAD: u32 = 0;
    pub const SOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const TIME_BASE: u32 = 3;
    pub const NOTE_BASE: u32 = 218;
    pub const ON: u32 = 346;
    pub const OFF: u32 = 347;
    pub const LABEL_CORRECT: u32 = 348;
    pub const LABEL_MISSED: u32 = 349;
    pub const LABEL_EXTRA: u32 = 350;
    pub const SIZE: u32 = 351;

    pub fn time(bin: u32) -> u32 {
        debug_assert!(bin < super::NUM_TIME_BINS);
        TIME_BASE + bin
    }

    pub fn note(pitch: u8) -> u32 {
        NOTE_BASE + u32::from(pitch)
    }

    pub fn label(l: ErrorLabel) -> u32 {
        match l {
            ErrorLabel::Correct => LABEL_CORRECT,
            ErrorLabel::Missed => LABEL_MISSED,
            ErrorLabel::Extra => LABEL_EXTRA,
        }
    }
}

/// What a single token id means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum TokenKind {
    Pad,
    Sos,
    Eos,
    Time(u32),
    Note(u8),
    On,
    Off,
    Label(ErrorLabel),
}

/// Classify an id, or None when it is outside the vocabulary.
pub fn token_kind(id: u32) -> Option<TokenKind> {
    match id {
        vocab::PAD => Some(TokenKind::Pad),
        vocab::SOS => Some(TokenKind::Sos),
        vocab::EOS => Some(TokenKind::Eos),
        i if (vocab::TIME_BASE..vocab::TIME_BASE + NUM_TIME_BINS).contains(&i) => {
            Some(TokenKind::Time(i - vocab::TIME_BASE))
        }
        i if (vocab::NOTE_BASE..vocab::NOTE_BASE + 128).contains(&i) => {
            Some(TokenKind::Note((i - vocab::NOTE_BASE) as u8))
        }
        vocab::ON => Some(TokenKind::On),
        vocab::OFF => Some(TokenKind::Off),
        vocab::LABEL_CORRECT => Some(TokenKind::Label(ErrorLabel::Correct)),
        vocab::LABEL_MISSED => Some(TokenKind::Label(ErrorLabel::Missed)),
        vocab::LABEL_EXTRA => Some(TokenKind::Label(ErrorLabel::Extra)),
        _ => None,
    }
}

/// Full id -> kind table as JSON, embedded in checkpoints so a model file
/// describes its own output alphabet.
pub fn vocabulary_table_json() -> serde_json::Value {
    let table: Vec<serde_json::Value> = (0..vocab::SIZE)
        .map(|id| {
            let kind = token_kind(id).expect("all ids below SIZE are defined");
            serde_json::json!({ "id": id, "token": kind })
        })
        .collect();
    serde_json::Value::Array(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Target,
    Prompt,
    DecoderInput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub role: Role,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum TokenError {
    #[error("note has no label; targets require labeled notes")]
    MissingLabel,
    #[error("prompt notes must be unlabeled")]
    UnexpectedLabel,
    #[error("note onset {onset} outside segment starting at {segment_start}")]
    OutsideSegment { onset: f64, segment_start: f64 },
    #[error("malformed token sequence at position {pos}: {msg}")]
    Malformed { pos: usize, msg: String },
}

/// A note snapped to the segment's 10 ms grid. `offset_bin == None` means
/// the note runs past the segment end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizedNote {
    pub onset_bin: u32,
    pub offset_bin: Option<u32>,
    pub pitch: u8,
    pub label: Option<ErrorLabel>,
}

impl QuantizedNote {
    /// Back to seconds relative to the segment start. Off-less notes close
    /// exactly at the segment boundary.
    pub fn to_event(self) -> NoteEvent {
        let onset = f64::from(self.onset_bin) * TIME_BIN_S;
        let offset = match self.offset_bin {
            Some(b) => f64::from(b) * TIME_BIN_S,
            None => SEGMENT_SECONDS,
        };
        NoteEvent { onset_s: onset, offset_s: offset, pitch: self.pitch, label: self.label }
    }
}

/// Snap one note to the grid. Quantized notes keep a minimum duration of one
/// bin; offsets at or past the segment end lose their off group.
pub fn quantize_note(note: &NoteEvent, segment_start: f64) -> Result<QuantizedNote, TokenError> {
    let rel_onset = note.onset_s - segment_start;
    if !(0.0..SEGMENT_SECONDS).contains(&rel_onset) {
        return Err(TokenError::OutsideSegment { onset: note.onset_s, segment_start });
    }
    let onset_bin = (rel_onset / TIME_BIN_S).round() as u32;
    let rel_offset = note.offset_s - segment_start;
    let offset_bin = if rel_offset >= SEGMENT_SECONDS {
        None
    } else {
        let raw = (rel_offset / TIME_BIN_S).round() as u32;
        let clamped = raw.max(onset_bin + 1);
        if clamped >= NUM_TIME_BINS {
            None
        } else {
            Some(clamped)
        }
    };
    Ok(QuantizedNote { onset_bin, offset_bin, pitch: note.pitch, label: note.label })
}

/// The reference quantizer for round-trip laws: what a lossless decode of an
/// encoded segment must reproduce, in segment-relative seconds.
pub fn quantize_segment(notes: &[NoteEvent], segment_start: f64) -> Result<Vec<NoteEvent>, TokenError> {
    notes
        .iter()
        .map(|n| quantize_note(n, segment_start).map(QuantizedNote::to_event))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    // sort order within a bin: offs close before ons start
    Offset { pitch: u8 },
    Onset { label: Option<ErrorLabel>, pitch: u8 },
}

impl Group {
    fn sort_key(&self) -> (u8, u8, u8) {
        match *self {
            Group::Offset { pitch } => (0, 0, pitch),
            Group::Onset { label, pitch } => (1, label.map_or(0, ErrorLabel::index), pitch),
        }
    }
}

fn event_groups(notes: &[QuantizedNote]) -> Vec<(u32, Group)> {
    let mut groups: Vec<(u32, Group)> = Vec::new();
    for n in notes {
        groups.push((n.onset_bin, Group::Onset { label: n.label, pitch: n.pitch }));
        if let Some(off) = n.offset_bin {
            groups.push((off, Group::Offset { pitch: n.pitch }));
        }
    }
    groups.sort_by_key(|(bin, g)| (*bin, g.sort_key()));
    groups
}

fn emit(groups: &[(u32, Group)], with_labels: bool, out: &mut Vec<u32>) {
    let mut last_bin: Option<u32> = None;
    for (bin, group) in groups {
        if last_bin != Some(*bin) {
            out.push(vocab::time(*bin));
            last_bin = Some(*bin);
        }
        match group {
            Group::Onset { label, pitch } => {
                if with_labels {
                    out.push(vocab::label(label.expect("labels checked before emit")));
                }
                out.push(vocab::ON);
                out.push(vocab::note(*pitch));
            }
            Group::Offset { pitch } => {
                out.push(vocab::note(*pitch));
                out.push(vocab::OFF);
            }
        }
    }
}

/// Encode labeled notes of one segment as a target sequence (SOS ... EOS).
pub fn encode_events(notes: &[NoteEvent], segment_start: f64) -> Result<TokenSequence, TokenError> {
    let quantized: Vec<QuantizedNote> = notes
        .iter()
        .map(|n| {
            if n.label.is_none() {
                return Err(TokenError::MissingLabel);
            }
            quantize_note(n, segment_start)
        })
        .collect::<Result<_, _>>()?;
    let groups = event_groups(&quantized);
    let mut ids = vec![vocab::SOS];
    emit(&groups, true, &mut ids);
    ids.push(vocab::EOS);
    Ok(TokenSequence { ids, role: Role::Target })
}

/// Encode unlabeled score notes of one segment as a symbolic prompt: same
/// grammar as targets but without label tokens and without SOS/EOS.
pub fn build_prompt(notes: &[NoteEvent], segment_start: f64) -> Result<TokenSequence, TokenError> {
    let quantized: Vec<QuantizedNote> = notes
        .iter()
        .map(|n| {
            if n.label.is_some() {
                return Err(TokenError::UnexpectedLabel);
            }
            quantize_note(n, segment_start)
        })
        .collect::<Result<_, _>>()?;
    let groups = event_groups(&quantized);
    let mut ids = Vec::new();
    emit(&groups, false, &mut ids);
    Ok(TokenSequence { ids, role: Role::Prompt })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DecodeDiagnostics {
    /// Token runs that did not form a valid group and were skipped.
    pub skipped_fragments: usize,
    /// Offs at or before their note's onset bin, clamped to one-bin duration.
    pub clamped_offsets: usize,
}

/// Robust decode: reconstruct labeled notes from any id sequence. Malformed
/// fragments are skipped and counted; an On without a matching Off closes at
/// the segment end. Simultaneous notes of equal pitch pair with their offs
/// first-in-first-out, which is the one reading the format cannot express
/// more precisely. Times are segment-relative seconds.
pub fn decode_tokens(ids: &[u32]) -> (Vec<NoteEvent>, DecodeDiagnostics) {
    decode_inner(ids, false).expect("robust decode cannot fail")
}

/// Strict decode: errors on the first malformed group instead of skipping.
pub fn decode_tokens_strict(ids: &[u32]) -> Result<Vec<NoteEvent>, TokenError> {
    decode_inner(ids, true).map(|(notes, _)| notes)
}

fn decode_inner(ids: &[u32], strict: bool) -> Result<(Vec<NoteEvent>, DecodeDiagnostics), TokenError> {
    let mut diags = DecodeDiagnostics::default();
    let mut bin: u32 = 0;
    // open notes per pitch: (onset_bin, label), FIFO
    let mut open: Vec<Vec<(u32, ErrorLabel)>> = vec![Vec::new(); 128];
    let mut done: Vec<QuantizedNote> = Vec::new();

    // strip one leading SOS; stop at the first EOS
    let body: &[u32] = match ids.first() {
        Some(&id) if id == vocab::SOS => &ids[1..],
        _ => ids,
    };
    let end = body.iter().position(|&id| id == vocab::EOS).unwrap_or(body.len());
    let body = &body[..end];

    let mut pos = 0;
    while pos < body.len() {
        let here = pos;
        match token_kind(body[pos]) {
            Some(TokenKind::Time(b)) => {
                bin = b;
                pos += 1;
                continue;
            }
            Some(TokenKind::Label(label)) => {
                if pos + 2 < body.len()
                    && body[pos + 1] == vocab::ON
                    && matches!(token_kind(body[pos + 2]), Some(TokenKind::Note(_)))
                {
                    let Some(TokenKind::Note(pitch)) = token_kind(body[pos + 2]) else {
                        unreachable!()
                    };
                    open[pitch as usize].push((bin, label));
                    pos += 3;
                    continue;
                }
            }
            Some(TokenKind::Note(pitch)) => {
                if pos + 1 < body.len() && body[pos + 1] == vocab::OFF {
                    if let Some((onset_bin, label)) = non_empty_pop(&mut open[pitch as usize]) {
                        let mut off = bin;
                        if off <= onset_bin {
                            off = onset_bin + 1;
                            diags.clamped_offsets += 1;
                        }
                        let offset_bin = if off >= NUM_TIME_BINS { None } else { Some(off) };
                        done.push(QuantizedNote { onset_bin, offset_bin, pitch, label: Some(label) });
                        pos += 2;
                        continue;
                    }
                }
            }
            _ => {}
        }
        if strict {
            return Err(TokenError::Malformed { pos: here, msg: format!("unexpected id {}", body[here]) });
        }
        diags.skipped_fragments += 1;
        pos += 1;
    }

    for (pitch, fifo) in open.iter_mut().enumerate() {
        for (onset_bin, label) in fifo.drain(..) {
            done.push(QuantizedNote { onset_bin, offset_bin: None, pitch: pitch as u8, label: Some(label) });
        }
    }
    done.sort_by_key(|n| (n.onset_bin, n.pitch, n.offset_bin.unwrap_or(u32::MAX)));
    Ok((done.into_iter().map(QuantizedNote::to_event).collect(), diags))
}

fn non_empty_pop(fifo: &mut Vec<(u32, ErrorLabel)>) -> Option<(u32, ErrorLabel)> {
    if fifo.is_empty() {
        None
    } else {
        Some(fifo.remove(0))
    }
}

/// Permute event groups that share a time bin. Decoding the result yields
/// the same labeled-note multiset as the input.
pub fn token_shuffle<R: Rng>(seq: &TokenSequence, rng: &mut R) -> Result<TokenSequence, TokenError> {
    if seq.ids.first() != Some(&vocab::SOS) || seq.ids.last() != Some(&vocab::EOS) {
        return Err(TokenError::Malformed { pos: 0, msg: "target must be wrapped in SOS..EOS".into() });
    }
    let body = &seq.ids[1..seq.ids.len() - 1];

    // strict re-parse into (bin, group token run) units
    let mut groups: Vec<(u32, Vec<u32>)> = Vec::new();
    let mut bin: u32 = 0;
    let mut pos = 0;
    while pos < body.len() {
        match token_kind(body[pos]) {
            Some(TokenKind::Time(b)) => {
                bin = b;
                pos += 1;
            }
            Some(TokenKind::Label(_)) => {
                if pos + 2 < body.len()
                    && body[pos + 1] == vocab::ON
                    && matches!(token_kind(body[pos + 2]), Some(TokenKind::Note(_)))
                {
                    groups.push((bin, body[pos..pos + 3].to_vec()));
                    pos += 3;
                } else {
                    return Err(TokenError::Malformed { pos, msg: "incomplete onset group".into() });
                }
            }
            Some(TokenKind::Note(_)) => {
                if pos + 1 < body.len() && body[pos + 1] == vocab::OFF {
                    groups.push((bin, body[pos..pos + 2].to_vec()));
                    pos += 2;
                } else {
                    return Err(TokenError::Malformed { pos, msg: "incomplete offset group".into() });
                }
            }
            _ => {
                return Err(TokenError::Malformed { pos, msg: format!("unexpected id {}", body[pos]) });
            }
        }
    }

    // Fisher-Yates within each same-bin run
    let mut start = 0;
    while start < groups.len() {
        let mut end = start + 1;
        while end < groups.len() && groups[end].0 == groups[start].0 {
            end += 1;
        }
        for i in (start + 1..end).rev() {
            let j = start + rng.gen_range(0..=(i - start));
            groups.swap(i, j);
        }
        start = end;
    }

    let mut ids = vec![vocab::SOS];
    let mut last_bin: Option<u32> = None;
    for (bin, tokens) in &groups {
        if last_bin != Some(*bin) {
            ids.push(vocab::time(*bin));
            last_bin = Some(*bin);
        }
        ids.extend_from_slice(tokens);
    }
    ids.push(vocab::EOS);
    Ok(TokenSequence { ids, role: Role::Target })
}
