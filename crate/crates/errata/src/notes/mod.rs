//! Canonical note-event data model and file ingestion.
//!
//! A [`NoteTrack`] is the exchange unit for the whole pipeline: the error
//! generator, the tokenizer, the synthesizer, the baseline, and the evaluator
//! all speak this type. Tracks are kept sorted and duplicate-free at
//! construction so downstream code never has to re-validate.
//!
//! Two ingestion paths exist: the canonical JSONL format (one note object per
//! line) and a minimal Standard MIDI File reader for formats 0 and 1.

mod smf;

pub use smf::parse_smf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Error category assigned to a note. A wrong note is represented as a
/// coinciding missed + extra pair, not a fourth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorLabel {
    Correct,
    Missed,
    Extra,
}

impl ErrorLabel {
    /// Stable ordering used for tie-breaks in the tokenizer.
    pub fn index(self) -> u8 {
        match self {
            ErrorLabel::Correct => 0,
            ErrorLabel::Missed => 1,
            ErrorLabel::Extra => 2,
        }
    }
}

/// A single timed, pitched event. Times are real seconds; quantization only
/// happens in the tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    pub pitch: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<ErrorLabel>,
}

impl NoteEvent {
    pub fn new(onset_s: f64, offset_s: f64, pitch: u8) -> Self {
        NoteEvent { onset_s, offset_s, pitch, label: None }
    }

    pub fn with_label(onset_s: f64, offset_s: f64, pitch: u8, label: ErrorLabel) -> Self {
        NoteEvent { onset_s, offset_s, pitch, label: Some(label) }
    }

    fn sort_key(&self) -> (f64, u8, f64) {
        (self.onset_s, self.pitch, self.offset_s)
    }
}

#[derive(Debug, Error)]
pub enum NoteError {
    #[error("line {line}: malformed JSON: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Validation(String),
    #[error("SMF format error: {0}")]
    SmfFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A validated, sorted sequence of notes plus an instrument tag.
///
/// Invariants enforced at construction:
/// - every note has `offset_s > onset_s` and a pitch in 0..=127,
/// - notes are sorted by `(onset, pitch, offset)`,
/// - no two notes share the same `(onset, pitch)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoteTrack {
    notes: Vec<NoteEvent>,
    pub instrument: String,
}

impl NoteTrack {
    /// Validate, sort, and deduplicate-check a set of notes.
    pub fn new(mut notes: Vec<NoteEvent>, instrument: impl Into<String>) -> Result<Self, NoteError> {
        for n in &notes {
            validate_note(n)?;
        }
        notes.sort_by(|a, b| {
            let (ao, ap, af) = a.sort_key();
            let (bo, bp, bf) = b.sort_key();
            ao.total_cmp(&bo).then(ap.cmp(&bp)).then(af.total_cmp(&bf))
        });
        for w in notes.windows(2) {
            if w[0].onset_s == w[1].onset_s && w[0].pitch == w[1].pitch {
                return Err(NoteError::Validation(format!(
                    "duplicate note at onset {} pitch {}",
                    w[0].onset_s, w[0].pitch
                )));
            }
        }
        Ok(NoteTrack { notes, instrument: instrument.into() })
    }

    pub fn empty() -> Self {
        NoteTrack::default()
    }

    pub fn notes(&self) -> &[NoteEvent] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Total extent in seconds (offset of the latest-ending note).
    pub fn duration(&self) -> f64 {
        self.notes.iter().map(|n| n.offset_s).fold(0.0, f64::max)
    }
}

/// The correct/missed/extra split of one sample, the unit both the error
/// generator and the detectors emit and the evaluator consumes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackTriple {
    pub correct: NoteTrack,
    pub missed: NoteTrack,
    pub extra: NoteTrack,
}

impl TrackTriple {
    pub fn track(&self, label: ErrorLabel) -> &NoteTrack {
        match label {
            ErrorLabel::Correct => &self.correct,
            ErrorLabel::Missed => &self.missed,
            ErrorLabel::Extra => &self.extra,
        }
    }
}

fn validate_note(n: &NoteEvent) -> Result<(), NoteError> {
    if !n.onset_s.is_finite() || !n.offset_s.is_finite() {
        return Err(NoteError::Validation("non-finite note time".into()));
    }
    if n.onset_s < 0.0 {
        return Err(NoteError::Validation(format!("onset negative: {}", n.onset_s)));
    }
    if n.offset_s <= n.onset_s {
        return Err(NoteError::Validation(format!(
            "offset {} not after onset {}",
            n.offset_s, n.onset_s
        )));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlNote {
    onset_s: f64,
    offset_s: f64,
    pitch: i64,
    #[serde(default)]
    label: Option<ErrorLabel>,
}

/// Parse the canonical JSONL note format. Lines need not be sorted; blank
/// lines are skipped.
pub fn parse_jsonl(bytes: &[u8]) -> Result<NoteTrack, NoteError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| NoteError::Parse { line: 0, msg: format!("invalid UTF-8: {e}") })?;
    let mut notes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: JsonlNote = serde_json::from_str(line)
            .map_err(|e| NoteError::Parse { line: i + 1, msg: e.to_string() })?;
        if !(0..=127).contains(&raw.pitch) {
            return Err(NoteError::Validation(format!(
                "line {}: pitch out of range: {}",
                i + 1,
                raw.pitch
            )));
        }
        notes.push(NoteEvent {
            onset_s: raw.onset_s,
            offset_s: raw.offset_s,
            pitch: raw.pitch as u8,
            label: raw.label,
        });
    }
    NoteTrack::new(notes, "")
}

/// Serialize a track to JSONL. `parse_jsonl(write_jsonl(t)) == t` field-exact;
/// serde_json emits the shortest decimal that round-trips each f64.
pub fn write_jsonl(track: &NoteTrack) -> Vec<u8> {
    let mut out = Vec::new();
    for n in track.notes() {
        // serde derive on NoteEvent matches the wire field names exactly
        serde_json::to_writer(&mut out, n).expect("note serialization cannot fail");
        out.push(b'\n');
    }
    out
}

/// Read and parse a JSONL note file.
pub fn read_jsonl_file(path: &std::path::Path) -> Result<NoteTrack, NoteError> {
    let bytes = std::fs::read(path)?;
    parse_jsonl(&bytes)
}

/// Write a track to a JSONL file.
pub fn write_jsonl_file(path: &std::path::Path, track: &NoteTrack) -> Result<(), NoteError> {
    std::fs::write(path, write_jsonl(track))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_two_lines_sorted() {
        let data = b"{\"onset_s\":0.5,\"offset_s\":1.0,\"pitch\":64}\n{\"onset_s\":0.0,\"offset_s\":0.5,\"pitch\":60}\n";
        let track = parse_jsonl(data).unwrap();
        assert_eq!(track.len(), 2);
        assert_eq!(track.notes()[0].pitch, 60);
        assert_eq!(track.notes()[1].pitch, 64);
    }

    #[test]
    fn empty_file_is_empty_track() {
        let track = parse_jsonl(b"").unwrap();
        assert!(track.is_empty());
    }

    #[test]
    fn pitch_out_of_range_rejected() {
        let data = b"{\"onset_s\":0.0,\"offset_s\":0.5,\"pitch\":130}\n";
        let err = parse_jsonl(data).unwrap_err();
        assert!(err.to_string().contains("pitch out of range"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let data = b"{\"onset_s\":0.0,\"offset_s\":0.5,\"pitch\":60}\nnot json\n";
        let err = parse_jsonl(data).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn duplicate_onset_pitch_rejected() {
        let notes = vec![NoteEvent::new(1.0, 2.0, 60), NoteEvent::new(1.0, 1.5, 60)];
        assert!(NoteTrack::new(notes, "").is_err());
    }

    #[test]
    fn offset_must_exceed_onset() {
        assert!(NoteTrack::new(vec![NoteEvent::new(1.0, 1.0, 60)], "").is_err());
    }

    #[test]
    fn empty_track_writes_empty_bytes() {
        assert!(write_jsonl(&NoteTrack::empty()).is_empty());
    }

    #[test]
    fn label_serialized_lowercase() {
        let track = NoteTrack::new(
            vec![NoteEvent::with_label(0.0, 0.5, 60, ErrorLabel::Missed)],
            "",
        )
        .unwrap();
        let text = String::from_utf8(write_jsonl(&track)).unwrap();
        assert!(text.contains("\"label\":\"missed\""), "{text}");
    }

    #[test]
    fn jsonl_round_trip_random_tracks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let mut notes = Vec::new();
            for k in 0..rng.gen_range(0..20) {
                let onset = rng.gen::<f64>() * 10.0 + k as f64 * 1e-3;
                let dur = rng.gen::<f64>() * 2.0 + 1e-4;
                let pitch = rng.gen_range(0..128) as u8;
                let label = match rng.gen_range(0..4) {
                    0 => Some(ErrorLabel::Correct),
                    1 => Some(ErrorLabel::Missed),
                    2 => Some(ErrorLabel::Extra),
                    _ => None,
                };
                notes.push(NoteEvent { onset_s: onset, offset_s: onset + dur, pitch, label });
            }
            let Ok(track) = NoteTrack::new(notes, "") else { continue };
            let round = parse_jsonl(&write_jsonl(&track)).unwrap();
            assert_eq!(round.notes(), track.notes());
        }
    }

    #[test]
    fn parse_is_deterministic() {
        let data = b"{\"onset_s\":0.25,\"offset_s\":1.0,\"pitch\":70}\n{\"onset_s\":0.25,\"offset_s\":1.0,\"pitch\":60}\n";
        let a = parse_jsonl(data).unwrap();
        let b = parse_jsonl(data).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.notes()[0].pitch, 60);
    }
}
