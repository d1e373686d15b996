//! Synthetic practice-mistake injection.
//!
//! Each note of a clean track is independently selected with a per-track
//! error rate λ drawn from a uniform range; selected notes receive one of
//! four error types (missed note, pitch change, timing shift, extra note)
//! chosen uniformly. Offsets come from zero-mean truncated normals. The
//! output keeps three labeled tracks (correct / missed / extra) plus the
//! performed track the "student" actually plays.

use crate::notes::{ErrorLabel, NoteError, NoteEvent, NoteTrack};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Onset tolerance shared with the evaluation metric; timing shifts within
/// this window keep their Correct label.
pub const ONSET_TOLERANCE_S: f64 = 0.05;

const MAX_REDRAWS: usize = 64;

#[derive(Debug, Error)]
pub enum ErrorGenError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Note(#[from] NoteError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorGenConfig {
    /// Lower bound of the per-track error-rate range.
    pub lambda_low: f64,
    /// Upper bound of the per-track error-rate range.
    pub lambda_high: f64,
    /// Std of the pitch-offset distribution, semitones.
    pub pitch_sigma: f64,
    /// Std of the timing-offset distribution, seconds.
    pub time_sigma: f64,
    /// Truncation bound in multiples of sigma.
    pub trunc_multiple: f64,
    pub seed: u64,
}

impl Default for ErrorGenConfig {
    fn default() -> Self {
        ErrorGenConfig {
            lambda_low: 0.1,
            lambda_high: 0.4,
            pitch_sigma: 1.0,
            time_sigma: 0.02,
            trunc_multiple: 3.0,
            seed: 0,
        }
    }
}

impl ErrorGenConfig {
    pub fn validate(&self) -> Result<(), ErrorGenError> {
        if !(0.0..=1.0).contains(&self.lambda_low)
            || !(0.0..=1.0).contains(&self.lambda_high)
            || self.lambda_low > self.lambda_high
        {
            return Err(ErrorGenError::Config(format!(
                "lambda range [{}, {}] must satisfy 0 <= low <= high <= 1",
                self.lambda_low, self.lambda_high
            )));
        }
        if self.pitch_sigma <= 0.0 || self.time_sigma <= 0.0 || self.trunc_multiple <= 0.0 {
            return Err(ErrorGenError::Config("sigmas and trunc_multiple must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Missed,
    PitchChange,
    TimingShift,
    ExtraNote,
}

/// One applied edit, kept for reproducibility audits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditEntry {
    /// Index of the anchor note in the sorted input track.
    pub note_id: usize,
    pub kind: ErrorKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_p: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_t: Option<f64>,
    /// True when an onset had to be clamped at zero.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

/// Result of one injection pass over a track.
#[derive(Debug, Clone)]
pub struct AugmentedSample {
    /// What the student plays: correct ∪ extra, sorted.
    pub performed: NoteTrack,
    pub correct: NoteTrack,
    pub missed: NoteTrack,
    pub extra: NoteTrack,
    pub lambda_used: f64,
    pub edit_log: Vec<EditEntry>,
}

impl AugmentedSample {
    /// All notes with labels, including the unplayed missed ones. This is the
    /// decoder target view of the sample.
    pub fn labeled_union(&self) -> NoteTrack {
        let mut notes: Vec<NoteEvent> = Vec::new();
        notes.extend_from_slice(self.correct.notes());
        notes.extend_from_slice(self.missed.notes());
        notes.extend_from_slice(self.extra.notes());
        NoteTrack::new(notes, self.performed.instrument.clone())
            .expect("labeled tracks are collision-free by construction")
    }
}

/// Draw the per-track error rate from U(lambda_low, lambda_high).
pub fn sample_lambda<R: Rng>(cfg: &ErrorGenConfig, rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    cfg.lambda_low + u * (cfg.lambda_high - cfg.lambda_low)
}

/// Zero-mean normal with std `sigma`, truncated to ±trunc_multiple·sigma by
/// rejection sampling. The Box-Muller transform is spelled out here so draws
/// depend only on the rng's word stream, not a distribution crate's
/// implementation details.
pub fn sample_truncnorm<R: Rng>(sigma: f64, trunc_multiple: f64, rng: &mut R) -> f64 {
    assert!(sigma > 0.0 && trunc_multiple > 0.0);
    loop {
        let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= trunc_multiple {
            return z * sigma;
        }
    }
}

struct TrackState {
    /// Exact (onset bits, pitch) of every note emitted so far.
    occupied: std::collections::HashSet<(u64, u8)>,
    /// Reference onsets per pitch, for the extra-note tolerance check.
    ref_onsets: Vec<Vec<f64>>,
}

impl TrackState {
    fn new(track: &NoteTrack) -> Self {
        let mut ref_onsets = vec![Vec::new(); 128];
        for n in track.notes() {
            ref_onsets[n.pitch as usize].push(n.onset_s);
        }
        TrackState { occupied: std::collections::HashSet::new(), ref_onsets }
    }

    fn claim(&mut self, onset: f64, pitch: u8) -> bool {
        self.occupied.insert((onset.to_bits(), pitch))
    }

    fn is_free(&self, onset: f64, pitch: u8) -> bool {
        !self.occupied.contains(&(onset.to_bits(), pitch))
    }

    /// True when no reference note of this pitch lies within the metric
    /// tolerance of `onset`. Required for anything that lands in the extra
    /// track, so Extra labels stay consistent with the evaluator.
    fn far_from_reference(&self, onset: f64, pitch: u8) -> bool {
        self.ref_onsets[pitch as usize]
            .iter()
            .all(|r| (r - onset).abs() > ONSET_TOLERANCE_S)
    }
}

/// Apply the error-injection procedure to a track.
///
/// Deterministic given (track, cfg, rng state). Every input note ends up in
/// exactly one of the correct or missed tracks; extra holds only inserted or
/// replacement notes.
pub fn inject_errors<R: Rng>(
    track: &NoteTrack,
    cfg: &ErrorGenConfig,
    rng: &mut R,
) -> Result<AugmentedSample, ErrorGenError> {
    cfg.validate()?;
    let lambda = sample_lambda(cfg, rng);

    let mut state = TrackState::new(track);
    let mut correct: Vec<NoteEvent> = Vec::new();
    let mut missed: Vec<NoteEvent> = Vec::new();
    let mut extra: Vec<NoteEvent> = Vec::new();
    let mut edit_log: Vec<EditEntry> = Vec::new();

    let push_correct = |n: NoteEvent, state: &mut TrackState, correct: &mut Vec<NoteEvent>| {
        state.claim(n.onset_s, n.pitch);
        correct.push(NoteEvent { label: Some(ErrorLabel::Correct), ..n });
    };

    for (id, note) in track.notes().iter().enumerate() {
        let selected = rng.gen::<f64>() < lambda;
        if !selected {
            push_correct(*note, &mut state, &mut correct);
            continue;
        }
        let kind = match rng.gen_range(0..4u8) {
            0 => ErrorKind::Missed,
            1 => ErrorKind::PitchChange,
            2 => ErrorKind::TimingShift,
            _ => ErrorKind::ExtraNote,
        };
        match kind {
            ErrorKind::Missed => {
                state.claim(note.onset_s, note.pitch);
                missed.push(NoteEvent { label: Some(ErrorLabel::Missed), ..*note });
                edit_log.push(EditEntry { note_id: id, kind, eps_p: None, eps_t: None, clamped: false });
            }
            ErrorKind::PitchChange => {
                let mut applied = false;
                for _ in 0..MAX_REDRAWS {
                    let k = sample_truncnorm(cfg.pitch_sigma, cfg.trunc_multiple, rng).round() as i32;
                    let new_pitch = i32::from(note.pitch) + k;
                    if k == 0 || !(0..=127).contains(&new_pitch) {
                        continue;
                    }
                    let new_pitch = new_pitch as u8;
                    if !state.is_free(note.onset_s, new_pitch)
                        || !state.far_from_reference(note.onset_s, new_pitch)
                    {
                        continue;
                    }
                    state.claim(note.onset_s, note.pitch);
                    state.claim(note.onset_s, new_pitch);
                    missed.push(NoteEvent { label: Some(ErrorLabel::Missed), ..*note });
                    extra.push(NoteEvent {
                        pitch: new_pitch,
                        label: Some(ErrorLabel::Extra),
                        ..*note
                    });
                    edit_log.push(EditEntry { note_id: id, kind, eps_p: Some(k), eps_t: None, clamped: false });
                    applied = true;
                    break;
                }
                if !applied {
                    log::debug!("pitch change for note {id} found no valid offset; left correct");
                    push_correct(*note, &mut state, &mut correct);
                }
            }
            ErrorKind::TimingShift => {
                let mut applied = false;
                for _ in 0..MAX_REDRAWS {
                    let eps_t = sample_truncnorm(cfg.time_sigma, cfg.trunc_multiple, rng);
                    let duration = note.offset_s - note.onset_s;
                    let raw_onset = note.onset_s + eps_t;
                    let clamped = raw_onset < 0.0;
                    let new_onset = raw_onset.max(0.0);
                    let shifted = NoteEvent {
                        onset_s: new_onset,
                        offset_s: new_onset + duration,
                        pitch: note.pitch,
                        label: None,
                    };
                    let out_of_tolerance = eps_t.abs() > ONSET_TOLERANCE_S;
                    if !state.is_free(shifted.onset_s, shifted.pitch) {
                        continue;
                    }
                    if out_of_tolerance && !state.far_from_reference(shifted.onset_s, shifted.pitch) {
                        continue;
                    }
                    if clamped {
                        log::debug!("timing shift clamped onset of note {id} at 0");
                    }
                    if out_of_tolerance {
                        state.claim(note.onset_s, note.pitch);
                        state.claim(shifted.onset_s, shifted.pitch);
                        missed.push(NoteEvent { label: Some(ErrorLabel::Missed), ..*note });
                        extra.push(NoteEvent { label: Some(ErrorLabel::Extra), ..shifted });
                    } else {
                        push_correct(shifted, &mut state, &mut correct);
                    }
                    edit_log.push(EditEntry { note_id: id, kind, eps_p: None, eps_t: Some(eps_t), clamped });
                    applied = true;
                    break;
                }
                if !applied {
                    log::debug!("timing shift for note {id} found no valid offset; left correct");
                    push_correct(*note, &mut state, &mut correct);
                }
            }
            ErrorKind::ExtraNote => {
                // The anchor itself stays correct; the inserted note must be
                // genuinely extra, i.e. outside the metric tolerance of every
                // reference note of its pitch.
                push_correct(*note, &mut state, &mut correct);
                let mut applied = false;
                for _ in 0..MAX_REDRAWS {
                    let eps_t = sample_truncnorm(cfg.time_sigma, cfg.trunc_multiple, rng);
                    let k = sample_truncnorm(cfg.pitch_sigma, cfg.trunc_multiple, rng).round() as i32;
                    let new_pitch = i32::from(note.pitch) + k;
                    if !(0..=127).contains(&new_pitch) {
                        continue;
                    }
                    let new_pitch = new_pitch as u8;
                    let duration = note.offset_s - note.onset_s;
                    let raw_onset = note.onset_s + eps_t;
                    let clamped = raw_onset < 0.0;
                    let new_onset = raw_onset.max(0.0);
                    if !state.is_free(new_onset, new_pitch) || !state.far_from_reference(new_onset, new_pitch) {
                        continue;
                    }
                    if clamped {
                        log::debug!("extra-note insertion clamped onset of note {id} at 0");
                    }
                    state.claim(new_onset, new_pitch);
                    extra.push(NoteEvent {
                        onset_s: new_onset,
                        offset_s: new_onset + duration,
                        pitch: new_pitch,
                        label: Some(ErrorLabel::Extra),
                    });
                    edit_log.push(EditEntry { note_id: id, kind, eps_p: Some(k), eps_t: Some(eps_t), clamped });
                    applied = true;
                    break;
                }
                if !applied {
                    log::debug!("extra-note insertion for note {id} found no free slot; skipped");
                }
            }
        }
    }

    let mut performed_notes = correct.clone();
    performed_notes.extend_from_slice(&extra);
    let instrument = track.instrument.clone();
    Ok(AugmentedSample {
        performed: NoteTrack::new(performed_notes, instrument.clone())?,
        correct: NoteTrack::new(correct, instrument.clone())?,
        missed: NoteTrack::new(missed, instrument.clone())?,
        extra: NoteTrack::new(extra, instrument)?,
        lambda_used: lambda,
        edit_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spaced_track(n: usize) -> NoteTrack {
        let notes = (0..n)
            .map(|i| NoteEvent::new(0.2 * i as f64 + 0.3, 0.2 * i as f64 + 0.45, 40 + (i % 40) as u8))
            .collect();
        NoteTrack::new(notes, "test").unwrap()
    }

    #[test]
    fn lambda_degenerate_interval() {
        let cfg = ErrorGenConfig { lambda_low: 0.25, lambda_high: 0.25, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_lambda(&cfg, &mut rng), 0.25);
    }

    #[test]
    fn lambda_mean_matches_uniform() {
        let cfg = ErrorGenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| sample_lambda(&cfg, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.25).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn lambda_same_seed_same_value() {
        let cfg = ErrorGenConfig::default();
        let a = sample_lambda(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_lambda(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn truncnorm_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20_000 {
            let v = sample_truncnorm(0.02, 3.0, &mut rng);
            assert!(v.abs() <= 0.06 + 1e-15, "{v}");
        }
    }

    /// Analytic std of N(0,1) truncated to ±3σ by numeric integration.
    fn truncated_std_oracle(bound: f64) -> f64 {
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let n = 200_000;
        let h = 2.0 * bound / n as f64;
        let mut mass = 0.0;
        let mut second = 0.0;
        for i in 0..=n {
            let x = -bound + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            mass += w * pdf(x) * h;
            second += w * x * x * pdf(x) * h;
        }
        (second / mass).sqrt()
    }

    #[test]
    fn truncnorm_std_matches_analytic() {
        // Closed form: Var[X | |X| <= 3] = 1 - 6 phi(3) / (2 Phi(3) - 1)
        // = 0.97334, std = 0.98658. The integration oracle must agree.
        let oracle = truncated_std_oracle(3.0);
        assert!((oracle - 0.98658).abs() < 1e-4, "oracle {oracle}");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_truncnorm(1.0, 3.0, &mut rng)).collect();
        let mean: f64 = draws.iter().sum::<f64>() / n as f64;
        let var: f64 = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - oracle).abs() < 0.02, "std {}", var.sqrt());
        // the quoted 0.9733 band is the truncated variance; the empirical
        // std still lands inside it
        assert!((var.sqrt() - 0.9733).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn lambda_zero_is_identity() {
        let cfg = ErrorGenConfig { lambda_low: 0.0, lambda_high: 0.0, ..Default::default() };
        let track = spaced_track(20);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sample = inject_errors(&track, &cfg, &mut rng).unwrap();
        assert!(sample.missed.is_empty());
        assert!(sample.extra.is_empty());
        assert_eq!(sample.performed.len(), track.len());
        for (a, b) in sample.performed.notes().iter().zip(track.notes()) {
            assert_eq!(a.onset_s, b.onset_s);
            assert_eq!(a.pitch, b.pitch);
            assert_eq!(a.label, Some(ErrorLabel::Correct));
        }
    }

    #[test]
    fn selection_and_type_statistics() {
        let cfg = ErrorGenConfig { lambda_low: 0.25, lambda_high: 0.25, ..Default::default() };
        let track = spaced_track(10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sample = inject_errors(&track, &cfg, &mut rng).unwrap();
        let selected = sample.edit_log.len() as f64 / track.len() as f64;
        assert!((selected - 0.25).abs() < 0.013, "selected {selected}");
        let count = |k: ErrorKind| sample.edit_log.iter().filter(|e| e.kind == k).count() as f64;
        let total = sample.edit_log.len() as f64;
        for kind in [ErrorKind::Missed, ErrorKind::PitchChange, ErrorKind::TimingShift, ErrorKind::ExtraNote] {
            let frac = count(kind) / total;
            assert!((frac - 0.25).abs() < 0.026, "{kind:?} fraction {frac}");
        }
    }

    #[test]
    fn forced_pitch_change_trace() {
        // Black-box instantiation of the single-step pitch-change example:
        // scan seeds until the drawn edit is a +1-semitone pitch change.
        let track = NoteTrack::new(vec![NoteEvent::new(1.0, 1.5, 60)], "").unwrap();
        let cfg = ErrorGenConfig { lambda_low: 1.0, lambda_high: 1.0, ..Default::default() };
        for seed in 0..500 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sample = inject_errors(&track, &cfg, &mut rng).unwrap();
            let is_plus_one = sample.edit_log.len() == 1
                && sample.edit_log[0].kind == ErrorKind::PitchChange
                && sample.edit_log[0].eps_p == Some(1);
            if is_plus_one {
                assert_eq!(sample.missed.len(), 1);
                assert_eq!(sample.missed.notes()[0].pitch, 60);
                assert_eq!(sample.extra.len(), 1);
                assert_eq!(sample.extra.notes()[0].pitch, 61);
                assert!(sample.correct.is_empty());
                assert_eq!(sample.performed.len(), 1);
                return;
            }
        }
        panic!("no seed in 0..500 produced a +1 pitch change");
    }

    #[test]
    fn determinism_and_conservation() {
        let track = spaced_track(300);
        let cfg = ErrorGenConfig { seed: 11, ..Default::default() };
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            inject_errors(&track, &cfg, &mut rng).unwrap()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(crate::notes::write_jsonl(&a.performed), crate::notes::write_jsonl(&b.performed));
        assert_eq!(crate::notes::write_jsonl(&a.missed), crate::notes::write_jsonl(&b.missed));
        assert_eq!(a.lambda_used, b.lambda_used);
        // conservation: every input note lands in exactly one of correct/missed
        assert_eq!(track.len(), a.correct.len() + a.missed.len());
        assert_eq!(a.performed.len(), a.correct.len() + a.extra.len());
    }

    #[test]
    fn extra_notes_outside_reference_tolerance() {
        let track = spaced_track(500);
        let cfg = ErrorGenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sample = inject_errors(&track, &cfg, &mut rng).unwrap();
        for e in sample.extra.notes() {
            for r in track.notes() {
                if r.pitch == e.pitch {
                    assert!(
                        (r.onset_s - e.onset_s).abs() > ONSET_TOLERANCE_S,
                        "extra note at ({}, {}) collides with reference",
                        e.onset_s,
                        e.pitch
                    );
                }
            }
        }
        // missed notes are reference notes
        for m in sample.missed.notes() {
            assert!(track
                .notes()
                .iter()
                .any(|r| r.onset_s == m.onset_s && r.pitch == m.pitch && r.offset_s == m.offset_s));
        }
        // pitches and onsets stay in range
        for n in sample.performed.notes() {
            assert!(n.onset_s >= 0.0);
        }
    }

    #[test]
    fn empty_track_gives_empty_sample() {
        let cfg = ErrorGenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sample = inject_errors(&NoteTrack::empty(), &cfg, &mut rng).unwrap();
        assert!(sample.performed.is_empty());
        assert!(sample.missed.is_empty());
        assert!(sample.extra.is_empty());
    }
}
