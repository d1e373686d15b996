//! Explicit-alignment baseline: dynamic time warping between score and
//! practice note onsets, a piecewise-linear warp map from the path, and
//! rule-based correct/missed/extra labeling.
//!
//! The practice notes come from ground truth rather than a transcription
//! model, so this measures the alignment/labeling stage alone.

use crate::notes::{ErrorLabel, NoteEvent, NoteTrack, TrackTriple};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("dtw requires non-empty sequences")]
    Empty,
}

/// A monotone alignment path with its accumulated cost.
#[derive(Debug, Clone, PartialEq)]
pub struct DtwResult {
    /// Index pairs from (0,0) to (n-1, m-1); steps are (+1,0), (0,+1), (+1,+1).
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Standard DTW dynamic program. Ties prefer the diagonal step, then (+1,0).
pub fn dtw<T>(a: &[T], b: &[T], dist: impl Fn(&T, &T) -> f64) -> Result<DtwResult, BaselineError> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(BaselineError::Empty);
    }
    let idx = |i: usize, j: usize| i * m + j;
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = dist(&a[i], &b[j]);
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => acc[idx(0, j - 1)],
                (_, 0) => acc[idx(i - 1, 0)],
                _ => acc[idx(i - 1, j - 1)].min(acc[idx(i - 1, j)]).min(acc[idx(i, j - 1)]),
            };
            acc[idx(i, j)] = d + best;
        }
    }

    let mut path = Vec::new();
    let (mut i, mut j) = (n - 1, m - 1);
    path.push((i, j));
    while i > 0 || j > 0 {
        let (ni, nj) = match (i, j) {
            (0, _) => (0, j - 1),
            (_, 0) => (i - 1, 0),
            _ => {
                let diag = acc[idx(i - 1, j - 1)];
                let up = acc[idx(i - 1, j)];
                let left = acc[idx(i, j - 1)];
                if diag <= up && diag <= left {
                    (i - 1, j - 1)
                } else if up <= left {
                    (i - 1, j)
                } else {
                    (i, j - 1)
                }
            }
        };
        i = ni;
        j = nj;
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult { path, cost: acc[idx(n - 1, m - 1)] })
}

/// Piecewise-linear warp built from matched (practice time, score time)
/// pairs; constant beyond the ends. When one practice time is paired with a
/// run of score times, the closest score time wins, so deletions do not drag
/// the map off the surviving notes.
struct WarpMap {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl WarpMap {
    fn from_path(path: &[(usize, usize)], score_onsets: &[f64], practice_onsets: &[f64]) -> Self {
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for &(i, j) in path {
            let x = practice_onsets[j];
            let y = score_onsets[i];
            match xs.last() {
                Some(&last) if last == x => {
                    let cur = ys.last_mut().unwrap();
                    if (y - x).abs() < (*cur - x).abs() {
                        *cur = y;
                    }
                }
                _ => {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        WarpMap { xs, ys }
    }

    fn apply(&self, x: f64) -> f64 {
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= *self.xs.last().unwrap() {
            return *self.ys.last().unwrap();
        }
        let k = self.xs.partition_point(|&v| v <= x);
        let (x0, x1) = (self.xs[k - 1], self.xs[k]);
        let (y0, y1) = (self.ys[k - 1], self.ys[k]);
        if x1 == x0 {
            y0
        } else {
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        }
    }
}

/// DTW-align practice onsets to score time, then label: a practice note
/// matching a score note of equal pitch with warped onset within the
/// tolerance is Correct (each score note used at most once, greedy by
/// warped-onset proximity); unmatched practice notes are Extra; unmatched
/// score notes are Missed.
pub fn label_by_alignment(score: &NoteTrack, practice: &NoteTrack, onset_tol: f64) -> TrackTriple {
    let relabel = |track: &NoteTrack, label: ErrorLabel| -> Vec<NoteEvent> {
        track.notes().iter().map(|n| NoteEvent { label: Some(label), ..*n }).collect()
    };
    if practice.is_empty() || score.is_empty() {
        return TrackTriple {
            correct: NoteTrack::empty(),
            missed: NoteTrack::new(relabel(score, ErrorLabel::Missed), score.instrument.clone())
                .expect("relabeled track stays valid"),
            extra: NoteTrack::new(relabel(practice, ErrorLabel::Extra), practice.instrument.clone())
                .expect("relabeled track stays valid"),
        };
    }

    let score_onsets: Vec<f64> = score.notes().iter().map(|n| n.onset_s).collect();
    let practice_onsets: Vec<f64> = practice.notes().iter().map(|n| n.onset_s).collect();
    let result = dtw(&score_onsets, &practice_onsets, |a, b| (a - b).abs())
        .expect("non-empty checked above");
    let warp = WarpMap::from_path(&result.path, &score_onsets, &practice_onsets);

    // candidate pairs within tolerance after warping, greedy nearest-first
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (j, p) in practice.notes().iter().enumerate() {
        let warped = warp.apply(p.onset_s);
        for (i, s) in score.notes().iter().enumerate() {
            if s.pitch == p.pitch && (warped - s.onset_s).abs() <= onset_tol {
                candidates.push(((warped - s.onset_s).abs(), i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut score_used = vec![false; score.len()];
    let mut practice_matched = vec![false; practice.len()];
    for (_, i, j) in candidates {
        if !score_used[i] && !practice_matched[j] {
            score_used[i] = true;
            practice_matched[j] = true;
        }
    }

    let mut correct = Vec::new();
    let mut missed = Vec::new();
    let mut extra = Vec::new();
    for (j, p) in practice.notes().iter().enumerate() {
        let label = if practice_matched[j] { ErrorLabel::Correct } else { ErrorLabel::Extra };
        let note = NoteEvent { label: Some(label), ..*p };
        if practice_matched[j] {
            correct.push(note);
        } else {
            extra.push(note);
        }
    }
    for (i, s) in score.notes().iter().enumerate() {
        if !score_used[i] {
            missed.push(NoteEvent { label: Some(ErrorLabel::Missed), ..*s });
        }
    }
    let inst = practice.instrument.clone();
    TrackTriple {
        correct: NoteTrack::new(correct, inst.clone()).expect("labeled subset stays valid"),
        missed: NoteTrack::new(missed, inst.clone()).expect("labeled subset stays valid"),
        extra: NoteTrack::new(extra, inst).expect("labeled subset stays valid"),
    }
}
