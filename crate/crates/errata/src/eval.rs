//! Error-Detection F1: per-category note matching with a 50 ms onset
//! tolerance and exact pitch, maximum-cardinality matching, and micro
//! aggregation across tracks.

use crate::notes::{ErrorLabel, NoteTrack, TrackTriple};
use serde::Serialize;
use thiserror::Error;

/// Default onset tolerance in seconds.
pub const DEFAULT_ONSET_TOL: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("aggregate requires at least one report")]
    Empty,
}

/// Maximum-cardinality matching between reference and estimated notes.
/// A pair is admissible when pitches are equal and onsets differ by at most
/// `onset_tol` (inclusive). Returns (ref index, est index) pairs.
pub fn match_notes(reference: &NoteTrack, estimate: &NoteTrack, onset_tol: f64) -> Vec<(usize, usize)> {
    let n_ref = reference.len();
    let n_est = estimate.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_est];
    for (e, en) in estimate.notes().iter().enumerate() {
        for (r, rn) in reference.notes().iter().enumerate() {
            if rn.pitch == en.pitch && (rn.onset_s - en.onset_s).abs() <= onset_tol {
                adj[e].push(r);
            }
        }
    }
    // Kuhn's augmenting-path algorithm
    let mut ref_match: Vec<Option<usize>> = vec![None; n_ref];
    let mut est_match: Vec<Option<usize>> = vec![None; n_est];
    fn augment(
        e: usize,
        adj: &[Vec<usize>],
        ref_match: &mut [Option<usize>],
        est_match: &mut [Option<usize>],
        visited: &mut [bool],
    ) -> bool {
        for &r in &adj[e] {
            if visited[r] {
                continue;
            }
            visited[r] = true;
            if ref_match[r].is_none()
                || augment(ref_match[r].unwrap(), adj, ref_match, est_match, visited)
            {
                ref_match[r] = Some(e);
                est_match[e] = Some(r);
                return true;
            }
        }
        false
    }
    for e in 0..n_est {
        let mut visited = vec![false; n_ref];
        augment(e, &adj, &mut ref_match, &mut est_match, &mut visited);
    }
    (0..n_ref)
        .filter_map(|r| ref_match[r].map(|e| (r, e)))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CategoryReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub ref_total: usize,
    pub est_total: usize,
}

impl CategoryReport {
    fn from_counts(matched: usize, ref_total: usize, est_total: usize) -> Self {
        // 0/0 counts as a perfect score by convention
        let precision = if est_total == 0 { 1.0 } else { matched as f64 / est_total as f64 };
        let recall = if ref_total == 0 { 1.0 } else { matched as f64 / ref_total as f64 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        CategoryReport { precision, recall, f1, matched, ref_total, est_total }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TrackCounts {
    pub matched: usize,
    pub ref_total: usize,
    pub est_total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub correct: CategoryReport,
    pub missed: CategoryReport,
    pub extra: CategoryReport,
    /// Raw per-track counts per category, in aggregation order.
    pub per_track: Vec<[TrackCounts; 3]>,
}

impl EvalReport {
    pub fn category(&self, label: ErrorLabel) -> &CategoryReport {
        match label {
            ErrorLabel::Correct => &self.correct,
            ErrorLabel::Missed => &self.missed,
            ErrorLabel::Extra => &self.extra,
        }
    }
}

const CATEGORIES: [ErrorLabel; 3] = [ErrorLabel::Correct, ErrorLabel::Missed, ErrorLabel::Extra];

/// Per-category precision/recall/F1 between a reference and an estimated
/// correct/missed/extra split of one sample.
pub fn error_detection_f1(reference: &TrackTriple, estimate: &TrackTriple, onset_tol: f64) -> EvalReport {
    let mut counts = [TrackCounts::default(); 3];
    for (slot, label) in counts.iter_mut().zip(CATEGORIES) {
        let r = reference.track(label);
        let e = estimate.track(label);
        let matched = match_notes(r, e, onset_tol).len();
        *slot = TrackCounts { matched, ref_total: r.len(), est_total: e.len() };
    }
    EvalReport {
        correct: CategoryReport::from_counts(counts[0].matched, counts[0].ref_total, counts[0].est_total),
        missed: CategoryReport::from_counts(counts[1].matched, counts[1].ref_total, counts[1].est_total),
        extra: CategoryReport::from_counts(counts[2].matched, counts[2].ref_total, counts[2].est_total),
        per_track: vec![counts],
    }
}

/// Micro-average: sum matched/ref/est counts across tracks, then recompute
/// precision, recall, and F1.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut totals = [TrackCounts::default(); 3];
    let mut per_track = Vec::new();
    for report in reports {
        for track in &report.per_track {
            for (t, c) in totals.iter_mut().zip(track) {
                t.matched += c.matched;
                t.ref_total += c.ref_total;
                t.est_total += c.est_total;
            }
            per_track.push(*track);
        }
    }
    Ok(EvalReport {
        correct: CategoryReport::from_counts(totals[0].matched, totals[0].ref_total, totals[0].est_total),
        missed: CategoryReport::from_counts(totals[1].matched, totals[1].ref_total, totals[1].est_total),
        extra: CategoryReport::from_counts(totals[2].matched, totals[2].ref_total, totals[2].est_total),
        per_track,
    })
}
