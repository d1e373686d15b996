//! Audio front end: additive synthesis, segmentation, log-mel spectrograms,
//! and ViT-style patch extraction.
//!
//! All knobs are fixed constants: 16 kHz mono audio, 2.145 s segments,
//! 2048-point FFT with 128-sample hop, 512 HTK-mel bands over 20 Hz-8 kHz,
//! 256 frames per segment, 16x16 patches in a 32 pitch x 16 time grid.

use crate::notes::{NoteEvent, NoteTrack};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::{Arc, OnceLock};
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;
pub const SEGMENT_SECONDS: f64 = 2.145;
/// 2.145 s at 16 kHz.
pub const SEGMENT_SAMPLES: usize = 34_320;
pub const N_FFT: usize = 2048;
pub const HOP: usize = 128;
pub const N_MELS: usize = 512;
/// Native frame count of one segment (34320 / 128) before the center crop.
pub const NATIVE_FRAMES: usize = SEGMENT_SAMPLES / HOP;
pub const N_FRAMES: usize = 256;
pub const MEL_FMIN: f64 = 20.0;
pub const MEL_FMAX: f64 = 8000.0;
pub const MEL_FLOOR: f64 = 1e-5;

/// Patches per segment: 32 pitch-patches x 16 time-patches.
pub const N_PATCHES: usize = 512;
pub const PATCH_DIM: usize = 256;
pub const PITCH_PATCHES: usize = 32;
pub const TIME_PATCHES: usize = 16;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("waveform contains non-finite samples")]
    NonFinite,
    #[error("expected {expected} samples, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("expected {expected} values, got {got}")]
    WrongShape { expected: usize, got: usize },
    #[error("WAV format error: {0}")]
    WavFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Mono audio at the fixed 16 kHz rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self, AudioError> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite);
        }
        Ok(Waveform { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn note_frequency(pitch: u8) -> f64 {
    440.0 * 2f64.powf((f64::from(pitch) - 69.0) / 12.0)
}

const ATTACK_S: f64 = 0.01;
const HARMONIC_AMPS: [f64; 3] = [1.0, 0.5, 0.25];

/// Raw additive synthesis without normalization. Disjoint note sets add
/// sample-exactly.
fn render(track: &NoteTrack, n_samples: usize) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE);
    let mut out = vec![0.0f64; n_samples];
    let nyquist = sr / 2.0;
    for note in track.notes() {
        let f0 = note_frequency(note.pitch);
        let start = (note.onset_s * sr).round() as usize;
        let end = ((note.offset_s * sr).round() as usize).min(n_samples);
        for i in start..end {
            let t = i as f64 / sr;
            let since_on = t - note.onset_s;
            let until_off = note.offset_s - t;
            let env = (since_on / ATTACK_S).min(until_off / ATTACK_S).min(1.0).max(0.0);
            let mut s = 0.0;
            for (h, amp) in HARMONIC_AMPS.iter().enumerate() {
                let f = f0 * (h as f64 + 1.0);
                if f >= nyquist {
                    break;
                }
                s += amp * (2.0 * std::f64::consts::PI * f * since_on).sin();
            }
            out[i] += env * s;
        }
    }
    out
}

/// Synthesize a track to a peak-normalized waveform of the given duration.
pub fn synthesize(track: &NoteTrack, duration_s: f64) -> Waveform {
    let n = (duration_s * f64::from(SAMPLE_RATE)).round() as usize;
    let mut samples = render(track, n);
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let scale = 0.5 / peak;
        for s in &mut samples {
            *s = (*s * scale).clamp(-1.0, 1.0);
        }
    }
    Waveform { samples }
}

/// Split a waveform into non-overlapping segments, zero-padding the tail.
pub fn segment_waveform(w: &Waveform) -> Vec<Waveform> {
    let n_segments = w.len().div_ceil(SEGMENT_SAMPLES);
    (0..n_segments)
        .map(|k| {
            let start = k * SEGMENT_SAMPLES;
            let end = (start + SEGMENT_SAMPLES).min(w.len());
            let mut samples = w.samples[start..end].to_vec();
            samples.resize(SEGMENT_SAMPLES, 0.0);
            Waveform { samples }
        })
        .collect()
}

/// Assign notes to segments by onset. Times stay absolute; the tokenizer
/// subtracts the segment start. The final partial segment is kept partial.
pub fn segment_notes(track: &NoteTrack) -> Vec<Vec<NoteEvent>> {
    let Some(max_onset) = track.notes().iter().map(|n| n.onset_s).fold(None, |m: Option<f64>, o| {
        Some(m.map_or(o, |m| m.max(o)))
    }) else {
        return Vec::new();
    };
    let n_segments = (max_onset / SEGMENT_SECONDS).floor() as usize + 1;
    let mut out = vec![Vec::new(); n_segments];
    for n in track.notes() {
        let k = ((n.onset_s / SEGMENT_SECONDS).floor() as usize).min(n_segments - 1);
        out[k].push(*n);
    }
    out
}

/// Log-power mel spectrogram of one segment: 512 bands x 256 frames,
/// stored band-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f64>,
    pub segment_index: usize,
}

impl MelSpectrogram {
    pub fn from_values(values: Vec<f64>, segment_index: usize) -> Result<Self, AudioError> {
        if values.len() != N_MELS * N_FRAMES {
            return Err(AudioError::WrongShape { expected: N_MELS * N_FRAMES, got: values.len() });
        }
        Ok(MelSpectrogram { values, segment_index })
    }

    pub fn get(&self, band: usize, frame: usize) -> f64 {
        self.values[band * N_FRAMES + frame]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

struct MelBank {
    /// Per filter: first FFT bin with nonzero weight, then the weights.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

fn mel_bank() -> &'static MelBank {
    static BANK: OnceLock<MelBank> = OnceLock::new();
    BANK.get_or_init(|| {
        let n_bins = N_FFT / 2 + 1;
        let mel_lo = hz_to_mel(MEL_FMIN);
        let mel_hi = hz_to_mel(MEL_FMAX);
        let delta = (mel_hi - mel_lo) / (N_MELS + 1) as f64;
        let bin_mels: Vec<f64> = (0..n_bins)
            .map(|k| hz_to_mel(k as f64 * f64::from(SAMPLE_RATE) / N_FFT as f64))
            .collect();
        let mut filters = Vec::with_capacity(N_MELS);
        let mut centers_hz = Vec::with_capacity(N_MELS);
        for i in 0..N_MELS {
            let center = mel_lo + (i + 1) as f64 * delta;
            centers_hz.push(mel_to_hz(center));
            let mut start = None;
            let mut weights = Vec::new();
            for (k, &bm) in bin_mels.iter().enumerate() {
                let w = 1.0 - (bm - center).abs() / delta;
                if w > 0.0 {
                    if start.is_none() {
                        start = Some(k);
                    }
                    weights.push(w);
                } else if start.is_some() {
                    break;
                }
            }
            filters.push((start.unwrap_or(0), weights));
        }
        MelBank { filters, centers_hz }
    })
}

/// Center frequencies of the mel filters, Hz. Exposed for oracle tests.
pub fn mel_center_frequencies() -> &'static [f64] {
    &mel_bank().centers_hz
}

fn fft_plan() -> Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(N_FFT)).clone()
}

/// Compute the log-mel spectrogram of exactly one segment.
///
/// Frames are centered with reflect padding; the native 268 frames are
/// center-cropped to 256 so the patch grid comes out at 512 tokens.
pub fn logmel(w: &Waveform, segment_index: usize) -> Result<MelSpectrogram, AudioError> {
    if w.len() != SEGMENT_SAMPLES {
        return Err(AudioError::WrongLength { expected: SEGMENT_SAMPLES, got: w.len() });
    }
    if w.samples.iter().any(|s| !s.is_finite()) {
        return Err(AudioError::NonFinite);
    }

    let window: Vec<f64> = (0..N_FFT)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / N_FFT as f64).cos())
        .collect();
    let fft = fft_plan();
    let bank = mel_bank();
    let half = N_FFT / 2;
    let len = w.len() as isize;
    let sample_at = |i: isize| -> f64 {
        // reflect padding about the first/last sample
        let idx = if i < 0 { -i } else if i >= len { 2 * (len - 1) - i } else { i };
        w.samples[idx as usize]
    };

    let crop = (NATIVE_FRAMES - N_FRAMES) / 2;
    let mut values = vec![0.0f64; N_MELS * N_FRAMES];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut power = vec![0.0f64; half + 1];
    for out_frame in 0..N_FRAMES {
        let k = out_frame + crop;
        let center = (k * HOP) as isize;
        for (n, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(sample_at(center - half as isize + n as isize) * window[n], 0.0);
        }
        fft.process(&mut buf);
        for (bin, p) in power.iter_mut().enumerate() {
            *p = buf[bin].norm_sqr();
        }
        for (band, (start, weights)) in bank.filters.iter().enumerate() {
            let mut acc = 0.0;
            for (j, wgt) in weights.iter().enumerate() {
                acc += wgt * power[start + j];
            }
            values[band * N_FRAMES + out_frame] = acc.max(MEL_FLOOR).ln();
        }
    }
    Ok(MelSpectrogram { values, segment_index })
}

/// 512 flattened 16x16 patches in pitch-major scan order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    patches: Vec<f64>,
}

impl PatchGrid {
    pub fn patch(&self, p: usize) -> &[f64] {
        &self.patches[p * PATCH_DIM..(p + 1) * PATCH_DIM]
    }

    pub fn values(&self) -> &[f64] {
        &self.patches
    }

    pub fn from_values(patches: Vec<f64>) -> Result<Self, AudioError> {
        if patches.len() != N_PATCHES * PATCH_DIM {
            return Err(AudioError::WrongShape { expected: N_PATCHES * PATCH_DIM, got: patches.len() });
        }
        Ok(PatchGrid { patches })
    }

    /// Grid coordinates of patch index p: (pitch_patch, time_patch).
    pub fn coords(p: usize) -> (usize, usize) {
        (p / TIME_PATCHES, p % TIME_PATCHES)
    }
}

/// Cut the spectrogram into 16x16 patches: patch (i, j) covers bands
/// 16i..16i+16 and frames 16j..16j+16, flattened row-major; patches are laid
/// out pitch-major (p = i * 16 + j).
pub fn patchify(m: &MelSpectrogram) -> PatchGrid {
    let mut patches = vec![0.0f64; N_PATCHES * PATCH_DIM];
    for i in 0..PITCH_PATCHES {
        for j in 0..TIME_PATCHES {
            let p = i * TIME_PATCHES + j;
            for r in 0..16 {
                for c in 0..16 {
                    patches[p * PATCH_DIM + r * 16 + c] = m.get(16 * i + r, 16 * j + c);
                }
            }
        }
    }
    PatchGrid { patches }
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(g: &PatchGrid, segment_index: usize) -> MelSpectrogram {
    let mut values = vec![0.0f64; N_MELS * N_FRAMES];
    for i in 0..PITCH_PATCHES {
        for j in 0..TIME_PATCHES {
            let p = i * TIME_PATCHES + j;
            for r in 0..16 {
                for c in 0..16 {
                    values[(16 * i + r) * N_FRAMES + 16 * j + c] = g.patches[p * PATCH_DIM + r * 16 + c];
                }
            }
        }
    }
    MelSpectrogram { values, segment_index }
}

/// Write mono 16-bit PCM at 16 kHz.
pub fn write_wav(path: &std::path::Path, w: &Waveform) -> Result<(), AudioError> {
    let mut out: Vec<u8> = Vec::with_capacity(44 + w.len() * 2);
    let data_len = (w.len() * 2) as u32;
    out.extend(b"RIFF");
    out.extend((36 + data_len).to_le_bytes());
    out.extend(b"WAVE");
    out.extend(b"fmt ");
    out.extend(16u32.to_le_bytes());
    out.extend(1u16.to_le_bytes()); // PCM
    out.extend(1u16.to_le_bytes()); // mono
    out.extend(SAMPLE_RATE.to_le_bytes());
    out.extend((SAMPLE_RATE * 2).to_le_bytes());
    out.extend(2u16.to_le_bytes());
    out.extend(16u16.to_le_bytes());
    out.extend(b"data");
    out.extend(data_len.to_le_bytes());
    for s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend(q.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read mono 16-bit PCM at 16 kHz; anything else is a format error.
pub fn read_wav(path: &std::path::Path) -> Result<Waveform, AudioError> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: &str| AudioError::WavFormat(msg.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut format_ok = false;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + len;
        if body_end > bytes.len() {
            return Err(fail("truncated chunk"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(fail("fmt chunk too short"));
                }
                let audio_format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if audio_format != 1 || channels != 1 || rate != SAMPLE_RATE || bits != 16 {
                    return Err(fail("expected mono 16-bit PCM at 16 kHz"));
                }
                format_ok = true;
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (len & 1); // chunks are word-aligned
    }
    let (true, Some(data)) = (format_ok, data) else {
        return Err(fail("missing fmt or data chunk"));
    };
    let samples = data
        .chunks_exact(2)
        .map(|c| (f64::from(i16::from_le_bytes([c[0], c[1]])) / 32767.0).clamp(-1.0, 1.0))
        .collect();
    Waveform::new(samples)
}
