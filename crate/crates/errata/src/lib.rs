//! Music practice error detection, desk scale.
//!
//! The pipeline: inject synthetic practice mistakes into a reference note
//! track, synthesize both versions to audio, encode log-mel patch grids with
//! a two-stream encoder whose layers exchange information through
//! cross-attention alignment modules, and decode MIDI-like tokens that label
//! every note as correct, missed, or extra. A DTW alignment baseline and the
//! per-category error-detection F1 metric close the loop.

pub mod analysis;
pub mod audio;
pub mod baseline;
pub mod errorgen;
pub mod eval;
pub mod model;
pub mod notes;
pub mod tensor;
pub mod tokens;
pub mod train;

pub use notes::{ErrorLabel, NoteEvent, NoteTrack};
