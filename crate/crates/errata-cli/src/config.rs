//! Declarative run configuration.
//!
//! Every field defaults to the published value where one exists. Unknown
//! keys are rejected, and the effective configuration is echoed to
//! `config.lock.json` in every output directory so a run can be reproduced
//! from its lock file.

use anyhow::{bail, Context, Result};
use errata::errorgen::ErrorGenConfig;
use errata::eval::DEFAULT_ONSET_TOL;
use errata::model::ModelConfig;
use errata::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// The audio front end is compile-time fixed; this section documents the
/// values and rejects configs that try to change them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioSection {
    pub sample_rate: u32,
    pub segment_seconds: f64,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub mel_floor: f64,
}

impl Default for AudioSection {
    fn default() -> Self {
        AudioSection {
            sample_rate: errata::audio::SAMPLE_RATE,
            segment_seconds: errata::audio::SEGMENT_SECONDS,
            n_fft: errata::audio::N_FFT,
            hop: errata::audio::HOP,
            n_mels: errata::audio::N_MELS,
            mel_floor: errata::audio::MEL_FLOOR,
        }
    }
}

impl AudioSection {
    fn validate(&self) -> Result<()> {
        let fixed = AudioSection::default();
        if self.sample_rate != fixed.sample_rate
            || self.segment_seconds != fixed.segment_seconds
            || self.n_fft != fixed.n_fft
            || self.hop != fixed.hop
            || self.n_mels != fixed.n_mels
            || self.mel_floor != fixed.mel_floor
        {
            bail!("audio front-end parameters are fixed in this build: {fixed:?}");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub onset_tol: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { onset_tol: DEFAULT_ONSET_TOL }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_enc: usize,
    pub d_dec: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_target_len: usize,
    pub fusion: errata::model::Fusion,
}

impl Default for ModelSection {
    fn default() -> Self {
        let paper = ModelConfig::paper_scale();
        ModelSection {
            enc_layers: paper.enc_layers,
            dec_layers: paper.dec_layers,
            d_enc: paper.d_enc,
            d_dec: paper.d_dec,
            heads: paper.heads,
            ff_mult: paper.ff_mult,
            max_target_len: paper.max_target_len,
            fusion: paper.fusion,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            d_enc: self.d_enc,
            d_dec: self.d_dec,
            heads: self.heads,
            ff_mult: self.ff_mult,
            vocab_size: errata::tokens::vocab::SIZE as usize,
            max_target_len: self.max_target_len,
            fusion: self.fusion,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub errorgen: ErrorGenConfig,
    pub audio: AudioSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.audio.validate()?;
        cfg.errorgen.validate().map_err(|e| anyhow::anyhow!(e.to_string()))?;
        cfg.train.validate().map_err(|e| anyhow::anyhow!(e.to_string()))?;
        Ok(cfg)
    }
}

/// Everything that determines a run: the effective config plus the global
/// flags and the subcommand arguments.
#[derive(Debug, Serialize)]
pub struct LockFile<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub jobs: usize,
    pub args: serde_json::Value,
    pub config: &'a RunConfig,
}

pub fn write_lock(dir: &Path, lock: &LockFile) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("config.lock.json");
    std::fs::write(&path, serde_json::to_vec_pretty(lock)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
