//! Two-stream encoder with per-layer cross-attention alignment modules, the
//! late/early-fusion ablation variants, and the autoregressive decoder with
//! symbolic-prompt prefixing.
//!
//! One encoder block of the ladder variant updates the score stream first,
//! then the practice stream against the already-updated score:
//!
//! ```text
//! ref'  = ViT_ref (ref  + CA(q=ref,  kv=prac))
//! prac' = ViT_prac(prac + CA(q=prac, kv=ref'))
//! ```
//!
//! The final states are concatenated along the token axis (1024 tokens) and
//! projected to the decoder width. Late fusion runs independent per-stream
//! blocks followed by joint self-attention blocks over the concatenation;
//! early fusion shares one stream's parameters and runs every block jointly.

pub mod checkpoint;

use crate::audio::{PatchGrid, N_PATCHES, PATCH_DIM, TIME_PATCHES};
use crate::tensor::{Init, ParamId, ParamSet, Scalar, Tape, Var};
use crate::tokens::{vocab, Role, TokenSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Encoder fusion topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Fusion {
    /// Alternating cross-attention alignment modules between every block.
    Ladder,
    /// Independent per-stream blocks, then `l_joint` joint blocks over the
    /// token concatenation. `l_joint == 0` is the fully decoupled topology
    /// used by degeneracy checks.
    LateFusion { l_joint: usize },
    /// All blocks joint, per-stream parameters shared.
    EarlyFusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_enc: usize,
    pub d_dec: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub vocab_size: usize,
    pub max_target_len: usize,
    pub fusion: Fusion,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the overfit harness.
    pub fn toy() -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_enc: 64,
            d_dec: 64,
            heads: 4,
            ff_mult: 4,
            vocab_size: vocab::SIZE as usize,
            max_target_len: 128,
            fusion: Fusion::Ladder,
            seed: 0,
        }
    }

    /// Reference configuration matching the published model dimensions.
    pub fn paper_scale() -> Self {
        ModelConfig {
            enc_layers: 12,
            dec_layers: 8,
            d_enc: 768,
            d_dec: 512,
            heads: 8,
            ff_mult: 4,
            vocab_size: vocab::SIZE as usize,
            max_target_len: 512,
            fusion: Fusion::Ladder,
            seed: 0,
        }
    }

    /// Decoder position budget: prompt plus target, with the prompt allowed
    /// up to one target length.
    pub fn dec_positions(&self) -> usize {
        2 * self.max_target_len
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(ModelError::Config("layer counts must be positive".into()));
        }
        if self.d_enc % self.heads != 0 || self.d_dec % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_enc {} and d_dec {} must be divisible by heads {}",
                self.d_enc, self.d_dec, self.heads
            )));
        }
        if self.vocab_size < vocab::SIZE as usize {
            return Err(ModelError::Config(format!(
                "vocab_size {} below token vocabulary {}",
                self.vocab_size,
                vocab::SIZE
            )));
        }
        if self.max_target_len < 2 {
            return Err(ModelError::Config("max_target_len must be at least 2".into()));
        }
        if let Fusion::LateFusion { l_joint } = self.fusion {
            if l_joint > self.enc_layers {
                return Err(ModelError::Config(format!(
                    "l_joint {} exceeds enc_layers {}",
                    l_joint, self.enc_layers
                )));
            }
        }
        Ok(())
    }

    fn per_stream_layers(&self) -> usize {
        match self.fusion {
            Fusion::Ladder => self.enc_layers,
            Fusion::LateFusion { l_joint } => self.enc_layers - l_joint,
            Fusion::EarlyFusion => 0,
        }
    }

    fn joint_layers(&self) -> usize {
        self.enc_layers - self.per_stream_layers()
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    // CA modules carry no biases so a zeroed value/output map really does
    // silence the module.
    bq: Option<ParamId>,
    bk: Option<ParamId>,
    bv: Option<ParamId>,
    bo: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct BlockParams {
    ln1: (ParamId, ParamId),
    attn: AttnParams,
    ln2: (ParamId, ParamId),
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct DecBlockParams {
    ln1: (ParamId, ParamId),
    self_attn: AttnParams,
    ln2: (ParamId, ParamId),
    cross: AttnParams,
    ln3: (ParamId, ParamId),
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct StreamEmbed {
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
}

/// All learnable tensors plus the handles the forward pass needs. Shapes are
/// a pure function of [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct ModelParameters<S> {
    pub config: ModelConfig,
    pub set: ParamSet<S>,
    embeds: [StreamEmbed; 2], // EarlyFusion registers one and aliases it
    stream_blocks: Vec<[BlockParams; 2]>,
    ca_blocks: Vec<[AttnParams; 2]>, // [into_ref, into_prac]
    joint_blocks: Vec<BlockParams>,
    stream_emb: Option<ParamId>,
    final_ln: (ParamId, ParamId),
    proj_w: ParamId,
    proj_b: ParamId,
    dec_tok: ParamId,
    dec_pos: ParamId,
    dec_blocks: Vec<DecBlockParams>,
    dec_final_ln: (ParamId, ParamId),
    logits_w: ParamId,
    logits_b: ParamId,
}

const INIT_GAIN: f64 = 0.02;

struct Builder<'r, S: Scalar> {
    set: ParamSet<S>,
    rng: &'r mut ChaCha8Rng,
}

impl<S: Scalar> Builder<'_, S> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.set.register(name, rows, cols, Init::Uniform { gain: INIT_GAIN }, self.rng)
    }

    fn bias(&mut self, name: String, cols: usize) -> ParamId {
        self.set.register(name, 1, cols, Init::Zeros, self.rng)
    }

    fn layer_norm(&mut self, prefix: &str, cols: usize) -> (ParamId, ParamId) {
        let g = self.set.register(format!("{prefix}.g"), 1, cols, Init::Ones, self.rng);
        let b = self.set.register(format!("{prefix}.b"), 1, cols, Init::Zeros, self.rng);
        (g, b)
    }

    fn attn(&mut self, prefix: &str, d: usize, biases: bool) -> AttnParams {
        let wq = self.weight(format!("{prefix}.wq"), d, d);
        let wk = self.weight(format!("{prefix}.wk"), d, d);
        let wv = self.weight(format!("{prefix}.wv"), d, d);
        let wo = self.weight(format!("{prefix}.wo"), d, d);
        let (bq, bk, bv, bo) = if biases {
            (
                Some(self.bias(format!("{prefix}.bq"), d)),
                Some(self.bias(format!("{prefix}.bk"), d)),
                Some(self.bias(format!("{prefix}.bv"), d)),
                Some(self.bias(format!("{prefix}.bo"), d)),
            )
        } else {
            (None, None, None, None)
        };
        AttnParams { wq, wk, wv, wo, bq, bk, bv, bo }
    }

    fn block(&mut self, prefix: &str, d: usize, ff_mult: usize) -> BlockParams {
        BlockParams {
            ln1: self.layer_norm(&format!("{prefix}.ln1"), d),
            attn: self.attn(&format!("{prefix}.attn"), d, true),
            ln2: self.layer_norm(&format!("{prefix}.ln2"), d),
            ffn_w1: self.weight(format!("{prefix}.ffn.w1"), d, d * ff_mult),
            ffn_b1: self.bias(format!("{prefix}.ffn.b1"), d * ff_mult),
            ffn_w2: self.weight(format!("{prefix}.ffn.w2"), d * ff_mult, d),
            ffn_b2: self.bias(format!("{prefix}.ffn.b2"), d),
        }
    }
}

impl<S: Scalar> ModelParameters<S> {
    /// Deterministic initialization from `config.seed`: weights and
    /// embeddings U(-0.02, 0.02), norms identity, biases zero.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder { set: ParamSet::new(), rng: &mut rng };
        let d = config.d_enc;

        let make_embed = |b: &mut Builder<S>, stream: &str| StreamEmbed {
            patch_w: b.weight(format!("embed.{stream}.patch.w"), PATCH_DIM, d),
            patch_b: b.bias(format!("embed.{stream}.patch.b"), d),
            pos: b.weight(format!("embed.{stream}.pos"), N_PATCHES, d),
        };
        let embeds = match config.fusion {
            Fusion::EarlyFusion => {
                let shared = make_embed(&mut b, "shared");
                [shared, shared]
            }
            _ => {
                let r = make_embed(&mut b, "ref");
                let p = make_embed(&mut b, "prac");
                [r, p]
            }
        };

        let mut stream_blocks = Vec::new();
        for i in 0..config.per_stream_layers() {
            let r = b.block(&format!("enc.ref.{i}"), d, config.ff_mult);
            let p = b.block(&format!("enc.prac.{i}"), d, config.ff_mult);
            stream_blocks.push([r, p]);
        }

        let mut ca_blocks = Vec::new();
        if config.fusion == Fusion::Ladder {
            for i in 0..config.enc_layers {
                let into_ref = b.attn(&format!("ca.{i}.into_ref"), d, false);
                let into_prac = b.attn(&format!("ca.{i}.into_prac"), d, false);
                ca_blocks.push([into_ref, into_prac]);
            }
        }

        let mut joint_blocks = Vec::new();
        for j in 0..config.joint_layers() {
            joint_blocks.push(b.block(&format!("enc.joint.{j}"), d, config.ff_mult));
        }
        let stream_emb = if config.joint_layers() > 0 {
            Some(b.weight("enc.stream_emb".into(), 2, d))
        } else {
            None
        };

        let final_ln = b.layer_norm("enc.final_ln", d);
        let proj_w = b.weight("enc.proj.w".into(), d, config.d_dec);
        let proj_b = b.bias("enc.proj.b".into(), config.d_dec);

        let dd = config.d_dec;
        let dec_tok = b.weight("dec.tok_emb".into(), config.vocab_size, dd);
        let dec_pos = b.weight("dec.pos".into(), config.dec_positions(), dd);
        let mut dec_blocks = Vec::new();
        for i in 0..config.dec_layers {
            dec_blocks.push(DecBlockParams {
                ln1: b.layer_norm(&format!("dec.{i}.ln1"), dd),
                self_attn: b.attn(&format!("dec.{i}.self"), dd, true),
                ln2: b.layer_norm(&format!("dec.{i}.ln2"), dd),
                cross: b.attn(&format!("dec.{i}.cross"), dd, true),
                ln3: b.layer_norm(&format!("dec.{i}.ln3"), dd),
                ffn_w1: b.weight(format!("dec.{i}.ffn.w1"), dd, dd * config.ff_mult),
                ffn_b1: b.bias(format!("dec.{i}.ffn.b1"), dd * config.ff_mult),
                ffn_w2: b.weight(format!("dec.{i}.ffn.w2"), dd * config.ff_mult, dd),
                ffn_b2: b.bias(format!("dec.{i}.ffn.b2"), dd),
            });
        }
        let dec_final_ln = b.layer_norm("dec.final_ln", dd);
        let logits_w = b.weight("dec.logits.w".into(), dd, config.vocab_size);
        let logits_b = b.bias("dec.logits.b".into(), config.vocab_size);

        Ok(ModelParameters {
            config,
            set: b.set,
            embeds,
            stream_blocks,
            ca_blocks,
            joint_blocks,
            stream_emb,
            final_ln,
            proj_w,
            proj_b,
            dec_tok,
            dec_pos,
            dec_blocks,
            dec_final_ln,
            logits_w,
            logits_b,
        })
    }

    pub fn validate_finite(&self) -> Result<(), ModelError> {
        for id in self.set.ids() {
            if self.set.data(id).iter().any(|x| !x.is_finite()) {
                return Err(ModelError::Contract(format!(
                    "parameter {} contains non-finite values",
                    self.set.name(id)
                )));
            }
        }
        Ok(())
    }

    /// Rebuild with the same structure but different precision.
    pub fn cast<T: Scalar>(&self) -> ModelParameters<T> {
        ModelParameters {
            config: self.config,
            set: self.set.cast(),
            embeds: self.embeds,
            stream_blocks: self.stream_blocks.clone(),
            ca_blocks: self.ca_blocks.clone(),
            joint_blocks: self.joint_blocks.clone(),
            stream_emb: self.stream_emb,
            final_ln: self.final_ln,
            proj_w: self.proj_w,
            proj_b: self.proj_b,
            dec_tok: self.dec_tok,
            dec_pos: self.dec_pos,
            dec_blocks: self.dec_blocks.clone(),
            dec_final_ln: self.dec_final_ln,
            logits_w: self.logits_w,
            logits_b: self.logits_b,
        }
    }
}

/// Which attention pattern a captured map belongs to. Directions name the
/// query stream first: `RefToPrac` means score queries attending into
/// practice keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnDirection {
    RefToPrac,
    PracToRef,
    SelfRef,
    SelfPrac,
    Joint,
}

/// A captured attention map plus its pitch-averaged 16x16 time-time view.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub layer: usize,
    pub direction: AttnDirection,
    pub heads: usize,
    pub tq: usize,
    pub tk: usize,
    /// heads x Tq x Tk, row-stochastic per (head, query).
    pub values: Vec<f64>,
    /// Mean over heads and the 32 pitch-patch positions on both axes,
    /// row-normalized. Present only for 512-token encoder maps.
    pub pitch_averaged: Option<Vec<f64>>,
}

impl AttentionMap {
    fn from_probs(layer: usize, direction: AttnDirection, probs: &[f64], heads: usize, tq: usize, tk: usize) -> Self {
        let pitch_averaged = (tq == N_PATCHES && tk == N_PATCHES).then(|| {
            let mut pa = vec![0.0f64; TIME_PATCHES * TIME_PATCHES];
            for h in 0..heads {
                for q in 0..tq {
                    let (_, qt) = PatchGrid::coords(q);
                    for k in 0..tk {
                        let (_, kt) = PatchGrid::coords(k);
                        pa[qt * TIME_PATCHES + kt] += probs[h * tq * tk + q * tk + k];
                    }
                }
            }
            for row in pa.chunks_mut(TIME_PATCHES) {
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    for x in row {
                        *x /= sum;
                    }
                }
            }
            pa
        });
        AttentionMap { layer, direction, heads, tq, tk, values: probs.to_vec(), pitch_averaged }
    }
}

/// Per-layer activations exposed for probing.
#[derive(Debug, Clone, Copy)]
pub enum LayerState {
    PerStream { ref_v: Var, prac_v: Var },
    Joint { both: Var },
}

struct AttnTap {
    layer: usize,
    direction: AttnDirection,
    node: Var,
}

/// Result of one encoder forward pass on a tape.
pub struct EncodeOutput {
    /// (1024, d_dec) fused context for the decoder.
    pub fused: Var,
    /// Boundary activations: index 0 is post-embedding, index i is after
    /// encoder layer i.
    pub states: Vec<LayerState>,
    taps: Vec<AttnTap>,
}

fn affine<S: Scalar>(
    tape: &mut Tape<S>,
    set: &ParamSet<S>,
    x: Var,
    w: ParamId,
    b: Option<ParamId>,
) -> Var {
    let wv = tape.param(set, w);
    let y = tape.matmul(x, wv);
    match b {
        Some(b) => {
            let bv = tape.param(set, b);
            tape.add_row(y, bv)
        }
        None => y,
    }
}

fn layer_norm<S: Scalar>(tape: &mut Tape<S>, set: &ParamSet<S>, x: Var, ln: (ParamId, ParamId)) -> Var {
    let g = tape.param(set, ln.0);
    let b = tape.param(set, ln.1);
    tape.layer_norm(x, g, b)
}

/// Pre-norm transformer block: self-attention and feed-forward, each with a
/// residual. Returns the output and the attention node.
fn vit_block<S: Scalar>(
    tape: &mut Tape<S>,
    set: &ParamSet<S>,
    blk: &BlockParams,
    x: Var,
    heads: usize,
    causal: bool,
) -> (Var, Var) {
    let h = layer_norm(tape, set, x, blk.ln1);
    let q = affine(tape, set, h, blk.attn.wq, blk.attn.bq);
    let k = affine(tape, set, h, blk.attn.wk, blk.attn.bk);
    let v = affine(tape, set, h, blk.attn.wv, blk.attn.bv);
    let a = tape.attention(q, k, v, heads, causal);
    let o = affine(tape, set, a, blk.attn.wo, blk.attn.bo);
    let x = tape.add(x, o);

    let h2 = layer_norm(tape, set, x, blk.ln2);
    let f = affine(tape, set, h2, blk.ffn_w1, Some(blk.ffn_b1));
    let f = tape.gelu(f);
    let f = affine(tape, set, f, blk.ffn_w2, Some(blk.ffn_b2));
    (tape.add(x, f), a)
}

fn check_finite<S: Scalar>(what: &str, data: &[S]) -> Result<(), ModelError> {
    if data.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::Contract(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn patch_input<S: Scalar>(tape: &mut Tape<S>, patches: &PatchGrid) -> Var {
    let data = patches.values().iter().map(|&x| S::from_f64(x)).collect();
    tape.input(data, N_PATCHES, PATCH_DIM)
}

fn patches_finite(what: &str, patches: &PatchGrid) -> Result<(), ModelError> {
    if patches.values().iter().any(|x| !x.is_finite()) {
        return Err(ModelError::Contract(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Linear patch projection plus learned positional embeddings, per stream.
pub fn embed<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParameters<S>,
    patches_ref: &PatchGrid,
    patches_prac: &PatchGrid,
) -> Result<(Var, Var), ModelError> {
    patches_finite("ref patches", patches_ref)?;
    patches_finite("prac patches", patches_prac)?;
    let mut one = |patches: &PatchGrid, e: &StreamEmbed| {
        let x = patch_input(tape, patches);
        let projected = affine(tape, &params.set, x, e.patch_w, Some(e.patch_b));
        let pos = tape.param(&params.set, e.pos);
        tape.add(projected, pos)
    };
    let r = one(patches_ref, &params.embeds[0]);
    let p = one(patches_prac, &params.embeds[1]);
    Ok((r, p))
}

/// Direction selector for [`cross_attention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaDirection {
    /// Update the score stream: queries from ref, keys/values from prac.
    IntoRef,
    /// Update the practice stream: queries from prac, keys/values from ref.
    IntoPrac,
}

/// One alignment module: multi-head cross-attention where the stream being
/// updated supplies the queries. Returns (attended features, attention node).
pub fn cross_attention<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParameters<S>,
    layer: usize,
    direction: CaDirection,
    q_stream: Var,
    kv_stream: Var,
) -> Result<(Var, Var), ModelError> {
    if params.config.fusion != Fusion::Ladder {
        return Err(ModelError::Contract("cross-attention modules exist only in the ladder encoder".into()));
    }
    if layer >= params.ca_blocks.len() {
        return Err(ModelError::Contract(format!("layer {layer} out of range")));
    }
    check_finite("q_stream", tape.data(q_stream))?;
    check_finite("kv_stream", tape.data(kv_stream))?;
    let ca = match direction {
        CaDirection::IntoRef => params.ca_blocks[layer][0],
        CaDirection::IntoPrac => params.ca_blocks[layer][1],
    };
    let q = affine(tape, &params.set, q_stream, ca.wq, None);
    let k = affine(tape, &params.set, kv_stream, ca.wk, None);
    let v = affine(tape, &params.set, kv_stream, ca.wv, None);
    let a = tape.attention(q, k, v, params.config.heads, false);
    let o = affine(tape, &params.set, a, ca.wo, None);
    Ok((o, a))
}

/// One ladder encoder block: align-and-fuse into ref, run its ViT block,
/// then align-and-fuse the updated ref into prac and run its block.
pub fn ladder_block<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParameters<S>,
    layer: usize,
    p_ref: Var,
    p_prac: Var,
) -> Result<(Var, Var, Vec<(AttnDirection, Var)>), ModelError> {
    if layer >= params.config.enc_layers {
        return Err(ModelError::Contract(format!("layer {layer} out of range")));
    }
    let heads = params.config.heads;
    let set = &params.set;
    let mut taps = Vec::new();

    let (ca_ref, map_ref) = cross_attention(tape, params, layer, CaDirection::IntoRef, p_ref, p_prac)?;
    taps.push((AttnDirection::RefToPrac, map_ref));
    let fused_ref = tape.add(p_ref, ca_ref);
    let (next_ref, self_ref) = vit_block(tape, set, &params.stream_blocks[layer][0], fused_ref, heads, false);
    taps.push((AttnDirection::SelfRef, self_ref));

    let (ca_prac, map_prac) = cross_attention(tape, params, layer, CaDirection::IntoPrac, p_prac, next_ref)?;
    taps.push((AttnDirection::PracToRef, map_prac));
    let fused_prac = tape.add(p_prac, ca_prac);
    let (next_prac, self_prac) = vit_block(tape, set, &params.stream_blocks[layer][1], fused_prac, heads, false);
    taps.push((AttnDirection::SelfPrac, self_prac));

    Ok((next_ref, next_prac, taps))
}

/// Full encoder forward pass for the configured fusion variant.
pub fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParameters<S>,
    patches_ref: &PatchGrid,
    patches_prac: &PatchGrid,
) -> Result<EncodeOutput, ModelError> {
    let cfg = &params.config;
    let set = &params.set;
    let heads = cfg.heads;
    let (mut r, mut p) = embed(tape, params, patches_ref, patches_prac)?;
    let mut states = vec![LayerState::PerStream { ref_v: r, prac_v: p }];
    let mut taps = Vec::new();

    let joint_in = match cfg.fusion {
        Fusion::Ladder => {
            for layer in 0..cfg.enc_layers {
                let (nr, np, layer_taps) = ladder_block(tape, params, layer, r, p)?;
                r = nr;
                p = np;
                for (direction, node) in layer_taps {
                    taps.push(AttnTap { layer, direction, node });
                }
                states.push(LayerState::PerStream { ref_v: r, prac_v: p });
            }
            tape.concat_rows(r, p)
        }
        Fusion::LateFusion { .. } | Fusion::EarlyFusion => {
            for layer in 0..cfg.per_stream_layers() {
                let (nr, sr) = vit_block(tape, set, &params.stream_blocks[layer][0], r, heads, false);
                let (np, sp) = vit_block(tape, set, &params.stream_blocks[layer][1], p, heads, false);
                r = nr;
                p = np;
                taps.push(AttnTap { layer, direction: AttnDirection::SelfRef, node: sr });
                taps.push(AttnTap { layer, direction: AttnDirection::SelfPrac, node: sp });
                states.push(LayerState::PerStream { ref_v: r, prac_v: p });
            }
            let mut both = tape.concat_rows(r, p);
            if cfg.joint_layers() > 0 {
                let emb_table = tape.param(set, params.stream_emb.expect("joint layers imply stream emb"));
                let mut ids = vec![0usize; N_PATCHES];
                ids.extend(std::iter::repeat(1usize).take(N_PATCHES));
                let emb = tape.gather(emb_table, ids);
                both = tape.add(both, emb);
            }
            for (j, blk) in params.joint_blocks.iter().enumerate() {
                let layer = cfg.per_stream_layers() + j;
                let (nb, sj) = vit_block(tape, set, blk, both, heads, false);
                both = nb;
                taps.push(AttnTap { layer, direction: AttnDirection::Joint, node: sj });
                states.push(LayerState::Joint { both });
            }
            both
        }
    };

    let normed = layer_norm(tape, set, joint_in, params.final_ln);
    let fused = affine(tape, set, normed, params.proj_w, Some(params.proj_b));
    Ok(EncodeOutput { fused, states, taps })
}

/// Extract every captured attention map from an encoder pass.
pub fn attention_maps<S: Scalar>(tape: &Tape<S>, out: &EncodeOutput) -> Vec<AttentionMap> {
    out.taps
        .iter()
        .map(|tap| {
            let (probs, heads, tq, tk) = tape.attention_probs(tap.node).expect("tap is an attention node");
            let probs_f64: Vec<f64> = probs.iter().map(|&x| x.to_f64()).collect();
            AttentionMap::from_probs(tap.layer, tap.direction, &probs_f64, heads, tq, tk)
        })
        .collect()
}

/// Run the decoder over `prompt ++ SOS ++ target-so-far` token ids against a
/// fused encoder context. Returns logits, one row per input position.
pub fn decode_step<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParameters<S>,
    fused: Var,
    input_ids: &[u32],
) -> Result<Var, ModelError> {
    let cfg = &params.config;
    if input_ids.is_empty() {
        return Err(ModelError::Contract("decoder input must be non-empty".into()));
    }
    if input_ids.len() > cfg.dec_positions() {
        return Err(ModelError::Contract(format!(
            "decoder input length {} exceeds position budget {}",
            input_ids.len(),
            cfg.dec_positions()
        )));
    }
    for &id in input_ids {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::Contract(format!("token id {id} outside vocabulary")));
        }
    }
    let set = &params.set;
    let tok_table = tape.param(set, params.dec_tok);
    let tok = tape.gather(tok_table, input_ids.iter().map(|&i| i as usize).collect());
    let pos_table = tape.param(set, params.dec_pos);
    let pos = tape.gather(pos_table, (0..input_ids.len()).collect());
    let mut x = tape.add(tok, pos);

    for blk in &params.dec_blocks {
        let h = layer_norm(tape, set, x, blk.ln1);
        let q = affine(tape, set, h, blk.self_attn.wq, blk.self_attn.bq);
        let k = affine(tape, set, h, blk.self_attn.wk, blk.self_attn.bk);
        let v = affine(tape, set, h, blk.self_attn.wv, blk.self_attn.bv);
        let a = tape.attention(q, k, v, cfg.heads, true);
        let o = affine(tape, set, a, blk.self_attn.wo, blk.self_attn.bo);
        x = tape.add(x, o);

        let h = layer_norm(tape, set, x, blk.ln2);
        let q = affine(tape, set, h, blk.cross.wq, blk.cross.bq);
        let k = affine(tape, set, fused, blk.cross.wk, blk.cross.bk);
        let v = affine(tape, set, fused, blk.cross.wv, blk.cross.bv);
        let a = tape.attention(q, k, v, cfg.heads, false);
        let o = affine(tape, set, a, blk.cross.wo, blk.cross.bo);
        x = tape.add(x, o);

        let h = layer_norm(tape, set, x, blk.ln3);
        let f = affine(tape, set, h, blk.ffn_w1, Some(blk.ffn_b1));
        let f = tape.gelu(f);
        let f = affine(tape, set, f, blk.ffn_w2, Some(blk.ffn_b2));
        x = tape.add(x, f);
    }
    let x = layer_norm(tape, set, x, params.dec_final_ln);
    Ok(affine(tape, set, x, params.logits_w, Some(params.logits_b)))
}

/// A fused encoder output lifted off its tape, reusable across decode steps.
#[derive(Debug, Clone)]
pub struct EncodedContext<S> {
    pub data: Vec<S>,
    pub rows: usize,
    pub d: usize,
}

/// Run the encoder once and keep only the fused context.
pub fn encode_context<S: Scalar>(
    params: &ModelParameters<S>,
    patches_ref: &PatchGrid,
    patches_prac: &PatchGrid,
) -> Result<EncodedContext<S>, ModelError> {
    let mut tape = Tape::new();
    let out = encode(&mut tape, params, patches_ref, patches_prac)?;
    let (rows, d) = tape.shape(out.fused);
    Ok(EncodedContext { data: tape.data(out.fused).to_vec(), rows, d })
}

/// Greedy autoregressive decoding: start after `prompt ++ SOS`, append the
/// argmax token each step (ties break to the lowest id), stop at EOS or when
/// the target budget is exhausted (EOS is then forced). Always returns a
/// well-formed SOS..EOS target sequence.
pub fn greedy_decode<S: Scalar>(
    params: &ModelParameters<S>,
    ctx: &EncodedContext<S>,
    prompt: &[u32],
    max_len: usize,
) -> Result<TokenSequence, ModelError> {
    let mut ids: Vec<u32> = prompt.to_vec();
    ids.push(vocab::SOS);
    let budget = max_len.min(params.config.dec_positions().saturating_sub(ids.len()));
    let mut out = vec![vocab::SOS];
    loop {
        if out.len() - 1 >= budget {
            out.push(vocab::EOS);
            break;
        }
        let mut tape = Tape::new();
        let fused = tape.input(ctx.data.clone(), ctx.rows, ctx.d);
        let logits = decode_step(&mut tape, params, fused, &ids)?;
        let (rows, cols) = tape.shape(logits);
        let last = &tape.data(logits)[(rows - 1) * cols..rows * cols];
        let mut best = 0usize;
        for (i, &x) in last.iter().enumerate() {
            if x > last[best] {
                best = i;
            }
        }
        let token = best as u32;
        out.push(token);
        if token == vocab::EOS {
            break;
        }
        ids.push(token);
    }
    Ok(TokenSequence { ids: out, role: Role::Target })
}
