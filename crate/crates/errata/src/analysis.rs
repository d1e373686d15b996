//! Representation probing over frozen encoders and attention-map dumps.
//!
//! Three probe families, all lightweight linear classifiers on per-token
//! encoder activations: locality (which grid position a token sits at),
//! globality (a 12-bin energy label of the clip), and cross-stream
//! (the opposite stream's energy bin).

use crate::audio::{self, PatchGrid, N_PATCHES, TIME_PATCHES};
use crate::model::{
    attention_maps, encode, AttnDirection, AttentionMap, LayerState, ModelError, ModelParameters,
};
use crate::notes::NoteTrack;
use crate::tensor::{Scalar, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const ENERGY_BINS: usize = 12;
pub const PROBE_EPOCHS: usize = 25;
pub const PROBE_LR: f64 = 0.1;
/// Fraction of tokens in the held-in split the probe trains and reports on.
pub const PROBE_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("probe needs at least two classes, got {0}")]
    SingleClass(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Locality,
    Globality,
    CrossStream,
}

impl ProbeKind {
    pub fn num_classes(self) -> usize {
        match self {
            ProbeKind::Locality => N_PATCHES,
            ProbeKind::Globality | ProbeKind::CrossStream => ENERGY_BINS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSel {
    Ref,
    Prac,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProbeTask {
    pub kind: ProbeKind,
    pub stream: StreamSel,
    pub layer: usize,
}

/// Token features plus labels for one probe task.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Clip energy: the largest token norm of the input patch grid, which for
/// log-power patches is a clip-level loudness summary.
fn clip_energy(patches: &PatchGrid) -> f64 {
    (0..N_PATCHES)
        .map(|p| patches.patch(p).iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Equal-width bin of `e` over the observed range.
fn energy_bin(e: f64, lo: f64, hi: f64) -> usize {
    if hi <= lo {
        return 0;
    }
    (((e - lo) / (hi - lo) * ENERGY_BINS as f64) as usize).min(ENERGY_BINS - 1)
}

fn stream_rows<S: Scalar>(
    tape: &Tape<S>,
    state: &LayerState,
    stream: StreamSel,
    d: usize,
) -> Vec<f64> {
    let take = |v: crate::tensor::Var, offset: usize| {
        tape.data(v)[offset * d..(offset + N_PATCHES) * d].iter().map(|x| x.to_f64()).collect()
    };
    match (state, stream) {
        (LayerState::PerStream { ref_v, .. }, StreamSel::Ref) => take(*ref_v, 0),
        (LayerState::PerStream { prac_v, .. }, StreamSel::Prac) => take(*prac_v, 0),
        (LayerState::Joint { both }, StreamSel::Ref) => take(*both, 0),
        (LayerState::Joint { both }, StreamSel::Prac) => take(*both, N_PATCHES),
    }
}

/// Collect frozen per-token encoder activations and the task's labels over a
/// dataset of (score, practice) patch-grid pairs.
pub fn collect_features<S: Scalar>(
    params: &ModelParameters<S>,
    dataset: &[(PatchGrid, PatchGrid)],
    task: &ProbeTask,
) -> Result<FeatureSet, AnalysisError> {
    if task.layer > params.config.enc_layers {
        return Err(AnalysisError::Contract(format!(
            "layer {} out of range (encoder has {} layers)",
            task.layer, params.config.enc_layers
        )));
    }
    // energy bin edges come from the whole dataset, both streams pooled
    let energies: Vec<(f64, f64)> =
        dataset.iter().map(|(r, p)| (clip_energy(r), clip_energy(p))).collect();
    let (lo, hi) = energies
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e), hi.max(e)));

    let d = params.config.d_enc;
    let mut features = Vec::with_capacity(dataset.len() * N_PATCHES * d);
    let mut labels = Vec::with_capacity(dataset.len() * N_PATCHES);
    for (k, (ref_patches, prac_patches)) in dataset.iter().enumerate() {
        let mut tape = Tape::new();
        let out = encode(&mut tape, params, ref_patches, prac_patches)?;
        features.extend(stream_rows(&tape, &out.states[task.layer], task.stream, d));
        let label_of = |bin_source: &PatchGrid| energy_bin(clip_energy(bin_source), lo, hi);
        for token in 0..N_PATCHES {
            let label = match (task.kind, task.stream) {
                (ProbeKind::Locality, _) => token,
                (ProbeKind::Globality, StreamSel::Ref) => label_of(ref_patches),
                (ProbeKind::Globality, StreamSel::Prac) => label_of(prac_patches),
                (ProbeKind::CrossStream, StreamSel::Ref) => label_of(prac_patches),
                (ProbeKind::CrossStream, StreamSel::Prac) => label_of(ref_patches),
            };
            labels.push(label);
        }
        let _ = k;
    }
    Ok(FeatureSet { features, dim: d, labels, num_classes: task.kind.num_classes() })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub classes_seen: usize,
    pub train_examples: usize,
}

/// Multinomial logistic regression: one linear map, softmax, full-batch
/// gradient descent for 25 epochs at lr 0.1. Returns held-in accuracy on the
/// 80% training split of a seeded shuffle.
pub fn train_probe(set: &FeatureSet, seed: u64) -> Result<ProbeResult, AnalysisError> {
    let n = set.len();
    let d = set.dim;
    let c = set.num_classes;
    let distinct: std::collections::HashSet<usize> = set.labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(AnalysisError::SingleClass(distinct.len()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((n as f64) * PROBE_TRAIN_FRACTION).round() as usize;
    let train = &order[..n_train.max(1)];

    let x = |i: usize| &set.features[i * d..(i + 1) * d];
    let mut w = vec![0.0f64; d * c];
    let mut logits = vec![0.0f64; train.len() * c];
    let mut grad = vec![0.0f64; d * c];
    let xt: Vec<f64> = train.iter().flat_map(|&i| x(i).iter().copied()).collect();
    for _ in 0..PROBE_EPOCHS {
        f64::gemm(
            train.len(), d, c, 1.0,
            &xt, d as isize, 1,
            &w, c as isize, 1,
            0.0, &mut logits, c as isize, 1,
        );
        // softmax - onehot, scaled by 1/n
        for (row, &i) in train.iter().enumerate() {
            let l = &mut logits[row * c..(row + 1) * c];
            let maxv = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in l.iter_mut() {
                *v = (*v - maxv).exp();
                sum += *v;
            }
            for v in l.iter_mut() {
                *v /= sum;
            }
            l[set.labels[i]] -= 1.0;
        }
        grad.fill(0.0);
        f64::gemm(
            d, train.len(), c, 1.0 / train.len() as f64,
            &xt, 1, d as isize,
            &logits, c as isize, 1,
            0.0, &mut grad, c as isize, 1,
        );
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= PROBE_LR * gi;
        }
    }

    let mut correct = 0usize;
    let mut row_logits = vec![0.0f64; c];
    for &i in train {
        f64::gemm(
            1, d, c, 1.0,
            x(i), d as isize, 1,
            &w, c as isize, 1,
            0.0, &mut row_logits, c as isize, 1,
        );
        let mut best = 0;
        for (k, &v) in row_logits.iter().enumerate() {
            if v > row_logits[best] {
                best = k;
            }
        }
        if best == set.labels[i] {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        accuracy: correct as f64 / train.len() as f64,
        classes_seen: distinct.len(),
        train_examples: train.len(),
    })
}

/// The six-column probe summary: locality, globality, and cross-stream
/// accuracy per stream at a fixed layer.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub layer: usize,
    pub local_score: f64,
    pub local_practice: f64,
    pub global_score: f64,
    pub global_practice: f64,
    pub cross_practice_to_score: f64,
    pub cross_score_to_practice: f64,
}

/// Run all six probes of the standard report at one layer.
pub fn probe_all<S: Scalar>(
    params: &ModelParameters<S>,
    dataset: &[(PatchGrid, PatchGrid)],
    layer: usize,
    seed: u64,
) -> Result<ProbeReport, AnalysisError> {
    let run = |kind: ProbeKind, stream: StreamSel| -> Result<f64, AnalysisError> {
        let set = collect_features(params, dataset, &ProbeTask { kind, stream, layer })?;
        Ok(train_probe(&set, seed)?.accuracy)
    };
    Ok(ProbeReport {
        layer,
        local_score: run(ProbeKind::Locality, StreamSel::Ref)?,
        local_practice: run(ProbeKind::Locality, StreamSel::Prac)?,
        global_score: run(ProbeKind::Globality, StreamSel::Ref)?,
        global_practice: run(ProbeKind::Globality, StreamSel::Prac)?,
        // cross "practice to score": practice-stream features predicting the
        // score clip's energy bin
        cross_practice_to_score: run(ProbeKind::CrossStream, StreamSel::Prac)?,
        cross_score_to_practice: run(ProbeKind::CrossStream, StreamSel::Ref)?,
    })
}

#[derive(Debug, Serialize)]
struct MapSidecar {
    layer: usize,
    direction: AttnDirection,
    heads: usize,
    tq: usize,
    tk: usize,
    rows: usize,
    cols: usize,
}

fn write_map_csv(path: &Path, grid: &[f64]) -> Result<(), AnalysisError> {
    let mut text = String::new();
    for row in grid.chunks(TIME_PATCHES) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Pitch-averaged 16x16 views of the cross-stream maps. Ladder models emit
/// the two alignment directions per layer; joint blocks emit all four
/// quadrants of their 1024-token map.
fn dumpable_maps(maps: &[AttentionMap]) -> Vec<(usize, AttnDirection, Vec<f64>)> {
    let mut out = Vec::new();
    for m in maps {
        match m.direction {
            AttnDirection::RefToPrac | AttnDirection::PracToRef => {
                if let Some(pa) = &m.pitch_averaged {
                    out.push((m.layer, m.direction, pa.clone()));
                }
            }
            AttnDirection::Joint => {
                for (direction, qoff, koff) in [
                    (AttnDirection::SelfRef, 0, 0),
                    (AttnDirection::RefToPrac, 0, N_PATCHES),
                    (AttnDirection::PracToRef, N_PATCHES, 0),
                    (AttnDirection::SelfPrac, N_PATCHES, N_PATCHES),
                ] {
                    let mut pa = vec![0.0f64; TIME_PATCHES * TIME_PATCHES];
                    for h in 0..m.heads {
                        for q in 0..N_PATCHES {
                            let (_, qt) = PatchGrid::coords(q);
                            for k in 0..N_PATCHES {
                                let (_, kt) = PatchGrid::coords(k);
                                pa[qt * TIME_PATCHES + kt] +=
                                    m.values[h * m.tq * m.tk + (q + qoff) * m.tk + (k + koff)];
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
                    out.push((m.layer, direction, pa));
                }
            }
            _ => {}
        }
    }
    out
}

fn direction_tag(d: AttnDirection) -> &'static str {
    match d {
        AttnDirection::RefToPrac => "ref_to_prac",
        AttnDirection::PracToRef => "prac_to_ref",
        AttnDirection::SelfRef => "self_ref",
        AttnDirection::SelfPrac => "self_prac",
        AttnDirection::Joint => "joint",
    }
}

/// Run the encoder on one patch pair and write every pitch-averaged
/// cross-stream map as CSV with a JSON sidecar. Returns the files written.
pub fn dump_attention<S: Scalar>(
    params: &ModelParameters<S>,
    patches_ref: &PatchGrid,
    patches_prac: &PatchGrid,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, AnalysisError> {
    std::fs::create_dir_all(out_dir)?;
    let mut tape = Tape::new();
    let out = encode(&mut tape, params, patches_ref, patches_prac)?;
    let maps = attention_maps(&tape, &out);
    let mut written = Vec::new();
    for (layer, direction, grid) in dumpable_maps(&maps) {
        let base = format!("attn_layer{layer:02}_{}", direction_tag(direction));
        let csv = out_dir.join(format!("{base}.csv"));
        write_map_csv(&csv, &grid)?;
        let sidecar = MapSidecar {
            layer,
            direction,
            heads: params.config.heads,
            tq: N_PATCHES,
            tk: N_PATCHES,
            rows: TIME_PATCHES,
            cols: TIME_PATCHES,
        };
        let json = out_dir.join(format!("{base}.json"));
        std::fs::write(&json, serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"))?;
        written.push(csv);
        written.push(json);
    }
    Ok(written)
}

/// Paired-run mode: dump maps for (score, practice), then again with the
/// score notes shifted forward by `delta` seconds before synthesis, under
/// `base/` and `shifted/`.
pub fn dump_attention_pair<S: Scalar>(
    params: &ModelParameters<S>,
    score: &NoteTrack,
    practice: &NoteTrack,
    segment_index: usize,
    delta: f64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, AnalysisError> {
    let shifted_score = shift_track(score, delta);
    let patches = |track: &NoteTrack| -> Result<PatchGrid, AnalysisError> {
        let duration = (segment_index + 1) as f64 * audio::SEGMENT_SECONDS;
        let wave = audio::synthesize(track, duration);
        let segments = audio::segment_waveform(&wave);
        let mel = audio::logmel(&segments[segment_index], segment_index)
            .map_err(|e| AnalysisError::Contract(e.to_string()))?;
        Ok(audio::patchify(&mel))
    };
    let prac_patches = patches(practice)?;
    let mut written =
        dump_attention(params, &patches(score)?, &prac_patches, &out_dir.join("base"))?;
    written.extend(dump_attention(
        params,
        &patches(&shifted_score)?,
        &prac_patches,
        &out_dir.join("shifted"),
    )?);
    Ok(written)
}

fn shift_track(track: &NoteTrack, delta: f64) -> NoteTrack {
    let notes = track
        .notes()
        .iter()
        .map(|n| crate::notes::NoteEvent {
            onset_s: (n.onset_s + delta).max(0.0),
            offset_s: (n.offset_s + delta).max(1e-6),
            ..*n
        })
        .collect();
    NoteTrack::new(notes, track.instrument.clone()).expect("shift preserves validity")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{checkpoint, Fusion, ModelConfig};
    use crate::notes::NoteEvent;
    use sha2::{Digest, Sha256};

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_enc: 16,
            d_dec: 16,
            heads: 2,
            ff_mult: 2,
            vocab_size: crate::tokens::vocab::SIZE as usize,
            max_target_len: 64,
            fusion: Fusion::Ladder,
            seed,
        }
    }

    fn patch_dataset(n: usize, seed: u64) -> Vec<(PatchGrid, PatchGrid)> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let scale_r = rng.gen_range(0.5..3.0);
                let scale_p = rng.gen_range(0.5..3.0);
                let mk = |scale: f64, rng: &mut ChaCha8Rng| {
                    PatchGrid::from_values(
                        (0..N_PATCHES * audio::PATCH_DIM)
                            .map(|_| (rng.gen::<f64>() - 0.5) * scale)
                            .collect(),
                    )
                    .unwrap()
                };
                (mk(scale_r, &mut rng), mk(scale_p, &mut rng))
            })
            .collect()
    }

    #[test]
    fn feature_counts_and_label_structure() {
        let params = ModelParameters::<f32>::init(tiny_config(1)).unwrap();
        let dataset = patch_dataset(4, 2);
        let task = ProbeTask { kind: ProbeKind::Locality, stream: StreamSel::Ref, layer: 0 };
        let set = collect_features(&params, &dataset, &task).unwrap();
        assert_eq!(set.len(), 4 * N_PATCHES);
        assert_eq!(set.dim, 16);
        // locality labels enumerate 0..512 once per clip
        for clip in 0..4 {
            let labels = &set.labels[clip * N_PATCHES..(clip + 1) * N_PATCHES];
            let expect: Vec<usize> = (0..N_PATCHES).collect();
            assert_eq!(labels, expect.as_slice());
        }
        // globality labels constant within a clip
        let task = ProbeTask { kind: ProbeKind::Globality, stream: StreamSel::Prac, layer: 1 };
        let set = collect_features(&params, &dataset, &task).unwrap();
        for clip in 0..4 {
            let labels = &set.labels[clip * N_PATCHES..(clip + 1) * N_PATCHES];
            assert!(labels.iter().all(|&l| l == labels[0]));
            assert!(labels[0] < ENERGY_BINS);
        }
        // layer out of range rejected
        let task = ProbeTask { kind: ProbeKind::Locality, stream: StreamSel::Ref, layer: 5 };
        assert!(collect_features(&params, &dataset, &task).is_err());
    }

    #[test]
    fn probe_learns_linearly_separable_labels() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 20;
        let c = 12;
        let w_true: Vec<f64> = (0..d * c).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut made = 0;
        while made < 3000 {
            let x: Vec<f64> = (0..d).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * 8.0).collect();
            let mut scores = vec![0.0; c];
            for k in 0..c {
                for j in 0..d {
                    scores[k] += x[j] * w_true[j * c + k];
                }
            }
            let mut idx: Vec<usize> = (0..c).collect();
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            // keep a clear margin so 25 epochs of plain GD suffice
            if scores[idx[0]] - scores[idx[1]] < 8.0 {
                continue;
            }
            features.extend(x);
            labels.push(idx[0]);
            made += 1;
        }
        let set = FeatureSet { features, dim: d, labels, num_classes: c };
        let result = train_probe(&set, 7).unwrap();
        assert!(result.accuracy >= 0.99, "accuracy {}", result.accuracy);
    }

    #[test]
    fn probe_stays_at_chance_on_shuffled_labels() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 20;
        let c = 12;
        let n = 6000;
        let features: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let set = FeatureSet { features, dim: d, labels, num_classes: c };
        let result = train_probe(&set, 7).unwrap();
        let chance = 1.0 / c as f64;
        assert!(result.accuracy <= chance + 0.07, "accuracy {}", result.accuracy);
    }

    #[test]
    fn probe_determinism_and_single_class_error() {
        let params = ModelParameters::<f32>::init(tiny_config(5)).unwrap();
        let dataset = patch_dataset(2, 6);
        let task = ProbeTask { kind: ProbeKind::Locality, stream: StreamSel::Prac, layer: 1 };
        let set = collect_features(&params, &dataset, &task).unwrap();
        let a = train_probe(&set, 9).unwrap();
        let b = train_probe(&set, 9).unwrap();
        assert_eq!(a.accuracy, b.accuracy);

        let single = FeatureSet {
            features: vec![0.0; 40],
            dim: 20,
            labels: vec![3, 3],
            num_classes: 12,
        };
        assert!(matches!(train_probe(&single, 0), Err(AnalysisError::SingleClass(1))));
    }

    #[test]
    fn probing_leaves_checkpoint_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frozen.ckpt");
        let params = ModelParameters::<f32>::init(tiny_config(8)).unwrap();
        checkpoint::save(&path, &params).unwrap();
        let hash_before = Sha256::digest(std::fs::read(&path).unwrap());

        let loaded = checkpoint::load(&path).unwrap();
        let dataset = patch_dataset(2, 9);
        let _report = probe_all(&loaded, &dataset, 1, 11).unwrap();

        // parameters untouched: re-serializing reproduces the same bytes
        let path2 = dir.path().join("after.ckpt");
        checkpoint::save(&path2, &loaded).unwrap();
        let hash_after = Sha256::digest(std::fs::read(&path2).unwrap());
        assert_eq!(hash_before, hash_after);
        assert_eq!(hash_before, Sha256::digest(std::fs::read(&path).unwrap()));
    }

    #[test]
    fn attention_dump_files_and_shift_identity() {
        let dir = tempfile::tempdir().unwrap();
        let params = ModelParameters::<f32>::init(tiny_config(10)).unwrap();
        let dataset = patch_dataset(1, 11);
        let files = dump_attention(&params, &dataset[0].0, &dataset[0].1, dir.path()).unwrap();
        // ladder: 2 directions x enc_layers CSVs, each with a sidecar
        let csvs: Vec<_> = files.iter().filter(|p| p.extension().unwrap() == "csv").collect();
        assert_eq!(csvs.len(), 2 * params.config.enc_layers);
        // every dumped row sums to 1
        for csv in csvs {
            let text = std::fs::read_to_string(csv).unwrap();
            for line in text.lines() {
                let sum: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
                assert!((sum - 1.0).abs() < 1e-5, "{csv:?}: row sum {sum}");
            }
        }

        // paired run with delta = 0 produces byte-identical maps
        let score = NoteTrack::new(
            vec![NoteEvent::new(0.2, 0.6, 60), NoteEvent::new(1.0, 1.5, 64)],
            "",
        )
        .unwrap();
        let pair_dir = tempfile::tempdir().unwrap();
        dump_attention_pair(&params, &score, &score, 0, 0.0, pair_dir.path()).unwrap();
        for entry in std::fs::read_dir(pair_dir.path().join("base")).unwrap() {
            let base_file = entry.unwrap().path();
            let name = base_file.file_name().unwrap();
            let shifted_file = pair_dir.path().join("shifted").join(name);
            assert_eq!(
                std::fs::read(&base_file).unwrap(),
                std::fs::read(&shifted_file).unwrap(),
                "{name:?} differs"
            );
        }
    }

    #[test]
    fn joint_variant_dumps_quadrants() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig { fusion: Fusion::EarlyFusion, ..tiny_config(12) };
        let params = ModelParameters::<f32>::init(cfg).unwrap();
        let dataset = patch_dataset(1, 13);
        let files = dump_attention(&params, &dataset[0].0, &dataset[0].1, dir.path()).unwrap();
        let csvs = files.iter().filter(|p| p.extension().unwrap() == "csv").count();
        assert_eq!(csvs, 4 * cfg.enc_layers);
    }
}
