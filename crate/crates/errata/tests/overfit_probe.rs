use errata::errorgen::{inject_errors, ErrorGenConfig};
use errata::model::ModelConfig;
use errata::notes::{NoteEvent, NoteTrack};
use errata::train::{build_segment_samples, train_loop, TrainConfig, TrainSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn overfit_dataset(n_tracks: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut track_idx = 0u64;
    while out.len() < n_tracks {
        let n_notes = rng.gen_range(3..=5);
        let mut notes = Vec::new();
        let mut t = 0.15 + rng.gen::<f64>() * 0.1;
        for _ in 0..n_notes {
            let dur = rng.gen_range(0.15..0.35);
            let pitch = rng.gen_range(55..80) as u8;
            if t + dur > 2.0 {
                break;
            }
            notes.push(NoteEvent::new(t, t + dur, pitch));
            t += dur + rng.gen_range(0.08..0.3);
        }
        let Ok(score) = NoteTrack::new(notes, "probe") else { continue };
        if score.is_empty() {
            continue;
        }
        let cfg = ErrorGenConfig { lambda_low: 0.5, lambda_high: 0.5, ..Default::default() };
        let mut gen_rng = ChaCha8Rng::seed_from_u64(seed);
        gen_rng.set_stream(track_idx);
        track_idx += 1;
        let sample = inject_errors(&score, &cfg, &mut gen_rng).unwrap();
        let segments = build_segment_samples(&score, &sample).unwrap();
        out.extend(segments.into_iter().take(1));
    }
    out.truncate(n_tracks);
    out
}

#[test]
#[ignore]
fn overfit_speed_probe() {
    let dataset = overfit_dataset(16, 42);
    println!(
        "dataset: {} segments, target lens: {:?}",
        dataset.len(),
        dataset.iter().map(|s| s.target.len()).collect::<Vec<_>>()
    );
    let model_cfg = ModelConfig { seed: 7, ..ModelConfig::toy() };
    let cfg = TrainConfig {
        epochs: 250,
        batch: 2,
        shuffle_augment: false,
        seed: 1,
        max_steps: Some(2000),
        target_token_acc: Some(1.0),
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let outcome = train_loop(&dataset, model_cfg, &cfg, None).unwrap();
    let elapsed = t0.elapsed();
    let last = outcome.metrics.last().unwrap();
    println!(
        "steps: {}, stopped_early: {}, last loss {:.5}, last acc {:.4}, wall {:?}",
        last.step, outcome.stopped_early, last.loss, last.token_acc, elapsed
    );
    for m in outcome.metrics.iter().step_by(40) {
        println!("  step {:4} loss {:.4} acc {:.3}", m.step, m.loss, m.token_acc);
    }
}
