use errata::audio::{PatchGrid, N_PATCHES, PATCH_DIM};
use errata::model::{decode_step, encode, ModelConfig, ModelParameters};
use errata::tensor::Tape;
use rand::{Rng, SeedableRng};

#[test]
#[ignore]
fn component_bench() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
        PatchGrid::from_values((0..N_PATCHES * PATCH_DIM).map(|_| rng.gen::<f64>() - 0.5).collect())
            .unwrap()
    };
    let a = mk(&mut rng);
    let b = mk(&mut rng);
    let params = ModelParameters::<f32>::init(ModelConfig::toy()).unwrap();
    let ids: Vec<u32> = (0..100).map(|i| (i % 340) as u32).collect();
    let targets: Vec<usize> = (0..100).map(|i| ((i + 1) % 340) as usize).collect();
    let weights = vec![1.0f32; 100];

    // encoder forward alone
    let t = std::time::Instant::now();
    for _ in 0..4 {
        let mut tape = Tape::new();
        let _ = encode(&mut tape, &params, &a, &b).unwrap();
    }
    println!("encode fwd: {:?}", t.elapsed() / 4);

    // full forward
    let t = std::time::Instant::now();
    for _ in 0..4 {
        let mut tape = Tape::new();
        let out = encode(&mut tape, &params, &a, &b).unwrap();
        let logits = decode_step(&mut tape, &params, out.fused, &ids).unwrap();
        let _ = tape.weighted_ce(logits, &targets, &weights);
    }
    println!("full fwd: {:?}", t.elapsed() / 4);

    // full fwd + bwd
    let t = std::time::Instant::now();
    for _ in 0..4 {
        let mut tape = Tape::new();
        let out = encode(&mut tape, &params, &a, &b).unwrap();
        let logits = decode_step(&mut tape, &params, out.fused, &ids).unwrap();
        let loss = tape.weighted_ce(logits, &targets, &weights);
        let _ = tape.backward(loss, &params.set);
    }
    println!("full fwd+bwd: {:?}", t.elapsed() / 4);

    // raw exp throughput
    let xs: Vec<f32> = (0..1_000_000).map(|i| (i % 97) as f32 * 0.01 - 0.5).collect();
    let t = std::time::Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..8 {
        for &x in &xs {
            acc += x.exp();
        }
    }
    println!("8M f32 exps: {:?} (acc {acc})", t.elapsed());

    // raw gemm throughput at the attention score shape
    let q = vec![0.5f32; 512 * 16];
    let k = vec![0.25f32; 512 * 16];
    let mut s = vec![0.0f32; 512 * 512];
    let t = std::time::Instant::now();
    for _ in 0..32 {
        unsafe {
            matrixmultiply::sgemm(
                512, 16, 512, 1.0, q.as_ptr(), 16, 1, k.as_ptr(), 1, 16, 0.0, s.as_mut_ptr(),
                512, 1,
            );
        }
    }
    let gflops = 32.0 * 2.0 * 512.0 * 512.0 * 16.0 / t.elapsed().as_secs_f64() / 1e9;
    println!("scores gemm 512x16x512: {:?} ({gflops:.1} GF/s)", t.elapsed() / 32);
}
