use errata::tensor::Tape;
use rand::{Rng, SeedableRng};

#[test]
#[ignore]
fn attn_bench() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut data = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen::<f32>() - 0.5).collect() };
    let q_data = data(512 * 64);
    let k_data = data(512 * 64);
    let v_data = data(512 * 64);
    let w_data = data(64 * 64);

    // attention op alone (4 heads over 512x64)
    let t = std::time::Instant::now();
    for _ in 0..16 {
        let mut tape: Tape<f32> = Tape::new();
        let q = tape.input(q_data.clone(), 512, 64);
        let k = tape.input(k_data.clone(), 512, 64);
        let v = tape.input(v_data.clone(), 512, 64);
        let _ = tape.attention(q, k, v, 4, false);
    }
    println!("attention op: {:?}", t.elapsed() / 16);

    // matmul op alone (512x64)x(64x64)
    let t = std::time::Instant::now();
    for _ in 0..64 {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.input(q_data.clone(), 512, 64);
        let w = tape.input(w_data.clone(), 64, 64);
        let _ = tape.matmul(x, w);
    }
    println!("matmul 512x64x64 op: {:?}", t.elapsed() / 64);

    // layer_norm op alone
    let t = std::time::Instant::now();
    for _ in 0..64 {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.input(q_data.clone(), 512, 64);
        let g = tape.input(vec![1.0; 64], 1, 64);
        let b = tape.input(vec![0.0; 64], 1, 64);
        let _ = tape.layer_norm(x, g, b);
    }
    println!("layer_norm op: {:?}", t.elapsed() / 64);

    // gelu on ffn-sized tensor
    let f_data = data(512 * 256);
    let t = std::time::Instant::now();
    for _ in 0..64 {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.input(f_data.clone(), 512, 256);
        let _ = tape.gelu(x);
    }
    println!("gelu 512x256 op: {:?}", t.elapsed() / 64);
}
