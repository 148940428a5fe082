use std::time::Instant;
use webhc_core::linalg::matmul;

fn bench(m: usize, k: usize, n: usize, iters: usize) {
    let a: Vec<f32> = (0..m * k).map(|i| (i % 7) as f32 * 0.1).collect();
    let b: Vec<f32> = (0..k * n).map(|i| (i % 5) as f32 * 0.1).collect();
    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..iters {
        let c = matmul(&a, &b, m, k, n, 1.0);
        sink += c[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let gflops = (2.0 * m as f64 * k as f64 * n as f64 * iters as f64) / dt / 1e9;
    println!("{}x{}x{}: {:.2} GFLOP/s (sink {})", m, k, n, gflops, sink);
}

fn main() {
    bench(960, 64, 64, 200);   // K/V projection shape
    bench(960, 32, 960, 30);   // attention scores per head (d_head=32)
    bench(960, 960, 32, 30);   // attention AV per head
    bench(64, 960, 64, 200);   // grad wrt projection weights
    bench(960, 64, 256, 60);   // FFN
    bench(8, 960, 64, 2000);   // compressor cross-attn scores-ish
}
