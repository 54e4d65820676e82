use segxplain_core::gemm::gemm_f32;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a: Vec<f32> = (0..m*k).map(|i| (i as f32 * 0.37).sin()).collect();
    let b: Vec<f32> = (0..k*n).map(|i| (i as f32 * 0.17).cos()).collect();
    let mut c = vec![0.0f32; m*n];
    // warmup
    gemm_f32(m, k, n, &a, k, 1, &b, n, 1, &mut c);
    let t = Instant::now();
    for _ in 0..reps {
        gemm_f32(m, k, n, &a, k, 1, &b, n, 1, &mut c);
    }
    let el = t.elapsed().as_secs_f64();
    let gmacs = (m*k*n*reps) as f64 / el / 1e9;
    println!("{m:>5}x{k:>5}x{n:>5}: {:7.2} GMAC/s ({:.2} GFLOP/s)", gmacs, 2.0*gmacs);
}

fn main() {
    // generator desk-32 batch-4 forward shapes
    bench(64, 48, 1024, 200);     // C1
    bench(128, 1024, 256, 100);   // C2
    bench(256, 2048, 64, 100);    // C3
    bench(512, 4096, 16, 100);    // C4 skinny
    bench(512, 8192, 4, 100);     // C5 bottleneck
    bench(8192, 512, 4, 100);     // D1 tconv (transposed W materialized)
    bench(4096, 1024, 16, 50);    // D2
    bench(2048, 512, 64, 50);     // D3
    bench(1024, 256, 256, 50);    // D4
    bench(16, 128, 4096, 100);    // D5
}
