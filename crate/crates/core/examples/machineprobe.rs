use std::time::Instant;

#[inline(never)]
fn fma_peak(reps: usize) -> f32 {
    // 8 independent 16-lane chains
    let mut acc = [[1.0f32; 16]; 8];
    let x = [1.000001f32; 16];
    let t = Instant::now();
    for _ in 0..reps {
        for c in 0..8 {
            for t in 0..16 {
                acc[c][t] = x[t].mul_add(0.9999999, acc[c][t]);
            }
        }
    }
    let el = t.elapsed().as_secs_f64();
    let flops = (reps * 8 * 16 * 2) as f64 / el / 1e9;
    println!("single-thread FMA peak: {flops:.1} GFLOP/s");
    acc.iter().flatten().sum()
}

#[inline(never)]
fn stream_read(buf: &[f32], reps: usize) -> f32 {
    let mut acc = [0.0f32; 16];
    let t = Instant::now();
    for _ in 0..reps {
        for chunk in buf.chunks_exact(16) {
            let c: &[f32; 16] = chunk.try_into().unwrap();
            for i in 0..16 { acc[i] += c[i]; }
        }
    }
    let el = t.elapsed().as_secs_f64();
    let gb = (buf.len() * 4 * reps) as f64 / el / 1e9;
    println!("single-thread read bandwidth ({} MB buffer): {gb:.1} GB/s", buf.len()*4/1024/1024);
    acc.iter().sum()
}

fn main() {
    let s1 = fma_peak(2_000_000);
    let big = vec![1.0f32; 16 * 1024 * 1024]; // 64 MB
    let s2 = stream_read(&big, 10);
    let small = vec![1.0f32; 64 * 1024]; // 256 KB (L2)
    let s3 = stream_read(&small, 5000);
    println!("(ignore: {s1} {s2} {s3})");
}
