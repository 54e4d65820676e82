fn main() {
    println!("compile-time: avx2={} fma={} avx512f={}",
        cfg!(target_feature = "avx2"), cfg!(target_feature = "fma"), cfg!(target_feature = "avx512f"));
    println!("runtime: avx2={} fma={}",
        is_x86_feature_detected!("avx2"), is_x86_feature_detected!("fma"));
    println!("rayon threads: {}", rayon::current_num_threads());
}
