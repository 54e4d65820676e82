use segxplain_core::gemm::gemm_f32;
use std::time::Instant;

fn t(label: &str, reps: usize, mut f: impl FnMut()) {
    let start = Instant::now();
    for _ in 0..reps { f(); }
    println!("  {label:<42} {:7.3} ms", start.elapsed().as_secs_f64()*1000.0/reps as f64);
}

fn main() {
    // L9 grad_input-shaped gemm: m=256, k=1024, n=256 (67 MMAC)
    let (m, k, n) = (256usize, 1024usize, 256usize);
    let a: Vec<f32> = (0..m*k).map(|i| (i as f32*0.3).sin()).collect();
    let b: Vec<f32> = (0..k*n).map(|i| (i as f32*0.7).cos()).collect();
    let mut c = vec![0.0f32; 256*1024];
    t("gemm 256x1024x256 (row-major A,B)", 50, || gemm_f32(m,k,n,&a,k,1,&b,n,1,&mut c));
    // same but strided-B (cols^T view) as grad_weights sees it
    t("gemm 256x256x1024 (B strided col-view)", 50, || gemm_f32(256,256,1024,&a,256,1,&b,1,256,&mut c));
    // L9 im2col shape: src 4x64x16x16, k=4 s=2 p=1 -> positions 8x8 per sample
    use segxplain_core::ops::{ConvGeometry, tconv2d_backward, conv2d};
    use segxplain_core::tensor::{Shape, Tensor};
    let g = ConvGeometry::new((4,4),(2,2),(1,1)).unwrap();
    let input = Tensor::from_fn(Shape::new(4,256,8,8), |_,c,y,x| ((c+y+x) as f32).sin());
    let w = Tensor::from_fn(Shape::new(256,64,4,4), |o,i,dy,dx| ((o+i+dy+dx) as f32*0.01).cos()*0.05);
    let grad_out = Tensor::from_fn(Shape::new(4,64,16,16), |_,c,y,x| ((c*3+y+x) as f32*0.2).sin());
    t("tconv2d_backward L9 total", 20, || { tconv2d_backward(&input, &w, g, &grad_out).unwrap(); });
    let wc = Tensor::from_fn(Shape::new(64,256,4,4), |o,i,dy,dx| ((o+i+dy+dx) as f32*0.01).cos()*0.05);
    t("conv2d fwd same-size ref", 20, || { conv2d(&input, &wc, &[0.0;64], g).unwrap(); });
    // raw FMA throughput sanity: single thread tile on L1-resident data
    let a2: Vec<f32> = vec![1.0; 64*1024];
    let b2: Vec<f32> = vec![1.0; 1024*16];
    let mut c2 = vec![0.0f32; 64*16];
    t("gemm 64x1024x16 (L2-resident)", 2000, || gemm_f32(64,1024,16,&a2,1024,1,&b2,16,1,&mut c2));
}
