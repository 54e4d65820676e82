use segxplain_core::data::{scene_rng, synth_sample, DatasetKind};
use segxplain_core::network::{build_discriminator, build_generator, forward, init_params};
use segxplain_core::ops::{conv2d, conv2d_backward, tconv2d, tconv2d_backward};
use segxplain_core::tensor::{concat_channels, Tensor};
use segxplain_core::training::{backward, discriminator_loss, generator_loss};
use std::time::Instant;

fn timeit<T>(label: &str, reps: usize, mut f: impl FnMut() -> T) -> T {
    let mut out = None;
    let t = Instant::now();
    for _ in 0..reps {
        out = Some(f());
    }
    println!("{label:<28} {:8.2} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    out.unwrap()
}

fn main() {
    let gen = build_generator("desk-32".parse().unwrap());
    let disc = build_discriminator("desk-32".parse().unwrap());
    let gp = init_params(&gen, 1);
    let dp = init_params(&disc, 2);
    let mut r = scene_rng(3);
    let pairs: Vec<_> = (0..4).map(|_| synth_sample(DatasetKind::Instrument, 32, &mut r)).collect();
    let images = Tensor::stack(&pairs.iter().map(|p| &p.0).collect::<Vec<_>>()).unwrap();
    let masks = Tensor::stack(&pairs.iter().map(|p| &p.1).collect::<Vec<_>>()).unwrap();

    let (fake, gcache) = timeit("G forward (batch 4)", 10, || forward(&gen, &gp, &images).unwrap());
    let real_pair = concat_channels(&images, &masks).unwrap();
    let fake_pair = concat_channels(&images, &fake).unwrap();
    let (d_real, rcache) = timeit("D forward real", 10, || forward(&disc, &dp, &real_pair).unwrap());
    let (d_fake, fcache) = timeit("D forward fake", 10, || forward(&disc, &dp, &fake_pair).unwrap());
    let (_, gr, gf) = discriminator_loss(&d_real, &d_fake).unwrap();
    timeit("D backward real (full)", 10, || backward(&disc, &dp, &rcache, &gr, true).unwrap());
    timeit("D backward fake (full)", 10, || backward(&disc, &dp, &fcache, &gf, true).unwrap());
    let gl = generator_loss(&d_fake, &fake, &masks, 100.0).unwrap();
    timeit("D backward input-only", 10, || backward(&disc, &dp, &fcache, &gl.grad_d_fake, false).unwrap());
    let grad_fake = gl.grad_fake_mask.clone();
    let seed = {
        let mut t = grad_fake.clone();
        t.add_in_place(&gl.grad_fake_mask).unwrap();
        t
    };
    timeit("G backward (full)", 10, || backward(&gen, &gp, &gcache, &seed, true).unwrap());

    // isolate the four big generator layers
    let c5_in = &gcache.post[3];
    let (w5, b5) = (&gp.layers[4].weights, &gp.layers[4].bias);
    let g5 = gen.layers[4].geom;
    let z5 = timeit("  C5 conv fwd", 50, || conv2d(c5_in, w5, b5, g5).unwrap());
    timeit("  C5 conv bwd", 50, || conv2d_backward(c5_in, w5, g5, &z5).unwrap());
    let d1_in = &gcache.post[4];
    let (w6, b6) = (&gp.layers[5].weights, &gp.layers[5].bias);
    let g6 = gen.layers[5].geom;
    let z6 = timeit("  D1 tconv fwd", 50, || tconv2d(d1_in, w6, b6, g6).unwrap());
    timeit("  D1 tconv bwd", 50, || tconv2d_backward(d1_in, w6, g6, &z6).unwrap());
    let d2_in = &gcache.post[5];
    let d2_cat = concat_channels(d2_in, &gcache.post[3]).unwrap();
    let (w7, b7) = (&gp.layers[6].weights, &gp.layers[6].bias);
    let g7 = gen.layers[6].geom;
    let z7 = timeit("  D2 tconv fwd", 50, || tconv2d(&d2_cat, w7, b7, g7).unwrap());
    timeit("  D2 tconv bwd", 50, || tconv2d_backward(&d2_cat, w7, g7, &z7).unwrap());
}
