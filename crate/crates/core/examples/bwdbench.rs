use segxplain_core::data::{scene_rng, synth_sample, DatasetKind};
use segxplain_core::network::{build_discriminator, build_generator, forward, init_params};
use segxplain_core::ops::{activation_backward, run_linear_backward};
use segxplain_core::tensor::{concat_channels, Tensor};
use std::time::Instant;

fn main() {
    for (label, gen, seed) in [("generator", true, 1u64), ("discriminator", false, 2)] {
        let spec = if gen { build_generator("desk-32".parse().unwrap()) } else { build_discriminator("desk-32".parse().unwrap()) };
        let params = init_params(&spec, seed);
        let mut r = scene_rng(3);
        let pairs: Vec<_> = (0..4).map(|_| synth_sample(DatasetKind::Instrument, 32, &mut r)).collect();
        let images = Tensor::stack(&pairs.iter().map(|p| &p.0).collect::<Vec<_>>()).unwrap();
        let masks = Tensor::stack(&pairs.iter().map(|p| &p.1).collect::<Vec<_>>()).unwrap();
        let input = if gen { images.clone() } else { concat_channels(&images, &masks).unwrap() };
        let (out, cache) = forward(&spec, &params, &input).unwrap();
        println!("== {label} per-layer backward (ms, 20 reps) ==");
        let g_out = out.map(|v| v * 0.01);
        // emulate the backward walk layer by layer with timing
        let mut grads_shape = g_out.clone();
        for i in (0..spec.layers.len()).rev() {
            let layer = &spec.layers[i];
            let t = Instant::now();
            let mut gi_opt = None;
            for _ in 0..20 {
                let g_pre = activation_backward(&cache.pre[i], layer.activation, &grads_shape).unwrap();
                let x = cache.layer_input(&spec, i).unwrap();
                let (gi, _, _) = run_linear_backward(layer.kind, &x, &params.layers[i].weights, layer.geom, &g_pre).unwrap();
                gi_opt = Some(gi);
            }
            let ms = t.elapsed().as_secs_f64() * 1000.0 / 20.0;
            let gi = gi_opt.unwrap();
            println!("  L{:<2} {:?} in{:>10} out{:>10}: {:6.2} ms", i + 1, layer.kind,
                format!("{}", cache.layer_input(&spec, i).unwrap().shape()),
                format!("{}", cache.post[i].shape()), ms);
            let s = gi.shape();
            let keep = spec.layers[i].skip_source.map(|src| s.c - spec.layers[src-1].out_channels).unwrap_or(s.c);
            grads_shape = if i > 0 {
                segxplain_core::tensor::split_channels(&gi, keep).map(|t| t.0).unwrap_or(gi)
            } else { break; };
            let _ = &grads_shape;
        }
    }
}
