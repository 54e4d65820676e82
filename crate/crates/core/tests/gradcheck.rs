//! Central finite-difference checks of every analytic gradient, run in f64
//! so discretization error stays far below the comparison tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segxplain_core::ops::{
    activation, activation_backward, conv2d, conv2d_backward, tconv2d, tconv2d_backward,
    Activation, ConvGeometry,
};
use segxplain_core::tensor::{Shape, Tensor};
use segxplain_core::training::{discriminator_loss, generator_loss};

const STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-5;
const ABS_FLOOR: f64 = 1e-7;

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let tol = REL_TOL * analytic.abs().max(numeric.abs()).max(ABS_FLOOR / REL_TOL);
    assert!(
        (analytic - numeric).abs() <= tol,
        "{what}: analytic {analytic} vs finite difference {numeric}"
    );
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-scale..scale))
}

/// Central difference of a scalar function along one coordinate of `x`.
fn central_diff(f: &mut dyn FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, i: usize) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += STEP;
    let mut minus = x.clone();
    minus.data_mut()[i] -= STEP;
    (f(&plus) - f(&minus)) / (2.0 * STEP)
}

struct ConvCase {
    input: Tensor<f64>,
    weights: Tensor<f64>,
    bias: Vec<f64>,
    geom: ConvGeometry,
    probe: Tensor<f64>,
}

fn random_case(rng: &mut ChaCha8Rng, transposed: bool) -> ConvCase {
    let n = rng.random_range(1..3usize);
    let ci = rng.random_range(1..4usize);
    let co = rng.random_range(1..4usize);
    let k = rng.random_range(1..5usize);
    let s = rng.random_range(1..3usize);
    let p = rng.random_range(0..2usize);
    let geom = ConvGeometry::new((k, k), (s, s), (p, p)).unwrap();
    // keep the spatial size large enough for a positive output dim
    let min_h = if transposed { 1 } else { k.saturating_sub(2 * p).max(1) };
    let h = rng.random_range(min_h..min_h + 5);
    let w = rng.random_range(min_h..min_h + 5);
    if !transposed && geom.conv_output(h, w).is_err() {
        return random_case(rng, transposed);
    }
    if transposed && geom.tconv_output(h, w).is_err() {
        return random_case(rng, transposed);
    }
    let input = rand_tensor(rng, Shape::new(n, ci, h, w), 1.0);
    let wshape = if transposed {
        Shape::new(ci, co, k, k)
    } else {
        Shape::new(co, ci, k, k)
    };
    let weights = rand_tensor(rng, wshape, 0.5);
    let bias: Vec<f64> = (0..co).map(|_| rng.random_range(-0.5..0.5)).collect();
    let (oh, ow) = if transposed {
        geom.tconv_output(h, w).unwrap()
    } else {
        geom.conv_output(h, w).unwrap()
    };
    let probe = rand_tensor(rng, Shape::new(n, co, oh, ow), 1.0);
    ConvCase {
        input,
        weights,
        bias,
        geom,
        probe,
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..12 {
        let c = random_case(&mut rng, false);
        // scalar objective: <conv(x, w, b), probe>
        let (grad_in, grad_w, grad_b) =
            conv2d_backward(&c.input, &c.weights, c.geom, &c.probe).unwrap();

        let mut wrt_input = |x: &Tensor<f64>| {
            conv2d(x, &c.weights, &c.bias, c.geom).unwrap().dot(&c.probe).unwrap()
        };
        for i in (0..c.input.len()).step_by(3) {
            let fd = central_diff(&mut wrt_input, &c.input, i);
            assert_close(grad_in.data()[i], fd, &format!("conv case {case} input[{i}]"));
        }

        let mut wrt_weights = |w: &Tensor<f64>| {
            conv2d(&c.input, w, &c.bias, c.geom).unwrap().dot(&c.probe).unwrap()
        };
        for i in (0..c.weights.len()).step_by(2) {
            let fd = central_diff(&mut wrt_weights, &c.weights, i);
            assert_close(grad_w.data()[i], fd, &format!("conv case {case} weight[{i}]"));
        }

        for (o, &gb) in grad_b.iter().enumerate() {
            let mut bias = c.bias.clone();
            bias[o] += STEP;
            let up = conv2d(&c.input, &c.weights, &bias, c.geom).unwrap().dot(&c.probe).unwrap();
            bias[o] -= 2.0 * STEP;
            let down = conv2d(&c.input, &c.weights, &bias, c.geom).unwrap().dot(&c.probe).unwrap();
            assert_close(gb, (up - down) / (2.0 * STEP), &format!("conv case {case} bias[{o}]"));
        }
    }
}

#[test]
fn tconv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..12 {
        let c = random_case(&mut rng, true);
        let (grad_in, grad_w, grad_b) =
            tconv2d_backward(&c.input, &c.weights, c.geom, &c.probe).unwrap();

        let mut wrt_input = |x: &Tensor<f64>| {
            tconv2d(x, &c.weights, &c.bias, c.geom).unwrap().dot(&c.probe).unwrap()
        };
        for i in (0..c.input.len()).step_by(3) {
            let fd = central_diff(&mut wrt_input, &c.input, i);
            assert_close(grad_in.data()[i], fd, &format!("tconv case {case} input[{i}]"));
        }

        let mut wrt_weights = |w: &Tensor<f64>| {
            tconv2d(&c.input, w, &c.bias, c.geom).unwrap().dot(&c.probe).unwrap()
        };
        for i in (0..c.weights.len()).step_by(2) {
            let fd = central_diff(&mut wrt_weights, &c.weights, i);
            assert_close(grad_w.data()[i], fd, &format!("tconv case {case} weight[{i}]"));
        }

        for (o, &gb) in grad_b.iter().enumerate() {
            let mut bias = c.bias.clone();
            bias[o] += STEP;
            let up = tconv2d(&c.input, &c.weights, &bias, c.geom).unwrap().dot(&c.probe).unwrap();
            bias[o] -= 2.0 * STEP;
            let down = tconv2d(&c.input, &c.weights, &bias, c.geom).unwrap().dot(&c.probe).unwrap();
            assert_close(gb, (up - down) / (2.0 * STEP), &format!("tconv case {case} bias[{o}]"));
        }
    }
}

#[test]
fn activation_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let kinds = [
        Activation::leaky_relu(0.2).unwrap(),
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
    ];
    for kind in kinds {
        for case in 0..4 {
            let x = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4), 2.0);
            let probe = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4), 1.0);
            let grad = activation_backward(&x, kind, &probe).unwrap();
            let mut f = |x: &Tensor<f64>| activation(x, kind).dot(&probe).unwrap();
            for i in 0..x.len() {
                // keep clear of the kink so the finite difference is valid
                if matches!(kind, Activation::Relu | Activation::LeakyRelu { .. })
                    && x.data()[i].abs() < 10.0 * STEP
                {
                    continue;
                }
                let fd = central_diff(&mut f, &x, i);
                assert_close(grad.data()[i], fd, &format!("{kind:?} case {case} [{i}]"));
            }
        }
    }
}

#[test]
fn discriminator_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for case in 0..6 {
        let shape = Shape::new(2, 1, 3, 3);
        let d_real = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.05..0.95));
        let d_fake = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.05..0.95));
        let (_, grad_real, grad_fake) = discriminator_loss(&d_real, &d_fake).unwrap();

        let mut wrt_real =
            |x: &Tensor<f64>| discriminator_loss(x, &d_fake).unwrap().0;
        let mut wrt_fake =
            |x: &Tensor<f64>| discriminator_loss(&d_real, x).unwrap().0;
        for i in 0..shape.count() {
            let fd = central_diff(&mut wrt_real, &d_real, i);
            assert_close(grad_real.data()[i], fd, &format!("d_loss case {case} real[{i}]"));
            let fd = central_diff(&mut wrt_fake, &d_fake, i);
            assert_close(grad_fake.data()[i], fd, &format!("d_loss case {case} fake[{i}]"));
        }
    }
}

#[test]
fn generator_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for case in 0..6 {
        let d_shape = Shape::new(1, 1, 3, 3);
        let m_shape = Shape::new(1, 1, 4, 4);
        let d_fake = Tensor::from_fn(d_shape, |_, _, _, _| rng.random_range(0.05..0.95));
        let fake = Tensor::from_fn(m_shape, |_, _, _, _| rng.random_range(-0.9..0.9));
        let truth = Tensor::from_fn(m_shape, |_, _, _, _| rng.random_range(-0.9..0.9));
        let lambda = if case % 2 == 0 { 100.0 } else { 0.0 };
        let out = generator_loss(&d_fake, &fake, &truth, lambda).unwrap();

        let mut wrt_d = |x: &Tensor<f64>| generator_loss(x, &fake, &truth, lambda).unwrap().total;
        for i in 0..d_shape.count() {
            let fd = central_diff(&mut wrt_d, &d_fake, i);
            assert_close(out.grad_d_fake.data()[i], fd, &format!("g_loss case {case} d[{i}]"));
        }

        let mut wrt_fake =
            |x: &Tensor<f64>| generator_loss(&d_fake, x, &truth, lambda).unwrap().total;
        for i in 0..m_shape.count() {
            // |.| is not differentiable where fake == truth
            if (fake.data()[i] - truth.data()[i]).abs() < 10.0 * STEP {
                continue;
            }
            let fd = central_diff(&mut wrt_fake, &fake, i);
            assert_close(out.grad_fake_mask.data()[i], fd, &format!("g_loss case {case} mask[{i}]"));
        }
    }
}
