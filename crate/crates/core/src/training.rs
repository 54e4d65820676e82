//! Adversarial training: the two losses with their gradient seeds, Adam,
//! whole-network backpropagation, and the epoch loop.
//!
//! Each batch takes one discriminator step followed by one generator step.
//! The discriminator sees the true mask pair as real and the generated pair
//! as fake (masks are channel-concatenated with their images); the generator
//! is then updated through the refreshed discriminator's judgment plus an L1
//! reconstruction term. Everything is driven by one seeded RNG, so a fixed
//! `(seed, config, dataset)` reproduces losses and parameters bit-exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::network::{
    build_discriminator, build_generator, forward, init_params, ActivationCache, NetworkSpec,
    ParamStore, Profile,
};
use crate::ops::{activation_backward, run_linear_adjoint, run_linear_backward};
use crate::tensor::{concat_channels, split_channels, Element, Tensor};

/// Floor for the arguments of `ln` in both losses.
pub const LOG_CLAMP: f64 = 1e-7;

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_epsilon: f32,
    /// Weight of the generator's L1 reconstruction term; 0 trains on the
    /// adversarial signal alone.
    pub l1_weight: f32,
    pub seed: u64,
    pub profile: Profile,
    /// Checkpoints are written every this many epochs, and always at the end.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 4,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            l1_weight: 100.0,
            seed: 0,
            profile: Profile::Desk32,
            checkpoint_interval: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("adam_epsilon must be > 0".into()));
        }
        if self.l1_weight < 0.0 {
            return Err(Error::Config("l1_weight must be >= 0".into()));
        }
        if self.checkpoint_interval < 1 {
            return Err(Error::Config("checkpoint_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// Discriminator loss over matched real/fake score grids:
/// `mean(-[ln d_real + ln(1 - d_fake)])`, log arguments clamped at 1e-7.
/// Returns the loss and its gradients with respect to both score tensors
/// (zero inside the clamped region).
pub fn discriminator_loss<T: Element>(
    d_real: &Tensor<T>,
    d_fake: &Tensor<T>,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    if d_real.shape() != d_fake.shape() {
        return Err(Error::shape_mismatch(
            "discriminator loss",
            d_real.shape(),
            d_fake.shape(),
        ));
    }
    let clamp = T::from_real(LOG_CLAMP);
    let inv_n = T::one() / T::from_real(d_real.len() as f64);
    let mut loss = T::zero();
    let mut grad_real = Tensor::zeros(d_real.shape());
    let mut grad_fake = Tensor::zeros(d_fake.shape());
    for i in 0..d_real.len() {
        let r = d_real.data()[i];
        let f = d_fake.data()[i];
        loss += -(r.max(clamp).ln() + (T::one() - f).max(clamp).ln()) * inv_n;
        if r > clamp {
            grad_real.data_mut()[i] = -inv_n / r;
        }
        if T::one() - f > clamp {
            grad_fake.data_mut()[i] = inv_n / (T::one() - f);
        }
    }
    Ok((loss, grad_real, grad_fake))
}

/// Generator loss terms and gradient seeds.
pub struct GeneratorLoss<T: Element> {
    pub total: T,
    pub adversarial: T,
    pub l1: T,
    pub grad_d_fake: Tensor<T>,
    pub grad_fake_mask: Tensor<T>,
}

/// Non-saturating adversarial term plus weighted L1:
/// `mean(-ln d_fake) + l1_weight * mean |fake - true|`.
pub fn generator_loss<T: Element>(
    d_fake: &Tensor<T>,
    fake_mask: &Tensor<T>,
    true_mask: &Tensor<T>,
    l1_weight: T,
) -> Result<GeneratorLoss<T>> {
    if fake_mask.shape() != true_mask.shape() {
        return Err(Error::shape_mismatch(
            "generator L1 term",
            true_mask.shape(),
            fake_mask.shape(),
        ));
    }
    let clamp = T::from_real(LOG_CLAMP);
    let inv_nd = T::one() / T::from_real(d_fake.len() as f64);
    let mut adversarial = T::zero();
    let mut grad_d_fake = Tensor::zeros(d_fake.shape());
    for i in 0..d_fake.len() {
        let f = d_fake.data()[i];
        adversarial += -f.max(clamp).ln() * inv_nd;
        if f > clamp {
            grad_d_fake.data_mut()[i] = -inv_nd / f;
        }
    }

    let inv_nm = T::one() / T::from_real(fake_mask.len() as f64);
    let mut l1 = T::zero();
    let mut grad_fake_mask = Tensor::zeros(fake_mask.shape());
    for i in 0..fake_mask.len() {
        let diff = fake_mask.data()[i] - true_mask.data()[i];
        l1 += diff.abs() * inv_nm;
        grad_fake_mask.data_mut()[i] = l1_weight * inv_nm * sign_or_zero(diff);
    }

    Ok(GeneratorLoss {
        total: adversarial + l1_weight * l1,
        adversarial,
        l1,
        grad_d_fake,
        grad_fake_mask,
    })
}

#[inline]
fn sign_or_zero<T: Element>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Gradients for one layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub weights: Tensor<f32>,
    pub bias: Vec<f32>,
}

impl LayerGrads {
    fn add_in_place(&mut self, other: &LayerGrads) -> Result<()> {
        self.weights.add_in_place(&other.weights)?;
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        Ok(())
    }
}

/// Backpropagates `grad_output` through a cached forward pass.
///
/// Returns per-layer parameter gradients (empty when `need_param_grads` is
/// false) and the gradient with respect to the network input. Skip
/// connections route gradient back to their encoder source, which accumulates
/// contributions from both its chain successor and its skip consumer.
pub fn backward(
    spec: &NetworkSpec,
    params: &ParamStore,
    cache: &ActivationCache,
    grad_output: &Tensor<f32>,
    need_param_grads: bool,
) -> Result<(Vec<LayerGrads>, Tensor<f32>)> {
    let n_layers = spec.layers.len();
    let last_post = cache.output();
    if grad_output.shape() != last_post.shape() {
        return Err(Error::shape_mismatch(
            "backward seed",
            last_post.shape(),
            grad_output.shape(),
        ));
    }

    let mut pending: Vec<Option<Tensor<f32>>> = vec![None; n_layers];
    pending[n_layers - 1] = Some(grad_output.clone());
    let mut grad_input: Option<Tensor<f32>> = None;
    let mut grads: Vec<Option<LayerGrads>> = (0..n_layers).map(|_| None).collect();

    let accumulate = |slot: &mut Option<Tensor<f32>>, t: Tensor<f32>| -> Result<()> {
        match slot {
            Some(existing) => existing.add_in_place(&t),
            None => {
                *slot = Some(t);
                Ok(())
            }
        }
    };

    for i in (0..n_layers).rev() {
        let layer = &spec.layers[i];
        let g_post = pending[i]
            .take()
            .expect("every layer receives gradient from its consumer");
        let g_pre = activation_backward(&cache.pre[i], layer.activation, &g_post)?;
        let p = &params.layers[i];
        let g_in = if need_param_grads {
            let x = cache.layer_input(spec, i)?;
            let (g_in, g_w, g_b) = run_linear_backward(layer.kind, &x, &p.weights, layer.geom, &g_pre)?;
            grads[i] = Some(LayerGrads { weights: g_w, bias: g_b });
            g_in
        } else {
            run_linear_adjoint(layer.kind, &g_pre, &p.weights, layer.geom)?
        };

        match layer.skip_source {
            Some(src) => {
                let chain_c = g_in.shape().c - spec.layers[src - 1].out_channels;
                let (g_chain, g_skip) = split_channels(&g_in, chain_c)?;
                accumulate(&mut pending[src - 1], g_skip)?;
                if i == 0 {
                    accumulate(&mut grad_input, g_chain)?;
                } else {
                    accumulate(&mut pending[i - 1], g_chain)?;
                }
            }
            None => {
                if i == 0 {
                    accumulate(&mut grad_input, g_in)?;
                } else {
                    accumulate(&mut pending[i - 1], g_in)?;
                }
            }
        }
    }

    let grad_input = grad_input.expect("first layer produces an input gradient");
    let grads = if need_param_grads {
        grads
            .into_iter()
            .map(|g| g.expect("param grads requested for every layer"))
            .collect()
    } else {
        Vec::new()
    };
    Ok((grads, grad_input))
}

/// Adam first/second moment estimates for one parameter store.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<LayerGrads>,
    v: Vec<LayerGrads>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(spec: &NetworkSpec) -> OptimizerState {
        let zeros = || {
            (0..spec.layers.len())
                .map(|i| LayerGrads {
                    weights: Tensor::zeros(spec.weight_shape(i)),
                    bias: vec![0.0; spec.layers[i].out_channels],
                })
                .collect()
        };
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction. `label` names the network in
/// non-finite gradient errors.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[LayerGrads],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    label: &str,
) -> Result<()> {
    if grads.len() != params.layers.len() {
        return Err(Error::shape_mismatch(
            "adam gradient layer count",
            params.layers.len(),
            grads.len(),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.weights.all_finite() {
            return Err(Error::NonFinite(format!("{label} layer {} weight gradient", i + 1)));
        }
        if !g.bias.iter().all(|b| b.is_finite()) {
            return Err(Error::NonFinite(format!("{label} layer {} bias gradient", i + 1)));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = cfg.adam_beta1;
    let b2 = cfg.adam_beta2;
    let c1 = 1.0 - (b1 as f64).powi(t);
    let c2 = 1.0 - (b2 as f64).powi(t);
    let lr = cfg.learning_rate;
    let eps = cfg.adam_epsilon;

    let update = |p: &mut f32, g: f32, m: &mut f32, v: &mut f32| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = (*m as f64 / c1) as f32;
        let v_hat = (*v as f64 / c2) as f32;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for i in 0..params.layers.len() {
        let layer = &mut params.layers[i];
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (((p, &gw), mw), vw) in layer
            .weights
            .data_mut()
            .iter_mut()
            .zip(g.weights.data())
            .zip(m.weights.data_mut())
            .zip(v.weights.data_mut())
        {
            update(p, gw, mw, vw);
        }
        for (((p, &gb), mb), vb) in layer
            .bias
            .iter_mut()
            .zip(&g.bias)
            .zip(m.bias.iter_mut())
            .zip(v.bias.iter_mut())
        {
            update(p, gb, mb, vb);
        }
    }
    Ok(())
}

/// Losses of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub d_loss: f32,
    pub g_adv: f32,
    pub g_l1: f32,
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub d_loss: f32,
    pub g_adv: f32,
    pub g_l1: f32,
}

/// Per-step and per-epoch loss telemetry.
#[derive(Clone, Debug, Default)]
pub struct LossReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        self.steps
            .iter()
            .all(|s| s.d_loss.is_finite() && s.g_adv.is_finite() && s.g_l1.is_finite())
    }

    /// `epoch, step, d_loss, g_adv, g_l1` lines.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "epoch,step,d_loss,g_adv,g_l1").map_err(|e| Error::io(path, e))?;
        for s in &self.steps {
            writeln!(w, "{},{},{},{},{}", s.epoch, s.step, s.d_loss, s.g_adv, s.g_l1)
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Paths and telemetry produced by a training run.
#[derive(Debug)]
pub struct TrainOutput {
    pub generator_checkpoint: PathBuf,
    pub discriminator_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub report: LossReport,
}

fn batch_tensors(dataset: &[SamplePair], indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<&Tensor<f32>> = indices.iter().map(|&i| &dataset[i].image).collect();
    let masks: Vec<&Tensor<f32>> = indices.iter().map(|&i| &dataset[i].mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

fn sum_grads(mut a: Vec<LayerGrads>, b: Vec<LayerGrads>) -> Result<Vec<LayerGrads>> {
    for (ga, gb) in a.iter_mut().zip(&b) {
        ga.add_in_place(gb)?;
    }
    Ok(a)
}

/// Trains generator and discriminator on `dataset`, writing `gen.ckpt`,
/// `disc.ckpt`, and `loss.csv` into `out_dir`.
///
/// On divergence (a non-finite loss or gradient) the run aborts with an
/// error; the checkpoints from the most recent completed interval remain on
/// disk.
pub fn train(dataset: &[SamplePair], cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let gen_spec = build_generator(cfg.profile);
    let disc_spec = build_discriminator(cfg.profile);
    let (h, w) = cfg.profile.input_size();
    for pair in dataset {
        let s = pair.image.shape();
        if (s.c, s.h, s.w) != (3, h, w) || pair.image.shape().n != 1 {
            return Err(Error::shape_mismatch(
                format!("sample `{}` image for profile {}", pair.id, cfg.profile),
                format!("1x3x{h}x{w}"),
                s,
            ));
        }
        if pair.mask.shape() != crate::tensor::Shape::new(1, 1, h, w) {
            return Err(Error::shape_mismatch(
                format!("sample `{}` mask for profile {}", pair.id, cfg.profile),
                format!("1x1x{h}x{w}"),
                pair.mask.shape(),
            ));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gen_seed = rng.next_u64();
    let disc_seed = rng.next_u64();
    let mut gen_params = init_params(&gen_spec, gen_seed);
    let mut disc_params = init_params(&disc_spec, disc_seed);
    let mut gen_opt = OptimizerState::new(&gen_spec);
    let mut disc_opt = OptimizerState::new(&disc_spec);

    let gen_path = out_dir.join("gen.ckpt");
    let disc_path = out_dir.join("disc.ckpt");
    let csv_path = out_dir.join("loss.csv");

    let mut report = LossReport::default();
    let mut indices: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_sums = (0.0f64, 0.0f64, 0.0f64);
        let mut steps_in_epoch = 0usize;

        for (step_idx, batch) in indices.chunks(cfg.batch_size).enumerate() {
            let (images, true_masks) = batch_tensors(dataset, batch)?;

            // Generator forward once per batch; the cache is reused for the
            // generator step since the discriminator update leaves generator
            // parameters untouched.
            let (fake_masks, gen_cache) = forward(&gen_spec, &gen_params, &images)?;

            // Discriminator step.
            let real_pair = concat_channels(&images, &true_masks)?;
            let fake_pair = concat_channels(&images, &fake_masks)?;
            let (d_real, real_cache) = forward(&disc_spec, &disc_params, &real_pair)?;
            let (d_fake, fake_cache) = forward(&disc_spec, &disc_params, &fake_pair)?;
            let (d_loss, g_real, g_fake) = discriminator_loss(&d_real, &d_fake)?;
            if !d_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "discriminator loss at epoch {epoch} step {step_idx} (training diverged; last interval checkpoint retained)"
                )));
            }
            let (grads_real, _) = backward(&disc_spec, &disc_params, &real_cache, &g_real, true)?;
            let (grads_fake, _) = backward(&disc_spec, &disc_params, &fake_cache, &g_fake, true)?;
            let d_grads = sum_grads(grads_real, grads_fake)?;
            adam_step(&mut disc_params, &d_grads, &mut disc_opt, cfg, "discriminator")?;

            // Generator step, through the refreshed discriminator.
            let (d_fake2, fake_cache2) = forward(&disc_spec, &disc_params, &fake_pair)?;
            let g_loss = generator_loss(&d_fake2, &fake_masks, &true_masks, cfg.l1_weight)?;
            if !g_loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "generator loss at epoch {epoch} step {step_idx} (training diverged; last interval checkpoint retained)"
                )));
            }
            let (_, grad_pair) =
                backward(&disc_spec, &disc_params, &fake_cache2, &g_loss.grad_d_fake, false)?;
            let (_, grad_fake_adv) = split_channels(&grad_pair, 3)?;
            let grad_fake = grad_fake_adv.add(&g_loss.grad_fake_mask)?;
            let (g_grads, _) = backward(&gen_spec, &gen_params, &gen_cache, &grad_fake, true)?;
            adam_step(&mut gen_params, &g_grads, &mut gen_opt, cfg, "generator")?;

            report.steps.push(StepRecord {
                epoch,
                step: step_idx,
                d_loss,
                g_adv: g_loss.adversarial,
                g_l1: g_loss.l1,
            });
            epoch_sums.0 += d_loss as f64;
            epoch_sums.1 += g_loss.adversarial as f64;
            epoch_sums.2 += g_loss.l1 as f64;
            steps_in_epoch += 1;
        }

        let n = steps_in_epoch as f64;
        report.epochs.push(EpochRecord {
            epoch,
            d_loss: (epoch_sums.0 / n) as f32,
            g_adv: (epoch_sums.1 / n) as f32,
            g_l1: (epoch_sums.2 / n) as f32,
        });

        if epoch % cfg.checkpoint_interval == 0 || epoch == cfg.epochs {
            save_checkpoint(&gen_spec, &gen_params, &gen_path)?;
            save_checkpoint(&disc_spec, &disc_params, &disc_path)?;
        }
    }

    report.write_csv(&csv_path)?;
    Ok(TrainOutput {
        generator_checkpoint: gen_path,
        discriminator_checkpoint: disc_path,
        loss_csv: csv_path,
        report,
    })
}
