//! Network construction and inference: the encoder-decoder generator with
//! skip connections, the patch discriminator, parameter initialization, and
//! cached forward passes.
//!
//! Both networks use 4x4 kernels with zero-padding 1 throughout. Generator
//! layers stride 2, so each encoder layer halves the spatial dims and each
//! decoder layer doubles them. The discriminator strides 2,2,2,1,1 and ends
//! in a sigmoid patch grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
pub use crate::ops::LayerKind;
use crate::ops::{activation, run_linear, Activation, ConvGeometry};
use crate::tensor::{concat_channels, Shape, Tensor};

/// Slope used by every leaky ReLU in both networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Standard deviation of the weight initialization.
pub const WEIGHT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkRole {
    Generator,
    Discriminator,
}

impl NetworkRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            NetworkRole::Generator => "generator",
            NetworkRole::Discriminator => "discriminator",
        }
    }
}

impl std::str::FromStr for NetworkRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generator" => Ok(NetworkRole::Generator),
            "discriminator" => Ok(NetworkRole::Discriminator),
            other => Err(Error::InvalidArgument(format!("unknown network role `{other}`"))),
        }
    }
}

/// Network size profile. `Canonical256` is the full 8+8-layer generator on
/// 256x256 inputs; `Desk32` is a 5+5-layer variant on 32x32 inputs that
/// shares every code path and runs fast enough for tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Canonical256,
    Desk32,
}

impl Profile {
    pub fn as_str(&self) -> &'static str {
        match self {
            Profile::Canonical256 => "canonical-256",
            Profile::Desk32 => "desk-32",
        }
    }

    pub fn input_size(&self) -> (usize, usize) {
        match self {
            Profile::Canonical256 => (256, 256),
            Profile::Desk32 => (32, 32),
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical-256" => Ok(Profile::Canonical256),
            "desk-32" => Ok(Profile::Desk32),
            other => Err(Error::UnknownProfile(other.to_string())),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One layer of a network: its linear map, nonlinearity, and optional skip
/// input concatenated from an earlier layer's output.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    /// 1-based position within the network.
    pub index: usize,
    pub kind: LayerKind,
    pub out_channels: usize,
    pub activation: Activation,
    /// Encoder layer whose output is channel-concatenated to this layer's
    /// input (decoder layers only).
    pub skip_source: Option<usize>,
    pub geom: ConvGeometry,
}

/// Declarative description of a whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub role: NetworkRole,
    pub profile: Profile,
    pub in_channels: usize,
    pub input_size: (usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Channel count entering layer `i` (0-based), including any skip concat.
    pub fn layer_in_channels(&self, i: usize) -> usize {
        let chain = if i == 0 {
            self.in_channels
        } else {
            self.layers[i - 1].out_channels
        };
        match self.layers[i].skip_source {
            Some(src) => chain + self.layers[src - 1].out_channels,
            None => chain,
        }
    }

    /// Weight tensor shape of layer `i`: conv stores `(out, in, kh, kw)`,
    /// transposed conv stores `(in, out, kh, kw)`.
    pub fn weight_shape(&self, i: usize) -> Shape {
        let layer = &self.layers[i];
        let in_c = self.layer_in_channels(i);
        let (kh, kw) = layer.geom.kernel;
        match layer.kind {
            LayerKind::Conv => Shape::new(layer.out_channels, in_c, kh, kw),
            LayerKind::Tconv => Shape::new(in_c, layer.out_channels, kh, kw),
        }
    }

    /// `(channels, h, w)` after each layer, starting from the network input.
    pub fn shape_chain(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (mut h, mut w) = self.input_size;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (nh, nw) = match layer.kind {
                LayerKind::Conv => layer.geom.conv_output(h, w)?,
                LayerKind::Tconv => layer.geom.tconv_output(h, w)?,
            };
            h = nh;
            w = nw;
            out.push((layer.out_channels, h, w));
        }
        Ok(out)
    }

    /// Total number of learnable scalars (weights plus biases).
    pub fn param_count(&self) -> usize {
        (0..self.layers.len())
            .map(|i| self.weight_shape(i).count() + self.layers[i].out_channels)
            .sum()
    }
}

fn stride2_geom() -> ConvGeometry {
    ConvGeometry {
        kernel: (4, 4),
        stride: (2, 2),
        padding: (1, 1),
    }
}

fn stride1_geom() -> ConvGeometry {
    ConvGeometry {
        kernel: (4, 4),
        stride: (1, 1),
        padding: (1, 1),
    }
}

/// Builds the generator: a stride-2 conv encoder into a 1x1 bottleneck, then
/// a mirrored transposed-conv decoder. Decoder layer `k` (for `k >= 2`)
/// concatenates the output of encoder layer `depth + 1 - k`. Encoder layers
/// use leaky ReLU, decoder layers ReLU, and the final layer tanh into a
/// single mask channel.
pub fn build_generator(profile: Profile) -> NetworkSpec {
    let (encoder, decoder): (Vec<usize>, Vec<usize>) = match profile {
        Profile::Canonical256 => (
            vec![64, 128, 256, 512, 512, 512, 512, 512],
            vec![512, 512, 512, 512, 256, 128, 64, 1],
        ),
        Profile::Desk32 => (vec![64, 128, 256, 512, 512], vec![512, 256, 128, 64, 1]),
    };
    let depth = encoder.len();
    let leaky = Activation::LeakyRelu { alpha: LEAKY_SLOPE };
    let mut layers = Vec::with_capacity(2 * depth);
    for (i, &out_c) in encoder.iter().enumerate() {
        layers.push(LayerSpec {
            index: i + 1,
            kind: LayerKind::Conv,
            out_channels: out_c,
            activation: leaky,
            skip_source: None,
            geom: stride2_geom(),
        });
    }
    for (j, &out_c) in decoder.iter().enumerate() {
        let k = j + 1; // decoder position, 1-based
        layers.push(LayerSpec {
            index: depth + k,
            kind: LayerKind::Tconv,
            out_channels: out_c,
            activation: if k == depth { Activation::Tanh } else { Activation::Relu },
            skip_source: if k >= 2 { Some(depth + 1 - k) } else { None },
            geom: stride2_geom(),
        });
    }
    NetworkSpec {
        role: NetworkRole::Generator,
        profile,
        in_channels: 3,
        input_size: profile.input_size(),
        layers,
    }
}

/// Builds the discriminator: five conv layers over an image+mask pair
/// (3 + 1 input channels) with strides 2,2,2,1,1, leaky ReLU except a final
/// sigmoid, producing a patch grid of real/fake scores in (0, 1).
pub fn build_discriminator(profile: Profile) -> NetworkSpec {
    let out_channels = [64usize, 128, 256, 512, 1];
    let layers = out_channels
        .iter()
        .enumerate()
        .map(|(i, &out_c)| LayerSpec {
            index: i + 1,
            kind: LayerKind::Conv,
            out_channels: out_c,
            activation: if i == 4 {
                Activation::Sigmoid
            } else {
                Activation::LeakyRelu { alpha: LEAKY_SLOPE }
            },
            skip_source: None,
            geom: if i < 3 { stride2_geom() } else { stride1_geom() },
        })
        .collect();
    NetworkSpec {
        role: NetworkRole::Discriminator,
        profile,
        in_channels: 4,
        input_size: profile.input_size(),
        layers,
    }
}

/// Learned weights and biases for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor<f32>,
    pub bias: Vec<f32>,
}

/// All parameters of one network, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub layers: Vec<LayerParams>,
}

impl ParamStore {
    /// Zero-filled parameters matching `spec`.
    pub fn zeros(spec: &NetworkSpec) -> ParamStore {
        ParamStore {
            layers: (0..spec.layers.len())
                .map(|i| LayerParams {
                    weights: Tensor::zeros(spec.weight_shape(i)),
                    bias: vec![0.0; spec.layers[i].out_channels],
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.all_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// Draws weights from Normal(0, 0.02) and zeroes the biases.
///
/// Sampling uses a ChaCha8 stream keyed by `seed`, which is reproducible
/// across platforms and releases, so a given seed always yields bit-identical
/// parameters.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, WEIGHT_INIT_STD as f32).expect("valid std");
    let layers = (0..spec.layers.len())
        .map(|i| {
            let shape = spec.weight_shape(i);
            let data = (0..shape.count()).map(|_| normal.sample(&mut rng)).collect();
            LayerParams {
                weights: Tensor::new(shape, data).expect("shape matches data"),
                bias: vec![0.0; spec.layers[i].out_channels],
            }
        })
        .collect();
    ParamStore { layers }
}

/// Per-layer tensors recorded during one forward pass: the network input and
/// every layer's pre- and post-activation values.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    pub input: Tensor<f32>,
    pub pre: Vec<Tensor<f32>>,
    pub post: Vec<Tensor<f32>>,
}

impl ActivationCache {
    /// The tensor entering layer `i`'s linear map, with any skip concat applied.
    pub fn layer_input(&self, spec: &NetworkSpec, i: usize) -> Result<Tensor<f32>> {
        let chain = if i == 0 { &self.input } else { &self.post[i - 1] };
        match spec.layers[i].skip_source {
            Some(src) => concat_channels(chain, &self.post[src - 1]),
            None => Ok(chain.clone()),
        }
    }

    pub fn output(&self) -> &Tensor<f32> {
        self.post.last().expect("cache holds at least one layer")
    }
}

fn check_params(spec: &NetworkSpec, params: &ParamStore) -> Result<()> {
    if params.layers.len() != spec.layers.len() {
        return Err(Error::shape_mismatch(
            format!("{} parameter layer count", spec.role.as_str()),
            spec.layers.len(),
            params.layers.len(),
        ));
    }
    for i in 0..spec.layers.len() {
        let expect = spec.weight_shape(i);
        if params.layers[i].weights.shape() != expect {
            return Err(Error::shape_mismatch(
                format!("{} layer {} weights", spec.role.as_str(), i + 1),
                expect,
                params.layers[i].weights.shape(),
            ));
        }
        if params.layers[i].bias.len() != spec.layers[i].out_channels {
            return Err(Error::shape_mismatch(
                format!("{} layer {} bias", spec.role.as_str(), i + 1),
                spec.layers[i].out_channels,
                params.layers[i].bias.len(),
            ));
        }
    }
    Ok(())
}

/// Runs the network over `input`, returning the output and the full
/// activation cache used by backpropagation and relevance propagation.
pub fn forward(
    spec: &NetworkSpec,
    params: &ParamStore,
    input: &Tensor<f32>,
) -> Result<(Tensor<f32>, ActivationCache)> {
    check_params(spec, params)?;
    let s = input.shape();
    if s.c != spec.in_channels || (s.h, s.w) != spec.input_size {
        return Err(Error::shape_mismatch(
            format!("{} input", spec.role.as_str()),
            format!(
                "nx{}x{}x{}",
                spec.in_channels, spec.input_size.0, spec.input_size.1
            ),
            s,
        ));
    }

    let mut cache = ActivationCache {
        input: input.clone(),
        pre: Vec::with_capacity(spec.layers.len()),
        post: Vec::with_capacity(spec.layers.len()),
    };
    for (i, layer) in spec.layers.iter().enumerate() {
        let x = cache.layer_input(spec, i)?;
        let p = &params.layers[i];
        let pre = run_linear(layer.kind, &x, &p.weights, &p.bias, layer.geom).map_err(|e| {
            match e {
                Error::ShapeMismatch { context, expected, got } => Error::ShapeMismatch {
                    context: format!("{} layer {}: {context}", spec.role.as_str(), i + 1),
                    expected,
                    got,
                },
                other => other,
            }
        })?;
        let post = activation(&pre, layer.activation);
        cache.pre.push(pre);
        cache.post.push(post);
    }
    let output = cache.output().clone();
    Ok((output, cache))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_generator_matches_declared_layout() {
        let spec = build_generator(Profile::Canonical256);
        assert_eq!(spec.layers.len(), 16);
        assert_eq!(spec.in_channels, 3);
        let enc: Vec<usize> = spec.layers[..8].iter().map(|l| l.out_channels).collect();
        assert_eq!(enc, vec![64, 128, 256, 512, 512, 512, 512, 512]);
        let dec: Vec<usize> = spec.layers[8..].iter().map(|l| l.out_channels).collect();
        assert_eq!(dec, vec![512, 512, 512, 512, 256, 128, 64, 1]);

        // Bottleneck reaches 1x1 after eight stride-2 halvings of 256.
        let chain = spec.shape_chain().unwrap();
        let spatial: Vec<usize> = chain.iter().map(|&(_, h, _)| h).collect();
        assert_eq!(spatial[..8], [128, 64, 32, 16, 8, 4, 2, 1]);
        assert_eq!(spatial[8..], [2, 4, 8, 16, 32, 64, 128, 256]);

        // Decoder k takes its skip from encoder layer 9-k; DeConv1 has none.
        assert_eq!(spec.layers[8].skip_source, None);
        for k in 2..=8usize {
            assert_eq!(spec.layers[8 + k - 1].skip_source, Some(9 - k));
        }
        // DeConv2 input: 512 from DeConv1 plus 512 from Conv7.
        assert_eq!(spec.layer_in_channels(9), 1024);

        let last = spec.layers.last().unwrap();
        assert_eq!(last.out_channels, 1);
        assert_eq!(last.activation, Activation::Tanh);
        for l in &spec.layers[..8] {
            assert_eq!(l.activation, Activation::LeakyRelu { alpha: LEAKY_SLOPE });
        }
        for l in &spec.layers[8..15] {
            assert_eq!(l.activation, Activation::Relu);
        }
    }

    #[test]
    fn desk_generator_mirrors_canonical_structure() {
        let spec = build_generator(Profile::Desk32);
        assert_eq!(spec.layers.len(), 10);
        let chain = spec.shape_chain().unwrap();
        let spatial: Vec<usize> = chain.iter().map(|&(_, h, _)| h).collect();
        assert_eq!(spatial, vec![16, 8, 4, 2, 1, 2, 4, 8, 16, 32]);
        for k in 2..=5usize {
            assert_eq!(spec.layers[5 + k - 1].skip_source, Some(6 - k));
        }
        // Every skip concat pairs tensors of equal spatial dims.
        for (i, layer) in spec.layers.iter().enumerate() {
            if let Some(src) = layer.skip_source {
                let here = (chain[i - 1].1, chain[i - 1].2);
                assert_eq!((chain[src - 1].1, chain[src - 1].2), here);
            }
        }
    }

    #[test]
    fn discriminator_takes_image_mask_pairs() {
        let spec = build_discriminator(Profile::Desk32);
        assert_eq!(spec.in_channels, 4);
        assert_eq!(spec.layers.last().unwrap().out_channels, 1);
        assert_eq!(spec.layers.last().unwrap().activation, Activation::Sigmoid);
        let strides: Vec<usize> = spec.layers.iter().map(|l| l.geom.stride.0).collect();
        assert_eq!(strides, vec![2, 2, 2, 1, 1]);
        // Patch grid output, not a single scalar.
        let chain = spec.shape_chain().unwrap();
        let (c, h, w) = *chain.last().unwrap();
        assert_eq!(c, 1);
        assert!(h > 1 && w > 1, "expected a patch grid, got {h}x{w}");
    }

    #[test]
    fn discriminator_outputs_lie_in_unit_interval() {
        let spec = build_discriminator(Profile::Desk32);
        let params = init_params(&spec, 3);
        let input = Tensor::from_fn(Shape::new(1, 4, 32, 32), |_, c, y, x| {
            ((c + y + x) as f32 * 0.37).sin()
        });
        let (out, _) = forward(&spec, &params, &input).unwrap();
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = build_generator(Profile::Desk32);
        let a = init_params(&spec, 42);
        let b = init_params(&spec, 42);
        assert_eq!(a, b);
        let c = init_params(&spec, 43);
        assert_ne!(a, c);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_std_is_near_declared_value() {
        let spec = build_generator(Profile::Desk32);
        let params = init_params(&spec, 7);
        let mut count = 0usize;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for l in &params.layers {
            for &w in l.weights.data() {
                count += 1;
                sum += w as f64;
                sumsq += (w as f64) * (w as f64);
            }
        }
        assert!(count >= 100_000, "need a large sample, got {count}");
        let mean = sum / count as f64;
        let std = (sumsq / count as f64 - mean * mean).sqrt();
        assert!((std - 0.02).abs() < 0.001, "std {std}");
    }

    #[test]
    fn zero_params_give_zero_generator_output() {
        let spec = build_generator(Profile::Desk32);
        let params = ParamStore::zeros(&spec);
        let input = Tensor::filled(Shape::new(2, 3, 32, 32), 0.7);
        let (out, cache) = forward(&spec, &params, &input).unwrap();
        assert_eq!(out.shape(), Shape::new(2, 1, 32, 32));
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(cache.pre.len(), spec.layers.len());
        assert_eq!(cache.post.len(), spec.layers.len());
    }

    #[test]
    fn generator_output_is_bounded_and_spatially_matched() {
        let spec = build_generator(Profile::Desk32);
        let params = init_params(&spec, 11);
        let input = Tensor::from_fn(Shape::new(1, 3, 32, 32), |_, c, y, x| {
            (((c * 31 + y * 7 + x) % 17) as f32 / 8.5) - 1.0
        });
        let (out, _) = forward(&spec, &params, &input).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 32, 32));
        assert!(out.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn forward_rejects_wrong_input_and_names_network() {
        let spec = build_generator(Profile::Desk32);
        let params = ParamStore::zeros(&spec);
        let bad = Tensor::<f32>::zeros(Shape::new(1, 3, 16, 16));
        let err = forward(&spec, &params, &bad).unwrap_err();
        assert!(err.to_string().contains("generator"));
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = build_generator(Profile::Desk32);
        let params = init_params(&spec, 5);
        let input = Tensor::from_fn(Shape::new(1, 3, 32, 32), |_, c, y, x| {
            ((c * 131 + y * 17 + x) as f32).cos() * 0.5
        });
        let (a, _) = forward(&spec, &params, &input).unwrap();
        let (b, _) = forward(&spec, &params, &input).unwrap();
        assert_eq!(a, b);
    }
}
