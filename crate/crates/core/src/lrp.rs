//! Layer-wise relevance propagation through a trained generator.
//!
//! A chosen set of output neurons is seeded with relevance equal to their own
//! activations (all other output relevance is zero). Walking the layers
//! backwards, each linear layer redistributes the relevance `R_k` of its
//! outputs onto its inputs in proportion to each input's share `a_j * w_jk`
//! of the pre-activation sum `z_k = sum_j a_j w_jk`:
//!
//! ```text
//! R_j = sum_k (a_j * w_jk / (z_k + eps * sign(z_k))) * R_k
//! ```
//!
//! Nonlinearities pass relevance through unchanged (the rule is stated over
//! post-activation values), and skip concatenations split relevance by
//! channel index back to their two sources, which is the unique
//! sum-preserving routing for an index-disjoint concat. With zero biases and
//! a vanishing stabilizer every step conserves total relevance, which the
//! accompanying conservation report makes observable.
//!
//! Propagation runs in f64 regardless of the network's f32 parameters:
//! relevance sums are differences of large cancelling terms, and f32
//! accumulation noise would drown the conservation diagnostics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::checkpoint::{MAGIC, VERSION};
use crate::error::{Error, Result};
use crate::network::{forward, ActivationCache, NetworkRole, NetworkSpec, ParamStore};
use crate::ops::{run_linear, run_linear_adjoint, ConvGeometry, LayerKind};
use crate::tensor::{split_channels, Shape, Tensor};

/// Which output neurons to explain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RelevanceTarget {
    /// One output neuron at `(channel, row, col)`.
    SingleNeuron { c: usize, y: usize, x: usize },
    /// Every output neuron whose activation exceeds `threshold` — the
    /// predicted mask region as a whole.
    MaskRegion { threshold: f64 },
    /// Every output neuron.
    FullOutput,
}

impl Default for RelevanceTarget {
    fn default() -> Self {
        RelevanceTarget::MaskRegion { threshold: 0.0 }
    }
}

/// Stabilization and bias handling for the propagation rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrpConfig {
    /// Sign-matched stabilizer added to denominators; `sign(0)` counts as +1.
    pub epsilon: f64,
    /// Whether `z_k` includes the layer bias. When it does, the bias absorbs
    /// its share of relevance, which leaks out of the conservation balance.
    pub include_bias_in_denominator: bool,
    pub target: RelevanceTarget,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig {
            epsilon: 1e-6,
            include_bias_in_denominator: true,
            target: RelevanceTarget::default(),
        }
    }
}

impl LrpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("lrp epsilon must be >= 0".into()));
        }
        if let RelevanceTarget::MaskRegion { threshold } = self.target {
            if !(-1.0 < threshold && threshold < 1.0) {
                return Err(Error::Config(format!(
                    "mask_region threshold must lie in (-1, 1), got {threshold}"
                )));
            }
        }
        Ok(())
    }
}

/// Relevance seed over the output layer: targeted neurons carry their own
/// activation value, all others exactly zero.
pub fn init_output_relevance(
    cache: &ActivationCache,
    target: RelevanceTarget,
) -> Result<Tensor<f64>> {
    let output = cache.output();
    let s = output.shape();
    let mut seed = Tensor::<f64>::zeros(s);
    match target {
        RelevanceTarget::SingleNeuron { c, y, x } => {
            if c >= s.c || y >= s.h || x >= s.w {
                return Err(Error::InvalidArgument(format!(
                    "target neuron ({c}, {y}, {x}) outside output shape {s}"
                )));
            }
            for n in 0..s.n {
                seed.set(n, c, y, x, output.get(n, c, y, x) as f64);
            }
        }
        RelevanceTarget::MaskRegion { threshold } => {
            for (dst, &v) in seed.data_mut().iter_mut().zip(output.data()) {
                if (v as f64) > threshold {
                    *dst = v as f64;
                }
            }
        }
        RelevanceTarget::FullOutput => {
            for (dst, &v) in seed.data_mut().iter_mut().zip(output.data()) {
                *dst = v as f64;
            }
        }
    }
    Ok(seed)
}

/// Redistributes `r_next` (relevance of the layer's outputs) onto the layer's
/// inputs. `a_prev` is the cached post-activation input of the layer.
///
/// Implemented as `s = r_next / (z + eps*sign(z))` followed by the adjoint of
/// the layer's linear map and an elementwise product with `a_prev`; expanding
/// the fraction shows this is the propagation rule verbatim.
pub fn propagate_linear(
    kind: LayerKind,
    a_prev: &Tensor<f64>,
    weights: &Tensor<f64>,
    bias: &[f64],
    geom: ConvGeometry,
    r_next: &Tensor<f64>,
    cfg: &LrpConfig,
) -> Result<Tensor<f64>> {
    let zero_bias = vec![0.0f64; bias.len()];
    let denom_bias = if cfg.include_bias_in_denominator {
        bias
    } else {
        &zero_bias[..]
    };
    let z = run_linear(kind, a_prev, weights, denom_bias, geom)?;
    if z.shape() != r_next.shape() {
        return Err(Error::shape_mismatch("relevance propagation", z.shape(), r_next.shape()));
    }
    let eps = cfg.epsilon;
    let s = z.zip_map(r_next, |zk, rk| {
        let stabilized = zk + if zk >= 0.0 { eps } else { -eps };
        if stabilized == 0.0 {
            0.0
        } else {
            rk / stabilized
        }
    })?;
    let c = run_linear_adjoint(kind, &s, weights, geom)?;
    a_prev.hadamard(&c)
}

/// Nonlinearities relate the same neurons before and after, so relevance
/// passes through unchanged.
pub fn propagate_activation(r: &Tensor<f64>) -> Tensor<f64> {
    r.clone()
}

/// Splits concatenated relevance back to the two concat sources by channel
/// index; exact and sum-preserving because the indices are disjoint.
pub fn propagate_concat(r_concat: &Tensor<f64>, c_a: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    split_channels(r_concat, c_a)
}

/// Relevance tensors for every generator layer plus the input layer, with
/// the per-step sums recorded while they were produced.
#[derive(Clone, Debug)]
pub struct RelevanceMap {
    /// Relevance over the network input (the per-pixel explanation map).
    pub input_map: Tensor<f64>,
    /// `layer_maps[i]` is the total relevance assigned to layer `i+1`'s
    /// post-activation site, including any share arriving over a skip.
    pub layer_maps: Vec<Tensor<f64>>,
    transitions: Vec<TransitionSums>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct TransitionSums {
    layer: usize,
    incoming: f64,
    outgoing: f64,
}

impl RelevanceMap {
    /// `("input", map), ("L1", map), ...` in forward order.
    pub fn named_maps(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut out = vec![("input".to_string(), &self.input_map)];
        for (i, m) in self.layer_maps.iter().enumerate() {
            out.push((format!("L{}", i + 1), m));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.input_map.all_finite() && self.layer_maps.iter().all(|m| m.all_finite())
    }
}

/// Leakage of one backward propagation step: `incoming` is the relevance
/// entering the layer from above, `outgoing` what its inputs received.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionLeakage {
    pub layer: usize,
    pub incoming: f64,
    pub outgoing: f64,
    /// `|outgoing - incoming| / |incoming|`, with 0/0 reported as 0.
    pub relative_leakage: f64,
}

/// Per-layer relevance sums plus per-transition leakage.
#[derive(Clone, Debug)]
pub struct ConservationReport {
    /// `("input", sum), ("L1", sum), ...` in forward order.
    pub layer_sums: Vec<(String, f64)>,
    pub transitions: Vec<TransitionLeakage>,
}

impl ConservationReport {
    pub fn max_leakage(&self) -> f64 {
        self.transitions
            .iter()
            .fold(0.0, |m, t| m.max(t.relative_leakage))
    }

    pub fn all_finite(&self) -> bool {
        self.layer_sums.iter().all(|(_, s)| s.is_finite())
            && self
                .transitions
                .iter()
                .all(|t| t.incoming.is_finite() && t.outgoing.is_finite())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("conservation report\n");
        out.push_str("layer\trelevance sum\n");
        for (name, sum) in &self.layer_sums {
            out.push_str(&format!("{name}\t{sum:+.6e}\n"));
        }
        out.push_str("transition\tincoming\toutgoing\trelative leakage\n");
        for t in &self.transitions {
            out.push_str(&format!(
                "L{}\t{:+.6e}\t{:+.6e}\t{:.3e}\n",
                t.layer, t.incoming, t.outgoing, t.relative_leakage
            ));
        }
        out
    }
}

/// Builds the conservation report for a set of relevance maps.
pub fn conservation_report(maps: &RelevanceMap) -> ConservationReport {
    let layer_sums = maps
        .named_maps()
        .into_iter()
        .map(|(name, m)| (name, m.sum()))
        .collect();
    let transitions = maps
        .transitions
        .iter()
        .map(|t| TransitionLeakage {
            layer: t.layer,
            incoming: t.incoming,
            outgoing: t.outgoing,
            relative_leakage: if t.incoming == 0.0 && t.outgoing == 0.0 {
                0.0
            } else if t.incoming == 0.0 {
                f64::INFINITY
            } else {
                (t.outgoing - t.incoming).abs() / t.incoming.abs()
            },
        })
        .collect();
    ConservationReport {
        layer_sums,
        transitions,
    }
}

/// Propagates an explicit output-relevance seed through a cached forward
/// pass. Exposed separately from [`explain`] because propagation is linear in
/// the seed, which is worth testing directly.
pub fn explain_seeded(
    spec: &NetworkSpec,
    params: &ParamStore,
    cache: &ActivationCache,
    seed: &Tensor<f64>,
    cfg: &LrpConfig,
) -> Result<(RelevanceMap, ConservationReport)> {
    cfg.validate()?;
    let n_layers = spec.layers.len();
    if seed.shape() != cache.output().shape() {
        return Err(Error::shape_mismatch(
            "relevance seed",
            cache.output().shape(),
            seed.shape(),
        ));
    }

    let mut pending: Vec<Option<Tensor<f64>>> = vec![None; n_layers];
    pending[n_layers - 1] = Some(seed.clone());
    let mut layer_maps: Vec<Option<Tensor<f64>>> = vec![None; n_layers];
    let mut input_map: Option<Tensor<f64>> = None;
    let mut transitions = Vec::with_capacity(n_layers);

    let accumulate = |slot: &mut Option<Tensor<f64>>, t: Tensor<f64>| -> Result<()> {
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
        // Total relevance at this layer's output site: its chain successor's
        // share plus any skip consumer's share, both already accumulated.
        let r_post = pending[i]
            .take()
            .expect("every layer receives relevance from its consumers");
        let r_pre = propagate_activation(&r_post);
        let a_prev = cache.layer_input(spec, i)?.cast::<f64>();
        let weights = params.layers[i].weights.cast::<f64>();
        let bias: Vec<f64> = params.layers[i].bias.iter().map(|&b| b as f64).collect();
        let r_in = propagate_linear(layer.kind, &a_prev, &weights, &bias, layer.geom, &r_pre, cfg)?;
        transitions.push(TransitionSums {
            layer: i + 1,
            incoming: r_post.sum(),
            outgoing: r_in.sum(),
        });
        layer_maps[i] = Some(r_post);

        match layer.skip_source {
            Some(src) => {
                let chain_c = r_in.shape().c - spec.layers[src - 1].out_channels;
                let (r_chain, r_skip) = propagate_concat(&r_in, chain_c)?;
                accumulate(&mut pending[src - 1], r_skip)?;
                if i == 0 {
                    accumulate(&mut input_map, r_chain)?;
                } else {
                    accumulate(&mut pending[i - 1], r_chain)?;
                }
            }
            None => {
                if i == 0 {
                    accumulate(&mut input_map, r_in)?;
                } else {
                    accumulate(&mut pending[i - 1], r_in)?;
                }
            }
        }
    }

    transitions.reverse();
    let maps = RelevanceMap {
        input_map: input_map.expect("first layer assigns input relevance"),
        layer_maps: layer_maps
            .into_iter()
            .map(|m| m.expect("every layer records its map"))
            .collect(),
        transitions,
    };
    let report = conservation_report(&maps);
    Ok((maps, report))
}

/// Runs a forward pass over `input`, seeds output relevance per the
/// configured target, and propagates it back to the pixels.
pub fn explain(
    spec: &NetworkSpec,
    params: &ParamStore,
    input: &Tensor<f32>,
    cfg: &LrpConfig,
) -> Result<(RelevanceMap, ConservationReport)> {
    if spec.role != NetworkRole::Generator {
        return Err(Error::InvalidArgument(
            "relevance propagation explains the generator; got a discriminator checkpoint".into(),
        ));
    }
    cfg.validate()?;
    let (_, cache) = forward(spec, params, input)?;
    let seed = init_output_relevance(&cache, cfg.target)?;
    explain_seeded(spec, params, &cache, &seed, cfg)
}

/// Writes relevance maps in the checkpoint container format: magic, version,
/// a header naming each map and its shape, then raw f32 little-endian blocks.
pub fn save_relevance_maps(maps: &RelevanceMap, path: &Path) -> Result<()> {
    let named = maps.named_maps();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    let mut header = String::from("kind: relevance\n");
    header.push_str(&format!("map_count: {}\n", named.len()));
    for (name, m) in &named {
        header.push_str(&format!("map: {name} shape={}\n", m.shape()));
    }

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(header.as_bytes()).map_err(io_err)?;
    for (_, m) in &named {
        let mut buf = Vec::with_capacity(4096);
        for chunk in m.data().chunks(1024) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            w.write_all(&buf).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Reads a relevance map container back as named f32 tensors.
pub fn load_relevance_maps(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.into());
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::with_capacity(1 << 20, file);
    let mut magic = [0u8; 8];
    if r.read_exact(&mut magic).is_err() || &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| corrupt("missing version"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    r.read_exact(&mut word).map_err(|_| corrupt("missing header length"))?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(|_| corrupt("truncated header"))?;
    let header = String::from_utf8(header).map_err(|_| corrupt("header is not UTF-8"))?;

    let mut lines = header.lines();
    if lines.next() != Some("kind: relevance") {
        return Err(corrupt("not a relevance map container"));
    }
    let count_line = lines.next().unwrap_or_default();
    let count: usize = count_line
        .strip_prefix("map_count: ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("bad map_count"))?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| corrupt("missing map line"))?;
        let rest = line
            .strip_prefix("map: ")
            .ok_or_else(|| corrupt("bad map line"))?;
        let (name, shape_part) = rest
            .split_once(" shape=")
            .ok_or_else(|| corrupt("bad map line"))?;
        let dims: Vec<usize> = shape_part
            .split('x')
            .map(|d| d.parse().map_err(|_| corrupt("bad shape")))
            .collect::<Result<_>>()?;
        if dims.len() != 4 {
            return Err(corrupt("bad shape"));
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let mut bytes = vec![0u8; shape.count() * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| corrupt("truncated map data"))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name.to_string(), Tensor::new(shape, data)?));
    }
    Ok(out)
}
