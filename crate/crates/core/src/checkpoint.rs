//! Checkpoint files.
//!
//! Layout: 8 magic bytes `SEGXPLN1`, a little-endian `u32` format version, a
//! little-endian `u32` header length, a UTF-8 text header describing the
//! network (role, profile, layer list with shapes), then for each layer in
//! order its raw weight floats followed by its bias floats, 32-bit IEEE-754
//! little-endian. The architecture travels with the weights, so loading
//! needs no flags.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{LayerParams, LayerSpec, NetworkRole, NetworkSpec, ParamStore};
use crate::ops::{Activation, ConvGeometry, LayerKind};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"SEGXPLN1";
pub const VERSION: u32 = 1;

fn act_to_str(a: Activation) -> String {
    match a {
        Activation::LeakyRelu { alpha } => format!("leaky_relu({alpha})"),
        Activation::Relu => "relu".into(),
        Activation::Tanh => "tanh".into(),
        Activation::Sigmoid => "sigmoid".into(),
    }
}

fn act_from_str(s: &str) -> Result<Activation> {
    if let Some(rest) = s.strip_prefix("leaky_relu(").and_then(|r| r.strip_suffix(')')) {
        let alpha: f64 = rest
            .parse()
            .map_err(|_| Error::CorruptCheckpoint(format!("bad activation `{s}`")))?;
        return Activation::leaky_relu(alpha);
    }
    match s {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        "sigmoid" => Ok(Activation::Sigmoid),
        other => Err(Error::CorruptCheckpoint(format!("bad activation `{other}`"))),
    }
}

fn header_text(spec: &NetworkSpec) -> String {
    let mut out = String::new();
    out.push_str(&format!("role: {}\n", spec.role.as_str()));
    out.push_str(&format!("profile: {}\n", spec.profile.as_str()));
    out.push_str(&format!("input_channels: {}\n", spec.in_channels));
    out.push_str(&format!(
        "input_size: {} {}\n",
        spec.input_size.0, spec.input_size.1
    ));
    out.push_str(&format!("layer_count: {}\n", spec.layers.len()));
    for (i, l) in spec.layers.iter().enumerate() {
        let kind = match l.kind {
            LayerKind::Conv => "conv",
            LayerKind::Tconv => "tconv",
        };
        let skip = match l.skip_source {
            Some(s) => s.to_string(),
            None => "-".into(),
        };
        let w = spec.weight_shape(i);
        out.push_str(&format!(
            "layer: {} kind={kind} out={} act={} skip={skip} k={}x{} s={}x{} p={}x{} w={} b={}\n",
            l.index,
            l.out_channels,
            act_to_str(l.activation),
            l.geom.kernel.0,
            l.geom.kernel.1,
            l.geom.stride.0,
            l.geom.stride.1,
            l.geom.padding.0,
            l.geom.padding.1,
            w,
            l.out_channels,
        ));
    }
    out
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| corrupt(format!("bad {what} `{s}`")))
}

fn parse_shape(s: &str) -> Result<Shape> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| parse_usize(p, "shape component"))
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        return Err(corrupt(format!("bad shape `{s}`")));
    }
    Ok(Shape::new(parts[0], parts[1], parts[2], parts[3]))
}

fn parse_header(text: &str) -> Result<(NetworkSpec, Vec<Shape>)> {
    let mut lines = text.lines();
    let mut field = |name: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| corrupt(format!("missing `{name}` line")))?;
        line.strip_prefix(&format!("{name}: "))
            .map(str::to_string)
            .ok_or_else(|| corrupt(format!("expected `{name}:` line, got `{line}`")))
    };

    let role: NetworkRole = field("role")?.parse()
        .map_err(|e| corrupt(format!("{e}")))?;
    let profile = field("profile")?
        .parse()
        .map_err(|e| corrupt(format!("{e}")))?;
    let in_channels = parse_usize(&field("input_channels")?, "input_channels")?;
    let size_line = field("input_size")?;
    let size_parts: Vec<&str> = size_line.split_whitespace().collect();
    if size_parts.len() != 2 {
        return Err(corrupt(format!("bad input_size `{size_line}`")));
    }
    let input_size = (
        parse_usize(size_parts[0], "input height")?,
        parse_usize(size_parts[1], "input width")?,
    );
    let layer_count = parse_usize(&field("layer_count")?, "layer_count")?;

    let mut layers = Vec::with_capacity(layer_count);
    let mut shapes = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let line = field("layer")?;
        let mut index = None;
        let mut kind = None;
        let mut out_c = None;
        let mut act = None;
        let mut skip = None;
        let mut kernel = None;
        let mut stride = None;
        let mut padding = None;
        let mut wshape = None;
        for (pos, tok) in line.split_whitespace().enumerate() {
            if pos == 0 {
                index = Some(parse_usize(tok, "layer index")?);
                continue;
            }
            let (key, val) = tok
                .split_once('=')
                .ok_or_else(|| corrupt(format!("bad layer token `{tok}`")))?;
            let pair = |v: &str, what: &str| -> Result<(usize, usize)> {
                let (a, b) = v
                    .split_once('x')
                    .ok_or_else(|| corrupt(format!("bad {what} `{v}`")))?;
                Ok((parse_usize(a, what)?, parse_usize(b, what)?))
            };
            match key {
                "kind" => {
                    kind = Some(match val {
                        "conv" => LayerKind::Conv,
                        "tconv" => LayerKind::Tconv,
                        other => return Err(corrupt(format!("bad layer kind `{other}`"))),
                    })
                }
                "out" => out_c = Some(parse_usize(val, "out channels")?),
                "act" => act = Some(act_from_str(val)?),
                "skip" => {
                    skip = Some(if val == "-" {
                        None
                    } else {
                        Some(parse_usize(val, "skip source")?)
                    })
                }
                "k" => kernel = Some(pair(val, "kernel")?),
                "s" => stride = Some(pair(val, "stride")?),
                "p" => padding = Some(pair(val, "padding")?),
                "w" => wshape = Some(parse_shape(val)?),
                "b" => {
                    parse_usize(val, "bias length")?;
                }
                other => return Err(corrupt(format!("unknown layer field `{other}`"))),
            }
        }
        let missing = || corrupt(format!("incomplete layer line `{line}`"));
        layers.push(LayerSpec {
            index: index.ok_or_else(missing)?,
            kind: kind.ok_or_else(missing)?,
            out_channels: out_c.ok_or_else(missing)?,
            activation: act.ok_or_else(missing)?,
            skip_source: skip.ok_or_else(missing)?,
            geom: ConvGeometry::new(
                kernel.ok_or_else(missing)?,
                stride.ok_or_else(missing)?,
                padding.ok_or_else(missing)?,
            )?,
        });
        shapes.push(wshape.ok_or_else(missing)?);
    }

    Ok((
        NetworkSpec {
            role,
            profile,
            in_channels,
            input_size,
            layers,
        },
        shapes,
    ))
}

/// Writes the spec and parameters to `path`; the round trip through
/// [`load_checkpoint`] is bit-identical.
pub fn save_checkpoint(spec: &NetworkSpec, params: &ParamStore, path: &Path) -> Result<()> {
    if params.layers.len() != spec.layers.len() {
        return Err(Error::shape_mismatch(
            "checkpoint parameter layer count",
            spec.layers.len(),
            params.layers.len(),
        ));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let header = header_text(spec);
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(header.as_bytes()).map_err(io_err)?;
    for layer in &params.layers {
        write_floats(&mut w, layer.weights.data()).map_err(io_err)?;
        write_floats(&mut w, &layer.bias).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

fn write_floats(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(4096);
    for chunk in data.chunks(1024) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_floats(r: &mut impl Read, count: usize) -> std::io::Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Reads a checkpoint back into its spec and parameters, verifying magic,
/// version, header/shape consistency, exact length, and value finiteness.
pub fn load_checkpoint(path: &Path) -> Result<(NetworkSpec, ParamStore)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::with_capacity(1 << 20, file);

    let mut magic = [0u8; 8];
    if r.read_exact(&mut magic).is_err() || &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|_| corrupt("missing version"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    r.read_exact(&mut word)
        .map_err(|_| corrupt("missing header length"))?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| corrupt("truncated header"))?;
    let header = String::from_utf8(header_bytes).map_err(|_| corrupt("header is not UTF-8"))?;

    let (spec, declared_shapes) = parse_header(&header)?;
    for (i, &shape) in declared_shapes.iter().enumerate() {
        let expect = spec.weight_shape(i);
        if shape != expect {
            return Err(corrupt(format!(
                "layer {} weight shape {shape} inconsistent with architecture (expected {expect})",
                i + 1
            )));
        }
    }

    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, shape) in declared_shapes.iter().enumerate() {
        let weights = read_floats(&mut r, shape.count())
            .map_err(|_| corrupt(format!("truncated weights for layer {}", i + 1)))?;
        let bias = read_floats(&mut r, spec.layers[i].out_channels)
            .map_err(|_| corrupt(format!("truncated bias for layer {}", i + 1)))?;
        layers.push(LayerParams {
            weights: Tensor::new(*shape, weights)?,
            bias,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(corrupt("trailing data after parameters"));
    }

    let params = ParamStore { layers };
    if !params.all_finite() {
        return Err(corrupt("non-finite parameter value"));
    }
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_discriminator, build_generator, init_params, Profile};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("segxplain-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let spec = build_generator(Profile::Desk32);
        let params = init_params(&spec, 9);
        let path = tmp("roundtrip.ckpt");
        save_checkpoint(&spec, &params, &path).unwrap();
        let (spec2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(params, params2);
    }

    #[test]
    fn discriminator_round_trip() {
        let spec = build_discriminator(Profile::Desk32);
        let params = init_params(&spec, 10);
        let path = tmp("disc.ckpt");
        save_checkpoint(&spec, &params, &path).unwrap();
        let (spec2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(params, params2);
    }

    #[test]
    fn bad_magic_is_not_a_checkpoint() {
        let path = tmp("magic.ckpt");
        std::fs::write(&path, b"NOTMAGIC rest of file").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic)));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let spec = build_generator(Profile::Desk32);
        let params = init_params(&spec, 1);
        let path = tmp("version.ckpt");
        save_checkpoint(&spec, &params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn truncation_detected_without_partial_store() {
        let spec = build_generator(Profile::Desk32);
        let params = init_params(&spec, 2);
        let path = tmp("trunc.ckpt");
        save_checkpoint(&spec, &params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CorruptCheckpoint(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_detected() {
        let spec = build_generator(Profile::Desk32);
        let params = init_params(&spec, 2);
        let path = tmp("trailing.ckpt");
        save_checkpoint(&spec, &params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 1, 2, 3]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn shape_inconsistency_detected() {
        let spec = build_generator(Profile::Desk32);
        let params = init_params(&spec, 2);
        let path = tmp("shape.ckpt");
        save_checkpoint(&spec, &params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
        let header = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
        let tampered = header.replace("w=64x3x4x4", "w=64x5x4x4");
        assert_ne!(header, tampered);
        assert_eq!(header.len(), tampered.len());
        let mut out = bytes.clone();
        out[16..16 + header_len].copy_from_slice(tampered.as_bytes());
        std::fs::write(&path, out).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CorruptCheckpoint(msg)) => assert!(msg.contains("inconsistent"), "{msg}"),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }
}
