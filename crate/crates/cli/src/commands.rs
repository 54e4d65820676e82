//! Implementations of the five subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use segxplain_core::checkpoint::load_checkpoint;
use segxplain_core::data::{binarize, gen_synthetic, load_image, save_image, DatasetManifest};
use segxplain_core::heatmap::render_heatmap;
use segxplain_core::lrp::{self, LrpConfig, RelevanceTarget};
use segxplain_core::metrics::{aggregate, confusion, metrics};
use segxplain_core::network::{forward, NetworkRole, Profile};
use segxplain_core::training::{self, TrainConfig};
use segxplain_core::{Error, Result, Tensor};

use crate::config::FileConfig;
use crate::Cli;

fn file_config(cli: &Cli) -> Result<FileConfig> {
    FileConfig::load(cli.config.as_deref())
}

fn resolve_profile(cli: &Cli, file: &FileConfig) -> Result<Profile> {
    file.resolve(cli.profile.clone(), "profile", Profile::Desk32.as_str().to_string())?
        .parse()
}

fn resolve_seed(cli: &Cli, file: &FileConfig) -> Result<u64> {
    file.resolve(cli.seed, "seed", 0)
}

fn image_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::InvalidArgument(format!("cannot derive an id from {}", path.display())))
}

pub fn gen_data(cli: &Cli, kind: &str, count: usize, size: Option<usize>, out: &Path) -> Result<()> {
    let file = file_config(cli)?;
    let kind = kind.parse()?;
    let seed = resolve_seed(cli, &file)?;
    let size = size.unwrap_or_else(|| {
        resolve_profile(cli, &file)
            .map(|p| p.input_size().0)
            .unwrap_or(32)
    });
    let (train, test) = gen_synthetic(kind, count, size, seed, out)?;
    println!(
        "wrote {count} image/mask pairs ({} train, {} test) under {}",
        train.entries.len(),
        test.entries.len(),
        out.display()
    );
    println!("train manifest: {}", out.join("train.tsv").display());
    println!("test manifest: {}", out.join("test.tsv").display());
    Ok(())
}

pub struct TrainFlags {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f32>,
    pub adam_beta1: Option<f32>,
    pub adam_beta2: Option<f32>,
    pub adam_epsilon: Option<f32>,
    pub l1_weight: Option<f32>,
    pub checkpoint_interval: Option<usize>,
}

pub fn train(cli: &Cli, manifest_path: &Path, out: &Path, flags: TrainFlags) -> Result<()> {
    let file = file_config(cli)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: file.resolve(flags.epochs, "epochs", d.epochs)?,
        batch_size: file.resolve(flags.batch_size, "batch_size", d.batch_size)?,
        learning_rate: file.resolve(flags.learning_rate, "learning_rate", d.learning_rate)?,
        adam_beta1: file.resolve(flags.adam_beta1, "adam_beta1", d.adam_beta1)?,
        adam_beta2: file.resolve(flags.adam_beta2, "adam_beta2", d.adam_beta2)?,
        adam_epsilon: file.resolve(flags.adam_epsilon, "adam_epsilon", d.adam_epsilon)?,
        l1_weight: file.resolve(flags.l1_weight, "l1_weight", d.l1_weight)?,
        seed: resolve_seed(cli, &file)?,
        profile: resolve_profile(cli, &file)?,
        checkpoint_interval: file.resolve(
            flags.checkpoint_interval,
            "checkpoint_interval",
            d.checkpoint_interval,
        )?,
    };
    cfg.validate()?;

    let manifest = DatasetManifest::load(manifest_path)?;
    let pairs = manifest.load_pairs()?;
    let output = training::train(&pairs, &cfg, out)?;
    let last = output
        .report
        .epochs
        .last()
        .expect("at least one epoch ran");
    println!(
        "epoch {}: d_loss {:.4} g_adv {:.4} g_l1 {:.4}",
        last.epoch, last.d_loss, last.g_adv, last.g_l1
    );
    println!("generator checkpoint: {}", output.generator_checkpoint.display());
    println!("discriminator checkpoint: {}", output.discriminator_checkpoint.display());
    println!("loss log: {}", output.loss_csv.display());
    Ok(())
}

fn load_generator(path: &Path) -> Result<(segxplain_core::network::NetworkSpec, segxplain_core::network::ParamStore)> {
    let (spec, params) = load_checkpoint(path)?;
    if spec.role != NetworkRole::Generator {
        return Err(Error::InvalidArgument(format!(
            "{} holds a {} checkpoint; a generator is required",
            path.display(),
            spec.role.as_str()
        )));
    }
    Ok((spec, params))
}

pub fn infer(
    cli: &Cli,
    checkpoint: &Path,
    image: Option<&Path>,
    manifest: Option<&Path>,
    out: &Path,
    threshold: Option<f32>,
) -> Result<()> {
    let file = file_config(cli)?;
    let threshold = file.resolve(threshold, "threshold", 0.0)?;
    let (spec, params) = load_generator(checkpoint)?;

    let inputs: Vec<(String, PathBuf)> = match (image, manifest) {
        (Some(img), None) => vec![(image_id(img)?, img.to_path_buf())],
        (None, Some(man)) => {
            let m = DatasetManifest::load(man)?;
            m.entries
                .iter()
                .map(|e| (e.id.clone(), m.root.join(&e.image_path)))
                .collect()
        }
        _ => {
            return Err(Error::InvalidArgument(
                "pass exactly one of --image or --manifest".into(),
            ))
        }
    };

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (id, path) in &inputs {
        let img = load_image(path)?;
        let (pred, _) = forward(&spec, &params, &img)?;
        let mask = binarize(&pred, threshold);
        save_image(&mask, &out.join(format!("{id}_mask.png")))?;
    }
    println!("wrote {} masks to {}", inputs.len(), out.display());
    Ok(())
}

fn parse_target(raw: &str) -> Result<RelevanceTarget> {
    if raw == "full" {
        return Ok(RelevanceTarget::FullOutput);
    }
    if raw == "mask" {
        return Ok(RelevanceTarget::MaskRegion { threshold: 0.0 });
    }
    if let Some(rest) = raw.strip_prefix("mask:") {
        let threshold: f64 = rest
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad mask threshold `{rest}`")))?;
        return Ok(RelevanceTarget::MaskRegion { threshold });
    }
    if let Some(rest) = raw.strip_prefix("pixel:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "pixel target needs `pixel:<c>,<y>,<x>`, got `{raw}`"
            )));
        }
        let coord = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad pixel coordinate `{s}`")))
        };
        return Ok(RelevanceTarget::SingleNeuron {
            c: coord(parts[0])?,
            y: coord(parts[1])?,
            x: coord(parts[2])?,
        });
    }
    Err(Error::InvalidArgument(format!(
        "unknown target `{raw}` (expected `mask:<t>`, `pixel:<c>,<y>,<x>`, or `full`)"
    )))
}

#[allow(clippy::too_many_arguments)]
pub fn explain(
    cli: &Cli,
    checkpoint: &Path,
    image: &Path,
    out: &Path,
    target: Option<&str>,
    epsilon: Option<f64>,
    exclude_bias: bool,
    all_layers: bool,
    raw: bool,
) -> Result<()> {
    let file = file_config(cli)?;
    let defaults = LrpConfig::default();
    let target_str = file.resolve(
        target.map(str::to_string),
        "target",
        "mask:0".to_string(),
    )?;
    let include_bias = if exclude_bias {
        false
    } else {
        file.resolve(None, "include_bias_in_denominator", defaults.include_bias_in_denominator)?
    };
    let cfg = LrpConfig {
        epsilon: file.resolve(epsilon, "epsilon", defaults.epsilon)?,
        include_bias_in_denominator: include_bias,
        target: parse_target(&target_str)?,
    };

    let (spec, params) = load_generator(checkpoint)?;
    let img = load_image(image)?;
    let id = image_id(image)?;
    let (maps, report) = lrp::explain(&spec, &params, &img, &cfg)?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    render_heatmap(&maps.input_map, &out.join(format!("{id}_lrp_input.png")))?;
    if all_layers {
        for (k, m) in maps.layer_maps.iter().enumerate() {
            render_heatmap(m, &out.join(format!("{id}_lrp_L{}.png", k + 1)))?;
        }
    }
    if raw {
        lrp::save_relevance_maps(&maps, &out.join(format!("{id}_lrp_maps.bin")))?;
    }
    print!("{}", report.to_text());
    Ok(())
}

pub fn eval(
    cli: &Cli,
    checkpoint: Option<&Path>,
    pred_dir: Option<&Path>,
    manifest_path: &Path,
    threshold: Option<f32>,
    out: Option<&Path>,
) -> Result<()> {
    let file = file_config(cli)?;
    let threshold = file.resolve(threshold, "threshold", 0.0)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let pairs = manifest.load_pairs()?;

    enum Source {
        Model(segxplain_core::network::NetworkSpec, segxplain_core::network::ParamStore),
        Dir(PathBuf),
    }
    let source = match (checkpoint, pred_dir) {
        (Some(ckpt), None) => {
            let (spec, params) = load_generator(ckpt)?;
            Source::Model(spec, params)
        }
        (None, Some(dir)) => Source::Dir(dir.to_path_buf()),
        _ => {
            return Err(Error::InvalidArgument(
                "pass exactly one of --checkpoint or --pred-dir".into(),
            ))
        }
    };

    let mut per_image = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let pred: Tensor<f32> = match &source {
            Source::Model(spec, params) => {
                let (raw, _) = forward(spec, params, &pair.image)?;
                binarize(&raw, threshold)
            }
            Source::Dir(dir) => {
                let mask = load_image(&dir.join(format!("{}_mask.png", pair.id)))?;
                binarize(&mask, 0.0)
            }
        };
        let counts = confusion(&pred, &pair.mask)?;
        per_image.push(metrics(pair.id.clone(), &counts));
    }

    let report = aggregate(per_image, threshold)?;
    let out_dir = out.unwrap_or(Path::new("."));
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let report_path = out_dir.join("report.txt");
    fs::write(&report_path, report.to_text()).map_err(|e| Error::io(&report_path, e))?;
    println!("{}", report.aggregate_line());
    println!("report: {}", report_path.display());
    Ok(())
}
