//! Dataset handling: seeded synthetic image/mask generation, PNG I/O in the
//! [-1, 1] value convention, manifests, and mask binarization.
//!
//! Two synthetic flavors mirror the contrast structure of the real tasks:
//! `polyp` scenes hide low-contrast soft-edged blobs inside textured
//! backgrounds, while `instrument` scenes contain a single high-contrast
//! sharp-edged rod, which is markedly easier to segment.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, ImageReader, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// One image with its ground-truth mask. The image is `1x3xhxw` in `[-1, 1]`;
/// the mask is `1x1xhxw` holding exactly the values -1 (background) and
/// +1 (foreground).
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Polyp,
    Instrument,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "polyp" => Ok(DatasetKind::Polyp),
            "instrument" => Ok(DatasetKind::Instrument),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset kind `{other}` (expected `polyp` or `instrument`)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// An ordered list of image/mask records. Paths are stored relative to the
/// manifest's own directory.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Reads a tab-separated manifest (`id<TAB>image<TAB>mask` per line),
    /// checking that every referenced file exists and ids are unique. The
    /// split tag is taken from the file stem (`test*` means test).
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let split = match path.file_stem().and_then(|s| s.to_str()) {
            Some(stem) if stem.starts_with("test") => Split::Test,
            _ => Split::Train,
        };
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "{}:{}: expected `id<TAB>image<TAB>mask`, got `{line}`",
                    path.display(),
                    lineno + 1
                )));
            }
            if !seen.insert(cols[0].to_string()) {
                return Err(Error::InvalidArgument(format!(
                    "{}: duplicate id `{}`",
                    path.display(),
                    cols[0]
                )));
            }
            let entry = ManifestEntry {
                id: cols[0].to_string(),
                image_path: PathBuf::from(cols[1]),
                mask_path: PathBuf::from(cols[2]),
            };
            for p in [&entry.image_path, &entry.mask_path] {
                let abs = root.join(p);
                if !abs.is_file() {
                    return Err(Error::InvalidArgument(format!(
                        "{}: referenced file missing: {}",
                        path.display(),
                        abs.display()
                    )));
                }
            }
            entries.push(entry);
        }
        Ok(DatasetManifest { root, split, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            writeln!(
                w,
                "{}\t{}\t{}",
                e.id,
                e.image_path.display(),
                e.mask_path.display()
            )
            .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Loads every referenced pair. Masks are binarized at 0 so user-supplied
    /// grayscale masks with soft edges still satisfy the two-valued contract.
    pub fn load_pairs(&self) -> Result<Vec<SamplePair>> {
        self.entries
            .iter()
            .map(|e| {
                let image = load_image(&self.root.join(&e.image_path))?;
                let mask = load_image(&self.root.join(&e.mask_path))?;
                if mask.shape().c != 1 {
                    return Err(Error::Image {
                        path: self.root.join(&e.mask_path),
                        message: format!("mask must be grayscale, got {} channels", mask.shape().c),
                    });
                }
                if mask.shape().spatial() != image.shape().spatial() {
                    return Err(Error::shape_mismatch(
                        format!("mask vs image for `{}`", e.id),
                        image.shape(),
                        mask.shape(),
                    ));
                }
                Ok(SamplePair {
                    id: e.id.clone(),
                    image,
                    mask: binarize(&mask, 0.0),
                })
            })
            .collect()
    }
}

/// Loads an 8-bit RGB or grayscale PNG, mapping byte `p` to `2p/255 - 1`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(img_err("not a PNG file".into()));
    }
    let decoded = reader
        .decode()
        .map_err(|e| img_err(format!("decode failed: {e}")))?;
    let to_val = |p: u8| (2.0 * p as f32) / 255.0 - 1.0;
    match decoded {
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
            for (x, y, px) in buf.enumerate_pixels() {
                for c in 0..3 {
                    t.set(0, c, y as usize, x as usize, to_val(px.0[c]));
                }
            }
            Ok(t)
        }
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut t = Tensor::zeros(Shape::new(1, 1, h, w));
            for (x, y, px) in buf.enumerate_pixels() {
                t.set(0, 0, y as usize, x as usize, to_val(px.0[0]));
            }
            Ok(t)
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageRgba16(_) | DynamicImage::ImageLumaA16(_) => {
            Err(img_err("unsupported bit depth (expected 8-bit)".into()))
        }
        other => Err(img_err(format!(
            "unsupported color type {:?} (expected 8-bit RGB or grayscale)",
            other.color()
        ))),
    }
}

/// Writes a `1x3xhxw` tensor as an RGB PNG or a `1x1xhxw` tensor as a
/// grayscale PNG, mapping value `v` to `round((v+1) * 255/2)` with
/// round-half-away-from-zero, clamped to `[0, 255]`.
pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || (s.c != 1 && s.c != 3) {
        return Err(Error::InvalidArgument(format!(
            "save_image expects shape 1x1xhxw or 1x3xhxw, got {s}"
        )));
    }
    let to_byte = |v: f32| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
    let img_err = |e: image::ImageError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if s.c == 3 {
        let mut buf = RgbImage::new(s.w as u32, s.h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                px.0[c] = to_byte(t.get(0, c, y as usize, x as usize));
            }
        }
        buf.save_with_format(path, ImageFormat::Png).map_err(img_err)
    } else {
        let mut buf = GrayImage::new(s.w as u32, s.h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            px.0[0] = to_byte(t.get(0, 0, y as usize, x as usize));
        }
        buf.save_with_format(path, ImageFormat::Png).map_err(img_err)
    }
}

/// Thresholds a tensor into a two-valued mask: `v > threshold` maps to +1,
/// everything else to -1.
pub fn binarize(mask: &Tensor<f32>, threshold: f32) -> Tensor<f32> {
    mask.map(|v| if v > threshold { 1.0 } else { -1.0 })
}

/// Seeded randomness source for scene generation.
pub struct SceneRng {
    rng: ChaCha8Rng,
    noise: Normal<f32>,
}

impl SceneRng {
    fn unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    fn sign(&mut self) -> f64 {
        if self.rng.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    fn noise(&mut self) -> f32 {
        self.noise.sample(&mut self.rng)
    }
}

/// Textured background: a coarse random grid, bilinearly upsampled, plus
/// per-pixel Gaussian noise.
fn paint_background(image: &mut Tensor<f32>, size: usize, r: &mut SceneRng) {
    const GRID: usize = 5;
    let base = r.range(-0.25, 0.15);
    for c in 0..3 {
        let channel_base = base + r.range(-0.08, 0.08);
        let grid: Vec<f64> = (0..GRID * GRID)
            .map(|_| channel_base + r.range(-0.22, 0.22))
            .collect();
        let step = (GRID - 1) as f64 / (size - 1).max(1) as f64;
        for y in 0..size {
            let gy = y as f64 * step;
            let (y0, fy) = (gy.floor() as usize, gy.fract());
            let y1 = (y0 + 1).min(GRID - 1);
            for x in 0..size {
                let gx = x as f64 * step;
                let (x0, fx) = (gx.floor() as usize, gx.fract());
                let x1 = (x0 + 1).min(GRID - 1);
                let v = grid[y0 * GRID + x0] * (1.0 - fy) * (1.0 - fx)
                    + grid[y0 * GRID + x1] * (1.0 - fy) * fx
                    + grid[y1 * GRID + x0] * fy * (1.0 - fx)
                    + grid[y1 * GRID + x1] * fy * fx;
                image.set(0, c, y, x, v as f32);
            }
        }
    }
    for v in image.data_mut() {
        *v += r.noise();
    }
}

/// Adds one soft-edged elliptical blob with a small intensity offset; marks
/// pixels with normalized elliptical distance <= 1 as foreground.
fn paint_blob(image: &mut Tensor<f32>, mask: &mut Tensor<f32>, size: usize, r: &mut SceneRng) {
    let s = size as f64;
    let cx = r.range(0.2, 0.8) * s;
    let cy = r.range(0.2, 0.8) * s;
    let rx = r.range(s / 8.0, s / 4.0);
    let ry = r.range(s / 8.0, s / 4.0);
    let phi = r.range(0.0, PI);
    let edge = r.range(0.15, 0.35);
    let delta = r.sign() * r.range(0.10, 0.20);
    let channel_scale: Vec<f64> = (0..3).map(|_| r.range(0.85, 1.15)).collect();
    let (sin, cos) = phi.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let d = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
            let a = ((1.0 + edge - d) / (2.0 * edge)).clamp(0.0, 1.0);
            let a = a * a * (3.0 - 2.0 * a);
            if a > 0.0 {
                for c in 0..3 {
                    let old = image.get(0, c, y, x);
                    image.set(0, c, y, x, old + (delta * channel_scale[c] * a) as f32);
                }
            }
            if d <= 1.0 {
                mask.set(0, 0, y, x, 1.0);
            }
        }
    }
}

/// Adds one sharp-edged tapered rod with a large intensity offset; the mask
/// is the exact rectangle-with-taper inequality.
fn paint_rod(image: &mut Tensor<f32>, mask: &mut Tensor<f32>, size: usize, r: &mut SceneRng) {
    let s = size as f64;
    let cx = r.range(0.3, 0.7) * s;
    let cy = r.range(0.3, 0.7) * s;
    let angle = r.range(0.0, PI);
    let half_len = r.range(0.3, 0.5) * s;
    let half_width = r.range(0.06, 0.11) * s;
    let taper = r.range(0.5, 1.0);
    let delta = r.sign() * r.range(0.65, 0.95);
    let channel_scale: Vec<f64> = (0..3).map(|_| r.range(0.92, 1.08)).collect();
    let (sin, cos) = angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if u.abs() <= half_len {
                let t = (u / half_len + 1.0) / 2.0;
                let hw = half_width * (1.0 + (taper - 1.0) * t);
                if v.abs() <= hw {
                    for c in 0..3 {
                        let old = image.get(0, c, y, x);
                        image.set(0, c, y, x, old + (delta * channel_scale[c]) as f32);
                    }
                    mask.set(0, 0, y, x, 1.0);
                }
            }
        }
    }
}

/// Generates one synthetic scene. About 15% of scenes contain no foreground
/// object at all, so models must also learn to emit empty masks.
pub fn synth_sample(kind: DatasetKind, size: usize, r: &mut SceneRng) -> (Tensor<f32>, Tensor<f32>) {
    let mut image = Tensor::zeros(Shape::new(1, 3, size, size));
    let mut mask = Tensor::filled(Shape::new(1, 1, size, size), -1.0);
    paint_background(&mut image, size, r);
    let empty = r.unit() < 0.15;
    if !empty {
        match kind {
            DatasetKind::Polyp => {
                let blobs = if r.unit() < 0.4 { 2 } else { 1 };
                for _ in 0..blobs {
                    paint_blob(&mut image, &mut mask, size, r);
                }
            }
            DatasetKind::Instrument => paint_rod(&mut image, &mut mask, size, r),
        }
    }
    for v in image.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    (image, mask)
}

/// Creates a seeded RNG for scene generation.
pub fn scene_rng(seed: u64) -> SceneRng {
    SceneRng {
        rng: ChaCha8Rng::seed_from_u64(seed),
        noise: Normal::new(0.0, 0.08).expect("valid std"),
    }
}

/// Generates `count` synthetic pairs under `out_dir`, writing each image as
/// `<id>.png`, each mask as `<id>_mask.png`, and two manifests `train.tsv`
/// and `test.tsv` holding an 80/20 split by index. Byte-identical output for
/// a given `(kind, count, size, seed)`.
pub fn gen_synthetic(
    kind: DatasetKind,
    count: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if count < 1 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    if size < 2 {
        return Err(Error::InvalidArgument("size must be >= 2".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let prefix = match kind {
        DatasetKind::Polyp => "polyp",
        DatasetKind::Instrument => "inst",
    };
    let mut r = scene_rng(seed);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{prefix}_{i:04}");
        let (image, mask) = synth_sample(kind, size, &mut r);
        let image_path = PathBuf::from(format!("{id}.png"));
        let mask_path = PathBuf::from(format!("{id}_mask.png"));
        save_image(&image, &out_dir.join(&image_path))?;
        save_image(&mask, &out_dir.join(&mask_path))?;
        entries.push(ManifestEntry { id, image_path, mask_path });
    }
    let n_train = count - count / 5;
    let train = DatasetManifest {
        root: out_dir.to_path_buf(),
        split: Split::Train,
        entries: entries[..n_train].to_vec(),
    };
    let test = DatasetManifest {
        root: out_dir.to_path_buf(),
        split: Split::Test,
        entries: entries[n_train..].to_vec(),
    };
    train.save(&out_dir.join("train.tsv"))?;
    test.save(&out_dir.join("test.tsv"))?;
    Ok((train, test))
}
