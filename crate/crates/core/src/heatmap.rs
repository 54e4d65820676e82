//! Relevance heatmap rendering: signed maps become blue-white-red PNGs.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Renders a single-sample map as an 8-bit RGB PNG.
///
/// Multi-channel maps are summed over channels first. Values are scaled by
/// `1/max|v|` into `[-1, 1]` (an all-zero map stays neutral) and colored on a
/// diverging ramp: -1 is pure blue, 0 white, +1 pure red. Scaling a map by a
/// positive constant therefore does not change the rendering.
pub fn render_heatmap<T: Element>(map: &Tensor<T>, path: &Path) -> Result<()> {
    let s = map.shape();
    if s.n != 1 {
        return Err(Error::InvalidArgument(format!(
            "heatmap rendering expects a single sample, got batch of {}",
            s.n
        )));
    }
    if !map.all_finite() {
        return Err(Error::NonFinite("heatmap input".into()));
    }

    let plane = s.h * s.w;
    let mut summed = vec![0.0f64; plane];
    for c in 0..s.c {
        for (acc, &v) in summed.iter_mut().zip(&map.data()[c * plane..(c + 1) * plane]) {
            *acc += v.to_real();
        }
    }
    let max_abs = summed.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut img = RgbImage::new(s.w as u32, s.h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = summed[y as usize * s.w + x as usize];
        let t = if max_abs > 0.0 { v / max_abs } else { 0.0 };
        let fade = (255.0 * (1.0 - t.abs())).round() as u8;
        px.0 = if t >= 0.0 {
            [255, fade, fade] // white -> red
        } else {
            [fade, fade, 255] // white -> blue
        };
    }
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("segxplain-heatmap-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn pixels(path: &Path) -> Vec<[u8; 3]> {
        match image::open(path).unwrap() {
            image::DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| p.0).collect(),
            other => panic!("expected RGB, got {:?}", other.color()),
        }
    }

    #[test]
    fn zero_map_renders_neutral_white() {
        let map = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let path = tmp("zero.png");
        render_heatmap(&map, &path).unwrap();
        assert!(pixels(&path).iter().all(|p| *p == [255, 255, 255]));
    }

    #[test]
    fn extremes_hit_pure_red_and_blue() {
        let map = Tensor::new(Shape::new(1, 1, 1, 3), vec![2.0f64, 0.0, -2.0]).unwrap();
        let path = tmp("extremes.png");
        render_heatmap(&map, &path).unwrap();
        let px = pixels(&path);
        assert_eq!(px[0], [255, 0, 0]);
        assert_eq!(px[1], [255, 255, 255]);
        assert_eq!(px[2], [0, 0, 255]);
    }

    #[test]
    fn rendering_is_scale_invariant() {
        let map = Tensor::new(
            Shape::new(1, 1, 2, 2),
            vec![0.25f64, -0.5, 0.125, -0.03125],
        )
        .unwrap();
        let double = map.scale(2.0);
        let (p1, p2) = (tmp("scale1.png"), tmp("scale2.png"));
        render_heatmap(&map, &p1).unwrap();
        render_heatmap(&double, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn channels_are_summed() {
        let mut map = Tensor::<f64>::zeros(Shape::new(1, 2, 1, 2));
        map.set(0, 0, 0, 0, 1.0);
        map.set(0, 1, 0, 0, -1.0); // cancels to zero
        map.set(0, 0, 0, 1, 1.0);
        let path = tmp("summed.png");
        render_heatmap(&map, &path).unwrap();
        let px = pixels(&path);
        assert_eq!(px[0], [255, 255, 255]);
        assert_eq!(px[1], [255, 0, 0]);
    }

    #[test]
    fn batch_maps_are_rejected() {
        let map = Tensor::<f64>::zeros(Shape::new(2, 1, 2, 2));
        assert!(render_heatmap(&map, &tmp("batch.png")).is_err());
    }
}
