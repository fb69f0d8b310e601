//! Procedural image/mask pairs for desk-scale experiments: one or two
//! ellipses of a saturated colour over a smooth textured background.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::derive_seed;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Square side in pixels.
    pub size: usize,
    pub seed: u64,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

/// Renders one pair as raw RGB bytes and 0/255 mask bytes.
pub fn render_pair(size: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let n_objects = if rng.random_bool(0.25) { 2 } else { 1 };
    let objects: Vec<Ellipse> = (0..n_objects)
        .map(|_| Ellipse {
            cy: rng.random_range(0.3..0.7) * s,
            cx: rng.random_range(0.3..0.7) * s,
            ry: rng.random_range(0.12..0.28) * s,
            rx: rng.random_range(0.12..0.28) * s,
        })
        .collect();
    let fg: [f64; 3] = [rng.random_range(0.75..1.0), rng.random_range(0.1..0.35), rng.random_range(0.05..0.3)];
    let bg_a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.5));
    let bg_b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.6));
    let freq = rng.random_range(1.0..3.0) * std::f64::consts::PI / s;

    let mut rgb = Vec::with_capacity(3 * size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = objects.iter().any(|e| e.contains(py, px));
            let t = 0.5 + 0.5 * (freq * (py + 0.6 * px)).sin();
            for c in 0..3 {
                let base = if inside { fg[c] } else { bg_a[c] * (1.0 - t) + bg_b[c] * t };
                let noise = rng.random_range(-0.04..0.04);
                rgb.push(((base + noise).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            mask.push(if inside { 255 } else { 0 });
        }
    }
    (rgb, mask)
}

/// Writes `<root>/<name>/images/NNNN.png` and `<root>/<name>/masks/NNNN.png`.
pub fn write_synthetic(root: &Path, name: &str, spec: SyntheticSpec) -> Result<()> {
    let base = root.join(name);
    let (images, masks) = (base.join("images"), base.join("masks"));
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let side = spec.size as u32;
    for i in 0..spec.count {
        let (rgb, mask) = render_pair(spec.size, derive_seed(&[spec.seed, i as u64]));
        let stem = format!("{i:04}.png");
        let img = image::RgbImage::from_raw(side, side, rgb).expect("sized buffer");
        let m = image::GrayImage::from_raw(side, side, mask).expect("sized buffer");
        for (path, res) in [
            (images.join(&stem), img.save(images.join(&stem))),
            (masks.join(&stem), m.save(masks.join(&stem))),
        ] {
            res.map_err(|source| Error::Image { path, source })?;
        }
    }
    Ok(())
}
