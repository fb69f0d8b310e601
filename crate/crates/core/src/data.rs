//! Image/mask datasets: directory indexing, paired training augmentation,
//! evaluation preprocessing and deterministic batching.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::par;
use crate::tensor::Tensor;

/// Per-channel mean of the ImageNet training set (RGB, [0, 1] scale).
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
/// Per-channel standard deviation of the ImageNet training set.
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub stem: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    /// `(height, width)` in pixels.
    pub original_size: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub name: String,
    pub samples: Vec<Sample>,
    pub split: Split,
    /// Mask stems with no image; reported, not fatal.
    pub unmatched_masks: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn has_extension(path: &Path, allowed: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| allowed.iter().any(|a| a.eq_ignore_ascii_case(e)))
}

/// Files under `dir` with one of `extensions`, keyed by stem.
fn files_by_stem(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !has_extension(&path, extensions) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Config(format!(
                "duplicate stem `{stem}`: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

fn dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })?;
    Ok((h as usize, w as usize))
}

/// Indexes `<root>/<name>/images` and `<root>/<name>/masks`, ordered by stem.
///
/// In the train split every image needs a mask. In the test split masks are
/// optional and paired when present.
pub fn load_dataset(root: &Path, name: &str, split: Split) -> Result<DatasetIndex> {
    let base = root.join(name);
    let image_dir = base.join("images");
    if !image_dir.is_dir() {
        return Err(Error::DatasetNotFound(image_dir));
    }
    let images = files_by_stem(&image_dir, &IMAGE_EXTENSIONS)?;
    if images.is_empty() {
        return Err(Error::EmptyDataset(image_dir));
    }
    let mask_dir = base.join("masks");
    let masks = if mask_dir.is_dir() {
        files_by_stem(&mask_dir, &["png"])?
    } else if split == Split::Train {
        return Err(Error::DatasetNotFound(mask_dir));
    } else {
        BTreeMap::new()
    };

    if split == Split::Train {
        let orphans: Vec<String> = images.keys().filter(|s| !masks.contains_key(*s)).cloned().collect();
        if !orphans.is_empty() {
            return Err(Error::OrphanImages(orphans));
        }
    }
    let unmatched_masks: Vec<String> = masks.keys().filter(|s| !images.contains_key(*s)).cloned().collect();
    if !unmatched_masks.is_empty() {
        log::warn!("{}: masks without images: {:?}", base.display(), unmatched_masks);
    }

    let mut samples = Vec::with_capacity(images.len());
    for (stem, image_path) in images {
        let original_size = dimensions(&image_path)?;
        let mask_path = masks.get(&stem).cloned();
        if let Some(m) = &mask_path {
            let mask_size = dimensions(m)?;
            if mask_size != original_size {
                return Err(Error::shape(
                    format!("mask `{stem}`"),
                    format!("{}x{}", original_size.0, original_size.1),
                    &[mask_size.0, mask_size.1],
                ));
            }
        }
        samples.push(Sample {
            stem,
            image_path,
            mask_path,
            original_size,
        });
    }
    Ok(DatasetIndex {
        name: name.to_owned(),
        samples,
        split,
        unmatched_masks,
    })
}

/// Decodes an image as `[3, H, W]` RGB in `[0, 1]`. Grayscale and alpha
/// inputs are coerced to three channels.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::from_vec([3, h, w], data)
}

/// Decodes an 8-bit mask as `[1, H, W]`, thresholding at 128.
pub fn decode_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.as_raw().iter().any(|&v| v != 0 && v != 255) {
        log::debug!("{}: mask is not strictly 0/255, thresholding at 128", path.display());
    }
    let data = img.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec([1, h, w], data)
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

fn resize_chw_bilinear(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = chw(t);
    if (h, w) == (oh, ow) {
        return t.clone();
    }
    let x = t.clone().reshape([1, c, h, w]).expect("same element count");
    kernels::resize_bilinear(&x, oh, ow).reshape([c, oh, ow]).expect("same element count")
}

fn resize_chw_nearest(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = chw(t);
    let mut data = Vec::with_capacity(c * oh * ow);
    for plane in t.data().chunks(h * w) {
        data.extend(kernels::resize_plane_nearest(plane, h, w, oh, ow));
    }
    Tensor::from_vec([c, oh, ow], data).expect("non-empty")
}

fn flip_horizontal(t: &mut Tensor) {
    let (_, _, w) = chw(t);
    for row in t.data_mut().chunks_mut(w) {
        row.reverse();
    }
}

fn crop(t: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let (c, h, w) = chw(t);
    let mut data = Vec::with_capacity(c * size * size);
    for plane in t.data().chunks(h * w) {
        for y in top..top + size {
            data.extend_from_slice(&plane[y * w + left..y * w + left + size]);
        }
    }
    Tensor::from_vec([c, size, size], data).expect("non-empty")
}

/// Applies ImageNet channel normalization in place to a `[3, H, W]` tensor.
pub fn normalize_channels(t: &mut Tensor) {
    let (_, h, w) = chw(t);
    for (c, plane) in t.data_mut().chunks_mut(h * w).enumerate() {
        let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        for v in plane {
            *v = (*v - m) / s;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Square side images are resized to before cropping.
    pub resize: usize,
    /// Square side of the random crop.
    pub crop: usize,
    pub flip_probability: f64,
    /// When false, images are resized straight to `crop` with no flip.
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            resize: 320,
            crop: 288,
            flip_probability: 0.5,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!(
                "crop ({}) must be in 1..={} (resize)",
                self.crop, self.resize
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Resize, flip and crop an image/mask pair with one shared geometry, then
/// normalize the image. Works on any `[C, H, W]` image so that geometry can
/// be checked by augmenting coordinate grids.
pub fn augment_pair(image: &Tensor, mask: &Tensor, seed: u64, cfg: &AugmentConfig) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = chw(image);
    let (_, mh, mw) = chw(mask);
    if (h, w) != (mh, mw) {
        return Err(Error::shape("mask", format!("[_, {h}, {w}]"), mask.shape()));
    }
    if !cfg.enabled {
        let img = resize_chw_bilinear(image, cfg.crop, cfg.crop);
        let m = resize_chw_nearest(mask, cfg.crop, cfg.crop);
        return Ok((img, m));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.random_bool(cfg.flip_probability);
    let slack = cfg.resize - cfg.crop;
    let top = rng.random_range(0..=slack);
    let left = rng.random_range(0..=slack);

    let mut img = resize_chw_bilinear(image, cfg.resize, cfg.resize);
    let mut m = resize_chw_nearest(mask, cfg.resize, cfg.resize);
    if flip {
        flip_horizontal(&mut img);
        flip_horizontal(&mut m);
    }
    Ok((crop(&img, top, left, cfg.crop), crop(&m, top, left, cfg.crop)))
}

/// Decodes and augments one training sample: `[3, crop, crop]` normalized
/// image and `[1, crop, crop]` binary mask.
pub fn augment_train(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Result<(Tensor, Tensor)> {
    let mask_path = sample
        .mask_path
        .as_ref()
        .ok_or_else(|| Error::Config(format!("sample `{}` has no mask", sample.stem)))?;
    let image = decode_image(&sample.image_path)?;
    let mask = decode_mask(mask_path)?;
    let (mut img, m) = augment_pair(&image, &mask, seed, cfg)?;
    normalize_channels(&mut img);
    Ok((img, m))
}

#[derive(Clone, Debug)]
pub struct EvalInput {
    /// `[3, size, size]` normalized image.
    pub image: Tensor,
    /// `(height, width)` of the decoded file.
    pub original_size: (usize, usize),
}

/// Resizes an image file to `size × size` and normalizes it.
pub fn preprocess_eval(path: &Path, size: usize) -> Result<EvalInput> {
    let image = decode_image(path)?;
    let (_, h, w) = chw(&image);
    let mut resized = resize_chw_bilinear(&image, size, size);
    normalize_channels(&mut resized);
    Ok(EvalInput {
        image: resized,
        original_size: (h, w),
    })
}

/// Mixes seed components into one well-spread 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15_u64, |acc, &p| {
        let mut z = (acc ^ p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

/// Sample indices of one epoch, shuffled by `(seed, epoch)` and split into
/// batches; the last batch may be short.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch]));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Augments and stacks the samples `ids` of `index`. Each sample's
/// augmentation seed depends on `(seed, epoch, id)` only.
pub fn load_train_batch(
    index: &DatasetIndex,
    ids: &[usize],
    seed: u64,
    epoch: u64,
    cfg: &AugmentConfig,
) -> Result<(Tensor, Tensor)> {
    let pairs = par::map_collect(ids.len(), |i| {
        let id = ids[i];
        augment_train(&index.samples[id], derive_seed(&[seed, epoch, id as u64]), cfg)
    });
    let (mut images, mut masks) = (Vec::with_capacity(ids.len()), Vec::with_capacity(ids.len()));
    for pair in pairs {
        let (img, m) = pair?;
        images.push(img);
        masks.push(m);
    }
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Bilinearly resizes an `h × w` probability plane to `oh × ow`.
pub fn resize_map(probs: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Result<Vec<f64>> {
    let t = Tensor::from_vec([1, 1, h, w], probs.to_vec())?;
    if (h, w) == (oh, ow) {
        return Ok(t.into_data());
    }
    Ok(kernels::resize_bilinear(&t, oh, ow).into_data())
}

/// 8-bit level of a probability: `round(255 · p)` with `p` clamped to [0, 1].
pub fn quantize(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, 1.0)).round() as u8
}

/// Writes an `h × w` probability map as an 8-bit grayscale PNG.
pub fn write_saliency_png(path: &Path, probs: &[f64], h: usize, w: usize) -> Result<()> {
    if probs.len() != h * w {
        return Err(Error::shape("saliency map", format!("{h}x{w}"), &[probs.len()]));
    }
    let bytes: Vec<u8> = probs.iter().map(|&p| quantize(p)).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("length checked");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}
