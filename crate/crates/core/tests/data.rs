use std::path::Path;

use gcpa_core::data::{
    augment_pair, augment_train, batches, decode_image, load_dataset, preprocess_eval, write_saliency_png, AugmentConfig, Split,
    IMAGENET_MEAN, IMAGENET_STD,
};
use gcpa_core::synthetic::{write_synthetic, SyntheticSpec};
use gcpa_core::{Error, Tensor};
use proptest::prelude::*;

fn write_rgb(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y))).save(path).unwrap();
}

fn write_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)])).save(path).unwrap();
}

fn layout(root: &Path, name: &str, images: &[&str], masks: &[&str]) {
    let base = root.join(name);
    std::fs::create_dir_all(base.join("images")).unwrap();
    std::fs::create_dir_all(base.join("masks")).unwrap();
    for s in images {
        write_rgb(&base.join("images").join(format!("{s}.png")), 8, 6, |x, y| [x as u8 * 20, y as u8 * 30, 7]);
    }
    for s in masks {
        write_gray(&base.join("masks").join(format!("{s}.png")), 8, 6, |x, _| if x < 4 { 255 } else { 0 });
    }
}

#[test]
fn matched_pairs_are_indexed_in_order() {
    let dir = tempfile::tempdir().unwrap();
    layout(dir.path(), "set", &["c", "a", "b"], &["b", "c", "a"]);
    let idx = load_dataset(dir.path(), "set", Split::Train).unwrap();
    assert_eq!(idx.len(), 3);
    let stems: Vec<_> = idx.samples.iter().map(|s| s.stem.as_str()).collect();
    assert_eq!(stems, ["a", "b", "c"]);
    assert_eq!(idx.samples[0].original_size, (6, 8));
}

#[test]
fn train_split_rejects_images_without_masks() {
    let dir = tempfile::tempdir().unwrap();
    layout(dir.path(), "set", &["a", "b", "c"], &["a", "c"]);
    match load_dataset(dir.path(), "set", Split::Train) {
        Err(Error::OrphanImages(o)) => assert_eq!(o, ["b"]),
        other => panic!("expected orphan error, got {other:?}"),
    }
    let test = load_dataset(dir.path(), "set", Split::Test).unwrap();
    assert!(test.samples[1].mask_path.is_none());
}

#[test]
fn unmatched_masks_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    layout(dir.path(), "set", &["a"], &["a", "z"]);
    let idx = load_dataset(dir.path(), "set", Split::Train).unwrap();
    assert_eq!(idx.unmatched_masks, ["z"]);
}

#[test]
fn empty_and_missing_datasets() {
    let dir = tempfile::tempdir().unwrap();
    layout(dir.path(), "empty", &[], &[]);
    assert!(matches!(load_dataset(dir.path(), "empty", Split::Train), Err(Error::EmptyDataset(_))));
    let err = load_dataset(dir.path(), "absent", Split::Test).unwrap_err();
    assert!(err.to_string().contains("dataset not found"), "{err}");
}

#[test]
fn augmentation_is_seeded_and_crops_to_size() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(dir.path(), "syn", SyntheticSpec { count: 2, size: 40, seed: 1 }).unwrap();
    let idx = load_dataset(dir.path(), "syn", Split::Train).unwrap();
    let cfg = AugmentConfig::default();
    let (img, mask) = augment_train(&idx.samples[0], 5, &cfg).unwrap();
    assert_eq!(img.shape(), [3, 288, 288]);
    assert_eq!(mask.shape(), [1, 288, 288]);
    let again = augment_train(&idx.samples[0], 5, &cfg).unwrap();
    assert_eq!((img, mask), again);
}

#[test]
fn white_mask_crops_to_ones() {
    let image = Tensor::full([3, 50, 70], 0.5);
    let mask = Tensor::full([1, 50, 70], 1.0);
    let cfg = AugmentConfig::default();
    for seed in 0..4 {
        let (_, m) = augment_pair(&image, &mask, seed, &cfg).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn image_and_mask_share_geometry() {
    // A coordinate grid through the image path and the mask path must land on
    // identical pixels when no interpolation is involved.
    let cfg = AugmentConfig {
        resize: 24,
        crop: 16,
        ..AugmentConfig::default()
    };
    let grid = Tensor::from_fn([1, 24, 24], |i| i as f64);
    let mut flipped = 0;
    for seed in 0..32 {
        let (a, b) = augment_pair(&grid, &grid, seed, &cfg).unwrap();
        assert_eq!(a, b);
        flipped += usize::from(a.data()[1] < a.data()[0]);
    }
    assert!(flipped > 0 && flipped < 32, "both flip outcomes occur");
}

#[test]
fn eval_preprocessing_records_the_original_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.png");
    write_rgb(&path, 641, 481, |x, y| [(x % 256) as u8, (y % 256) as u8, 90]);
    let e = preprocess_eval(&path, 320).unwrap();
    assert_eq!(e.image.shape(), [3, 320, 320]);
    assert_eq!(e.original_size, (481, 641));
}

#[test]
fn same_size_eval_preprocessing_only_normalizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sq.png");
    write_rgb(&path, 32, 32, |x, y| [(x * 7) as u8, (y * 5) as u8, ((x + y) * 3) as u8]);
    let raw = decode_image(&path).unwrap();
    let e = preprocess_eval(&path, 32).unwrap();
    for (i, (&v, &r)) in e.image.data().iter().zip(raw.data()).enumerate() {
        let c = i / (32 * 32);
        assert!((v - (r - IMAGENET_MEAN[c]) / IMAGENET_STD[c]).abs() < 1e-12);
    }
}

#[test]
fn grayscale_is_replicated_to_three_channels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.png");
    write_gray(&path, 5, 4, |x, y| (x * 40 + y) as u8);
    let t = decode_image(&path).unwrap();
    assert_eq!(t.shape(), [3, 4, 5]);
    let plane = 20;
    assert_eq!(&t.data()[..plane], &t.data()[plane..2 * plane]);
    assert_eq!(&t.data()[..plane], &t.data()[2 * plane..]);
}

#[test]
fn batch_sizes_and_reproducible_order() {
    let b = batches(10, 4, 7, 0).unwrap();
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
    assert_eq!(b, batches(10, 4, 7, 0).unwrap());
    assert!(batches(3, 0, 0, 0).is_err());
}

#[test]
fn epochs_use_different_pinned_permutations() {
    let e0: Vec<usize> = batches(10, 10, 42, 0).unwrap().concat();
    let e1: Vec<usize> = batches(10, 10, 42, 1).unwrap().concat();
    assert_eq!(e0, [0, 4, 5, 7, 3, 1, 6, 2, 9, 8]);
    assert_eq!(e1, [9, 2, 4, 0, 6, 7, 1, 8, 3, 5]);
    assert_ne!(e0, e1);
}

#[test]
fn saliency_png_levels_are_rounded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.png");
    write_saliency_png(&path, &[0.0, 0.5, 1.0, 0.2], 2, 2).unwrap();
    let img = image::open(&path).unwrap().to_luma8();
    assert_eq!(img.as_raw(), &[0, 128, 255, 51]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masks_stay_binary(seed in 0u64..10_000, h in 5usize..40, w in 5usize..40) {
        let mask = Tensor::from_fn([1, h, w], |i| f64::from(u8::from((i * 7 + seed as usize) % 5 < 2)));
        let image = Tensor::zeros([3, h, w]);
        let cfg = AugmentConfig { resize: 20, crop: 12, ..AugmentConfig::default() };
        let (_, m) = augment_pair(&image, &mask, seed, &cfg).unwrap();
        prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn each_epoch_covers_every_sample_once(len in 1usize..60, bs in 1usize..16, seed: u64, epoch in 0u64..5) {
        let mut all: Vec<usize> = batches(len, bs, seed, epoch).unwrap().concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
    }
}
