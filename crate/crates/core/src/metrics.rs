//! Saliency evaluation: precision/recall over 255 thresholds, max F-measure,
//! mean absolute error and the structure measure.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{quantize, resize_map};
use crate::error::{Error, Result};
use crate::par;

/// Weight of precision over recall in the F-measure.
pub const BETA2: f64 = 0.3;
/// Balance between object- and region-aware structure terms.
pub const S_ALPHA: f64 = 0.5;
const S_EPS: f64 = 1e-12;
const LEVELS: usize = 255;

/// Continuous prediction in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height * width == 0 || values.len() != height * width {
            return Err(Error::shape("saliency map", format!("{height}x{width}"), &[values.len()]));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("saliency values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, values })
    }

    /// Reads an 8-bit grayscale map as `level / 255`.
    pub fn from_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_owned(),
                source,
            })?
            .to_luma8();
        let values = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self::new(img.height() as usize, img.width() as usize, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Bilinear resize; identity when the size already matches.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        let v = resize_map(&self.values, self.height, self.width, height, width)?;
        Self::new(height, width, v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect())
    }
}

/// Binary ground truth, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if height * width == 0 || values.len() != height * width {
            return Err(Error::shape("mask", format!("{height}x{width}"), &[values.len()]));
        }
        Ok(Self { height, width, values })
    }

    /// Accepts only exact 0/1 values.
    pub fn from_f64(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinary("mask".into()));
        }
        Self::new(height, width, values.iter().map(|&v| v == 1.0).collect())
    }

    /// Reads an 8-bit mask, thresholding at 128. Non-binary files are warned about.
    pub fn from_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_owned(),
                source,
            })?
            .to_luma8();
        if img.as_raw().iter().any(|&v| v != 0 && v != 255) {
            log::warn!("{}: ground truth is not binary, thresholding at 128", path.display());
        }
        let values = img.as_raw().iter().map(|&v| v >= 128).collect();
        Self::new(img.height() as usize, img.width() as usize, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

fn check_pair(pred: &SaliencyMap, gt: &BinaryMask) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "prediction",
            format!("{}x{}", gt.height, gt.width),
            &[pred.height, pred.width],
        ));
    }
    Ok(())
}

/// Confusion counts of one image at thresholds 1..=255 (index τ − 1).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub positives: u64,
    pub pixels: u64,
}

impl ThresholdCounts {
    /// Binarizes the 8-bit quantized prediction at `level ≥ τ`.
    pub fn compute(pred: &SaliencyMap, gt: &BinaryMask) -> Result<Self> {
        check_pair(pred, gt)?;
        let mut fg_hist = [0u64; 256];
        let mut bg_hist = [0u64; 256];
        for (&p, &g) in pred.values.iter().zip(&gt.values) {
            let q = quantize(p) as usize;
            if g {
                fg_hist[q] += 1;
            } else {
                bg_hist[q] += 1;
            }
        }
        let (mut tp, mut fp) = (vec![0; LEVELS], vec![0; LEVELS]);
        let (mut acc_tp, mut acc_fp) = (0, 0);
        for level in (1..=LEVELS).rev() {
            acc_tp += fg_hist[level];
            acc_fp += bg_hist[level];
            tp[level - 1] = acc_tp;
            fp[level - 1] = acc_fp;
        }
        Ok(Self {
            tp,
            fp,
            positives: gt.positives() as u64,
            pixels: gt.values.len() as u64,
        })
    }

    /// Precision, taken as 1 when nothing is predicted positive.
    pub fn precision(&self) -> Vec<f64> {
        self.tp
            .iter()
            .zip(&self.fp)
            .map(|(&tp, &fp)| if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 })
            .collect()
    }

    /// Recall, taken as 1 when the ground truth has no positives.
    pub fn recall(&self) -> Vec<f64> {
        self.tp
            .iter()
            .map(|&tp| if self.positives == 0 { 1.0 } else { tp as f64 / self.positives as f64 })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<u32>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

fn mean_curves(counts: &[ThresholdCounts]) -> Result<PrCurve> {
    if counts.is_empty() {
        return Err(Error::Empty("no prediction/ground-truth pairs".into()));
    }
    let n = counts.len() as f64;
    let (mut precision, mut recall) = (vec![0.0; LEVELS], vec![0.0; LEVELS]);
    for c in counts {
        for (acc, v) in precision.iter_mut().zip(c.precision()) {
            *acc += v;
        }
        for (acc, v) in recall.iter_mut().zip(c.recall()) {
            *acc += v;
        }
    }
    precision.iter_mut().chain(recall.iter_mut()).for_each(|v| *v /= n);
    Ok(PrCurve {
        thresholds: (1..=LEVELS as u32).collect(),
        precision,
        recall,
    })
}

/// Dataset PR curve: per-image precision and recall averaged per threshold.
pub fn pr_points(preds: &[SaliencyMap], gts: &[BinaryMask]) -> Result<PrCurve> {
    if preds.len() != gts.len() {
        return Err(Error::shape("predictions", format!("{} maps", gts.len()), &[preds.len()]));
    }
    let counts = par::map_collect(preds.len(), |i| ThresholdCounts::compute(&preds[i], &gts[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    mean_curves(&counts)
}

/// `(1 + β²)·P·R / (β²·P + R)`, zero when the denominator vanishes.
pub fn f_measure(precision: f64, recall: f64, beta2: f64) -> f64 {
    let denom = beta2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / denom
    }
}

pub fn f_curve(curve: &PrCurve, beta2: f64) -> Vec<f64> {
    curve
        .precision
        .iter()
        .zip(&curve.recall)
        .map(|(&p, &r)| f_measure(p, r, beta2))
        .collect()
}

/// Mean absolute difference between the continuous map and the mask.
pub fn mae(pred: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    check_pair(pred, gt)?;
    let total: f64 = pred
        .values
        .iter()
        .zip(&gt.values)
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(total / pred.values.len() as f64)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Similarity of a region's prediction to a uniform foreground.
fn object_score(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let (mean, std) = mean_std(xs);
    2.0 * mean / (mean * mean + 1.0 + std + S_EPS)
}

fn s_object(pred: &SaliencyMap, gt: &BinaryMask, mu: f64) -> f64 {
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        if g {
            fg.push(p);
        } else {
            bg.push(1.0 - p);
        }
    }
    mu * object_score(&fg) + (1.0 - mu) * object_score(&bg)
}

/// Block-level structural similarity with `(N − 1)` normalisation.
fn ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let d = n - 1.0 + S_EPS;
    let (sxx, syy, sxy) = (sxx / d, syy / d, sxy / d);
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + S_EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &SaliencyMap, gt: &BinaryMask) -> f64 {
    let (h, w) = (gt.height, gt.width);
    // One-based rounded centroid of the foreground; columns [0, cx) and rows
    // [0, cy) form the top-left block.
    let total = gt.positives() as f64;
    let (mut sy, mut sx) = (0.0, 0.0);
    for (i, &g) in gt.values.iter().enumerate() {
        if g {
            sy += (i / w + 1) as f64;
            sx += (i % w + 1) as f64;
        }
    }
    let cx = ((sx / total).round() as usize).min(w);
    let cy = ((sy / total).round() as usize).min(h);
    let blocks = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let area = (h * w) as f64;
    blocks
        .iter()
        .map(|&(y0, y1, x0, x1)| {
            let count = (y1 - y0) * (x1 - x0);
            if count == 0 {
                return 0.0;
            }
            let mut px = Vec::with_capacity(count);
            let mut gx = Vec::with_capacity(count);
            for y in y0..y1 {
                for x in x0..x1 {
                    px.push(pred.values[y * w + x]);
                    gx.push(if gt.values[y * w + x] { 1.0 } else { 0.0 });
                }
            }
            count as f64 / area * ssim(&px, &gx)
        })
        .sum()
}

/// Structure measure `α·S_o + (1 − α)·S_r`, clipped to `[0, 1]`. An empty
/// mask scores `1 − mean(pred)`, a full mask `mean(pred)`.
pub fn s_measure(pred: &SaliencyMap, gt: &BinaryMask, alpha: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    let mu = gt.positives() as f64 / gt.values.len() as f64;
    let mean_pred = pred.values.iter().sum::<f64>() / pred.values.len() as f64;
    let q = if mu == 0.0 {
        1.0 - mean_pred
    } else if mu == 1.0 {
        mean_pred
    } else {
        alpha * s_object(pred, gt, mu) + (1.0 - alpha) * s_region(pred, gt)
    };
    Ok(q.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub stem: String,
    pub mae: f64,
    pub s_measure: f64,
    pub max_f: f64,
    pub counts: ThresholdCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub max_f: f64,
    pub s_measure: f64,
    pub mae: f64,
    pub pr: PrCurve,
    pub f_curve: Vec<f64>,
    pub per_image: Vec<ImageScores>,
}

impl MetricsReport {
    /// Threshold (1..=255) attaining the maximum F-measure.
    pub fn best_threshold(&self) -> u32 {
        let mut best = 0;
        for (i, &f) in self.f_curve.iter().enumerate() {
            if f > self.f_curve[best] {
                best = i;
            }
        }
        self.pr.thresholds[best]
    }

    /// Per-image rows: `stem,mae,s_measure,max_f,positives,pixels`.
    pub fn per_image_csv(&self) -> String {
        let mut out = String::from("stem,mae,s_measure,max_f,positives,pixels\n");
        for r in &self.per_image {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.stem, r.mae, r.s_measure, r.max_f, r.counts.positives, r.counts.pixels
            ));
        }
        out
    }
}

/// Scores named pairs; the report lists images in the given order.
pub fn evaluate_pairs(dataset: &str, pairs: &[(String, SaliencyMap, BinaryMask)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Empty(format!("dataset `{dataset}` has no pairs")));
    }
    let per_image = par::map_collect(pairs.len(), |i| {
        let (stem, pred, gt) = &pairs[i];
        let counts = ThresholdCounts::compute(pred, gt)?;
        let max_f = counts
            .precision()
            .iter()
            .zip(counts.recall())
            .map(|(&p, r)| f_measure(p, r, BETA2))
            .fold(0.0, f64::max);
        Ok(ImageScores {
            stem: stem.clone(),
            mae: mae(pred, gt)?,
            s_measure: s_measure(pred, gt, S_ALPHA)?,
            max_f,
            counts,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let counts: Vec<ThresholdCounts> = per_image.iter().map(|r| r.counts.clone()).collect();
    let pr = mean_curves(&counts)?;
    let f_curve = f_curve(&pr, BETA2);
    let n = per_image.len() as f64;
    Ok(MetricsReport {
        dataset: dataset.to_owned(),
        max_f: f_curve.iter().copied().fold(0.0, f64::max),
        s_measure: per_image.iter().map(|r| r.s_measure).sum::<f64>() / n,
        mae: per_image.iter().map(|r| r.mae).sum::<f64>() / n,
        pr,
        f_curve,
        per_image,
    })
}

fn pngs_by_stem(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::DatasetNotFound(dir.to_owned()));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Matches `<pred_dir>/<stem>.png` to `<gt_dir>/<stem>.png`, resizing
/// predictions to the ground-truth size where they differ.
pub fn evaluate(dataset: &str, pred_dir: &Path, gt_dir: &Path) -> Result<MetricsReport> {
    let gts = pngs_by_stem(gt_dir)?;
    if gts.is_empty() {
        return Err(Error::EmptyDataset(gt_dir.to_owned()));
    }
    let preds = pngs_by_stem(pred_dir)?;
    let missing: Vec<String> = gts.keys().filter(|s| !preds.contains_key(*s)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::UnmatchedStems(missing));
    }
    let extra: Vec<&String> = preds.keys().filter(|s| !gts.contains_key(*s)).collect();
    if !extra.is_empty() {
        log::warn!("predictions without ground truth ignored: {extra:?}");
    }
    let stems: Vec<&String> = gts.keys().collect();
    let pairs = par::map_collect(stems.len(), |i| {
        let stem = stems[i];
        let gt = BinaryMask::from_png(&gts[stem])?;
        let pred = SaliencyMap::from_png(&preds[stem])?.resized(gt.height, gt.width)?;
        Ok((stem.clone(), pred, gt))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    evaluate_pairs(dataset, &pairs)
}

/// Writes the JSON report and a per-image CSV next to it.
pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let csv = path.with_extension("csv");
    std::fs::write(&csv, report.per_image_csv()).map_err(|e| Error::io(&csv, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    if report.pr.thresholds.len() != LEVELS
        || report.pr.precision.len() != LEVELS
        || report.pr.recall.len() != LEVELS
        || report.f_curve.len() != LEVELS
    {
        return Err(Error::Corrupt {
            path: path.to_owned(),
            reason: format!("curves must have {LEVELS} points"),
        });
    }
    Ok(report)
}
