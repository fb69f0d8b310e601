//! Brute-force metric references and a port of the published
//! structure-measure code.

use gcpa_core::metrics::{BinaryMask, SaliencyMap};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize, eight_bit: bool) -> (SaliencyMap, BinaryMask) {
    let density = rng.random_range(0.2..0.8);
    let g: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
    let p: Vec<f64> = g
        .iter()
        .map(|&fg| {
            let v: f64 = if fg { rng.random_range(0.2..1.0) } else { rng.random_range(0.0..0.8) };
            if eight_bit {
                (v * 255.0).round() / 255.0
            } else {
                v
            }
        })
        .collect();
    (SaliencyMap::new(h, w, p).unwrap(), BinaryMask::new(h, w, g).unwrap())
}

/// Per-threshold counting straight from the definition.
pub fn brute_pr(pred: &SaliencyMap, gt: &BinaryMask) -> (Vec<f64>, Vec<f64>) {
    let (mut precision, mut recall) = (Vec::new(), Vec::new());
    for tau in 1..=255u32 {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            let level = (p * 255.0).round() as u32;
            let on = level >= tau;
            match (on, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        precision.push(if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 });
        recall.push(if tp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fneg) as f64 });
    }
    (precision, recall)
}

pub fn brute_f(p: f64, r: f64) -> f64 {
    if 0.3 * p + r == 0.0 {
        0.0
    } else {
        1.3 * p * r / (0.3 * p + r)
    }
}

pub fn brute_mae(pred: &SaliencyMap, gt: &BinaryMask) -> f64 {
    let mut s = 0.0;
    for (i, &p) in pred.values().iter().enumerate() {
        s += (p - if gt.values()[i] { 1.0 } else { 0.0 }).abs();
    }
    s / pred.values().len() as f64
}

/// Line-by-line port of the published structure-measure reference code,
/// 1-based indices, machine epsilon.
pub mod reference {
    const EPS: f64 = f64::EPSILON;

    fn mean2(x: &[f64]) -> f64 {
        x.iter().sum::<f64>() / x.len() as f64
    }

    fn std(x: &[f64]) -> f64 {
        if x.len() == 1 {
            return 0.0;
        }
        let m = mean2(x);
        (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
    }

    fn object(pred: &[f64], gt: &[bool]) -> f64 {
        let sel: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
        if sel.is_empty() {
            return 0.0;
        }
        let x = mean2(&sel);
        let sigma_x = std(&sel);
        2.0 * x / (x * x + 1.0 + sigma_x + EPS)
    }

    fn s_object(pred: &[f64], gt: &[bool]) -> f64 {
        let pred_fg: Vec<f64> = pred.iter().zip(gt).map(|(&p, &g)| if g { p } else { 0.0 }).collect();
        let o_fg = object(&pred_fg, gt);
        let pred_bg: Vec<f64> = pred.iter().zip(gt).map(|(&p, &g)| if g { 0.0 } else { 1.0 - p }).collect();
        let not_gt: Vec<bool> = gt.iter().map(|g| !g).collect();
        let o_bg = object(&pred_bg, &not_gt);
        let u = gt.iter().filter(|&&g| g).count() as f64 / gt.len() as f64;
        u * o_fg + (1.0 - u) * o_bg
    }

    fn matlab_round(v: f64) -> usize {
        (v + 0.5).floor() as usize
    }

    /// Returns (X, Y): 1-based column and row of the centroid.
    fn centroid(gt: &[bool], rows: usize, cols: usize) -> (usize, usize) {
        let total = gt.iter().filter(|&&g| g).count() as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for i in 1..=cols {
            let col_sum = (1..=rows).filter(|&j| gt[(j - 1) * cols + (i - 1)]).count() as f64;
            sx += col_sum * i as f64;
        }
        for j in 1..=rows {
            let row_sum = (1..=cols).filter(|&i| gt[(j - 1) * cols + (i - 1)]).count() as f64;
            sy += row_sum * j as f64;
        }
        (matlab_round(sx / total), matlab_round(sy / total))
    }

    /// `m(r1:r2, c1:c2)` with 1-based inclusive bounds.
    fn block(m: &[f64], cols: usize, r1: usize, r2: usize, c1: usize, c2: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for r in r1..=r2 {
            for c in c1..=c2 {
                out.push(m[(r - 1) * cols + (c - 1)]);
            }
        }
        out
    }

    fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
        assert!(!pred.is_empty(), "reference code is undefined on empty blocks");
        let n = pred.len() as f64;
        let x = mean2(pred);
        let y = mean2(gt);
        let sigma_x2 = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
        let sigma_y2 = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
        let sigma_xy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / (n - 1.0 + EPS);
        let alpha = 4.0 * x * y * sigma_xy;
        let beta = (x * x + y * y) * (sigma_x2 + sigma_y2);
        if alpha != 0.0 {
            alpha / (beta + EPS)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        }
    }

    fn s_region(pred: &[f64], gt: &[bool], hei: usize, wid: usize) -> f64 {
        let (x, y) = centroid(gt, hei, wid);
        let g: Vec<f64> = gt.iter().map(|&v| f64::from(u8::from(v))).collect();
        let area = (wid * hei) as f64;
        let w1 = (x * y) as f64 / area;
        let w2 = ((wid - x) * y) as f64 / area;
        let w3 = (x * (hei - y)) as f64 / area;
        let w4 = 1.0 - w1 - w2 - w3;
        let q1 = ssim(&block(pred, wid, 1, y, 1, x), &block(&g, wid, 1, y, 1, x));
        let q2 = ssim(&block(pred, wid, 1, y, x + 1, wid), &block(&g, wid, 1, y, x + 1, wid));
        let q3 = ssim(&block(pred, wid, y + 1, hei, 1, x), &block(&g, wid, y + 1, hei, 1, x));
        let q4 = ssim(&block(pred, wid, y + 1, hei, x + 1, wid), &block(&g, wid, y + 1, hei, x + 1, wid));
        w1 * q1 + w2 * q2 + w3 * q3 + w4 * q4
    }

    pub fn structure_measure(pred: &[f64], gt: &[bool], hei: usize, wid: usize) -> f64 {
        let y = gt.iter().filter(|&&g| g).count() as f64 / gt.len() as f64;
        if y == 0.0 {
            1.0 - mean2(pred)
        } else if y == 1.0 {
            mean2(pred)
        } else {
            let q = 0.5 * s_object(pred, gt) + 0.5 * s_region(pred, gt, hei, wid);
            q.max(0.0)
        }
    }
}
