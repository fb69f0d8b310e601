//! Plain-loop reference arithmetic for single-sample `[c, h, w]` arrays,
//! written independently of the library kernels.

#![allow(dead_code)]

pub mod metric_oracle;

use gcpa_core::params::ParamStore;

pub const EPS: f64 = 1e-5;

pub fn get(store: &ParamStore, name: &str) -> Vec<f64> {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .data()
        .to_vec()
}

/// Deterministic, non-degenerate values for every stored tensor; running
/// variances stay positive.
pub fn fill_pattern(store: &mut ParamStore, salt: u64) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (t, id) in ids.into_iter().enumerate() {
        let var = store.entry(id).name.ends_with("running_var");
        for (j, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
            let k = (j as u64 * 37 + t as u64 * 11 + salt * 5) % 17;
            let x = k as f64 / 8.0 - 1.0;
            *v = if var { 0.5 + x.abs() } else { x * 0.75 };
        }
    }
}

/// Same-padded stride-1 convolution. `w` is `[cout, cin, k, k]`.
pub fn conv(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], cout: usize, k: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut y = vec![0.0; cout * h * w];
    for o in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for c in 0..cin {
                    for u in 0..k {
                        for v in 0..k {
                            let (yi, xj) = (i as isize + u as isize - pad, j as isize + v as isize - pad);
                            if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                                continue;
                            }
                            acc += wt[((o * cin + c) * k + u) * k + v] * x[(c * h + yi as usize) * w + xj as usize];
                        }
                    }
                }
                y[(o * h + i) * w + j] = acc;
            }
        }
    }
    y
}

pub fn bn(x: &[f64], c: usize, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Vec<f64> {
    let hw = x.len() / c;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / hw;
            gamma[ch] * (v - mean[ch]) / (var[ch] + EPS).sqrt() + beta[ch]
        })
        .collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Upsamples a `[c, 1, 1]` map to `[c, h, w]` by replication.
pub fn replicate(x: &[f64], hw: usize) -> Vec<f64> {
    x.iter().flat_map(|&v| std::iter::repeat_n(v, hw)).collect()
}

pub fn gap(x: &[f64], c: usize) -> Vec<f64> {
    let hw = x.len() / c;
    x.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect()
}

/// `w` is `[out, in]`.
pub fn dense(x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo + x.iter().enumerate().map(|(i, &xi)| wt[o * x.len() + i] * xi).sum::<f64>())
        .collect()
}

/// Conv unit with normalization (running statistics) and ReLU.
pub fn conv_bn_relu(store: &ParamStore, name: &str, x: &[f64], cin: usize, h: usize, w: usize, cout: usize, k: usize) -> Vec<f64> {
    let y = conv(x, cin, h, w, &get(store, &format!("{name}.conv.weight")), cout, k, None);
    let y = bn(
        &y,
        cout,
        &get(store, &format!("{name}.bn.weight")),
        &get(store, &format!("{name}.bn.bias")),
        &get(store, &format!("{name}.bn.running_mean")),
        &get(store, &format!("{name}.bn.running_var")),
    );
    relu(&y)
}

/// Conv unit without normalization, with bias.
pub fn conv_plain(store: &ParamStore, name: &str, x: &[f64], cin: usize, h: usize, w: usize, cout: usize, k: usize) -> Vec<f64> {
    conv(
        x,
        cin,
        h,
        w,
        &get(store, &format!("{name}.conv.weight")),
        cout,
        k,
        Some(&get(store, &format!("{name}.conv.bias"))),
    )
}

pub fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
    assert_eq!(actual.len(), expected.len());
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!((a - e).abs() <= tol * (1.0 + e.abs()), "element {i}: {a} vs {e}");
    }
}
