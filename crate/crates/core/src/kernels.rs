//! Forward and backward kernels over raw tensors. Everything here is
//! allocation-explicit and free of autograd bookkeeping.

use crate::par;
use crate::tensor::Tensor;

/// Samples folded into one weight-gradient partial before partials are summed.
/// Fixed so that reductions happen in the same order for any thread count.
const SAMPLES_PER_PARTIAL: usize = 4;

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, with `c` contiguous row-major and
/// `a`, `b` addressed through (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm: output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    // SAFETY: every index touched by dgemm was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], w: [usize; 4], stride: usize, pad: usize) -> Option<Self> {
        let [n, ci, h, wd] = x;
        let [co, wci, kh, kw] = w;
        if wci != ci || kh != kw || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return None;
        }
        Some(Self {
            n,
            ci,
            h,
            w: wd,
            co,
            k: kh,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &ConvGeom) -> Tensor {
    let (kk, p) = (g.patch(), g.positions());
    let xs = x.data();
    let ws = w.data();
    let mut y = Tensor::zeros([g.n, g.co, g.ho, g.wo]);
    par::for_each_chunk(y.data_mut(), g.co * p, |n, yn| {
        let xn = &xs[n * g.ci * g.h * g.w..(n + 1) * g.ci * g.h * g.w];
        if g.is_pointwise() {
            gemm(g.co, kk, p, ws, (kk, 1), xn, (p, 1), 0.0, yn);
        } else {
            let mut cols = vec![0.0; kk * p];
            im2col(xn, g, &mut cols);
            gemm(g.co, kk, p, ws, (kk, 1), &cols, (p, 1), 0.0, yn);
        }
        if let Some(b) = b {
            for (o, row) in yn.chunks_mut(p).enumerate() {
                let bo = b.data()[o];
                row.iter_mut().for_each(|v| *v += bo);
            }
        }
    });
    y
}

pub(crate) struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

pub(crate) fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, g: &ConvGeom, need_dx: bool) -> ConvGrads {
    let (kk, p) = (g.patch(), g.positions());
    let (xs, ws, dys) = (x.data(), w.data(), dy.data());
    let in_len = g.ci * g.h * g.w;
    let out_len = g.co * p;

    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros([g.n, g.ci, g.h, g.w]);
        par::for_each_chunk(dx.data_mut(), in_len, |n, dxn| {
            let dyn_ = &dys[n * out_len..(n + 1) * out_len];
            if g.is_pointwise() {
                gemm(kk, g.co, p, ws, (1, kk), dyn_, (p, 1), 0.0, dxn);
            } else {
                let mut dcols = vec![0.0; kk * p];
                gemm(kk, g.co, p, ws, (1, kk), dyn_, (p, 1), 0.0, &mut dcols);
                col2im(&dcols, g, dxn);
            }
        });
        dx
    });

    let chunks = g.n.div_ceil(SAMPLES_PER_PARTIAL);
    let partials = par::map_collect(chunks, |c| {
        let mut acc = vec![0.0; g.co * kk];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
        for n in c * SAMPLES_PER_PARTIAL..((c + 1) * SAMPLES_PER_PARTIAL).min(g.n) {
            let xn = &xs[n * in_len..(n + 1) * in_len];
            let dyn_ = &dys[n * out_len..(n + 1) * out_len];
            let src: &[f64] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            gemm(g.co, p, kk, dyn_, (p, 1), src, (1, p), 1.0, &mut acc);
        }
        acc
    });
    let mut dw = Tensor::zeros(w.shape().to_vec());
    for part in &partials {
        dw.data_mut().iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }

    let mut db = Tensor::zeros([g.co]);
    for n in 0..g.n {
        for (o, row) in dys[n * out_len..(n + 1) * out_len].chunks(p).enumerate() {
            db.data_mut()[o] += row.iter().sum::<f64>();
        }
    }
    ConvGrads { dx, dw, db }
}

/// Source coordinates for one axis of a bilinear resize with half-pixel
/// centres (corner alignment off): `src = (o + 0.5) · in/out − 0.5`,
/// clamped at zero.
#[derive(Clone, Debug)]
pub(crate) struct Interp {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Interp {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut it = Interp {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            it.lo.push(lo);
            it.hi.push((lo + 1).min(input - 1));
            it.frac.push(src - lo as f64);
        }
        it
    }
}

pub(crate) fn resize_plane(src: &[f64], ry: &Interp, rx: &Interp, w: usize, dst: &mut [f64]) {
    let ow = rx.lo.len();
    for (oy, row) in dst.chunks_mut(ow).enumerate() {
        let (y0, y1, fy) = (ry.lo[oy], ry.hi[oy], ry.frac[oy]);
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for (ox, v) in row.iter_mut().enumerate() {
            let (x0, x1, fx) = (rx.lo[ox], rx.hi[ox], rx.frac[ox]);
            let top = (1.0 - fx) * r0[x0] + fx * r0[x1];
            let bot = (1.0 - fx) * r1[x0] + fx * r1[x1];
            *v = (1.0 - fy) * top + fy * bot;
        }
    }
}

fn resize_plane_backward(dy: &[f64], ry: &Interp, rx: &Interp, w: usize, dx: &mut [f64]) {
    let ow = rx.lo.len();
    for (oy, row) in dy.chunks(ow).enumerate() {
        let (y0, y1, fy) = (ry.lo[oy], ry.hi[oy], ry.frac[oy]);
        for (ox, &g) in row.iter().enumerate() {
            let (x0, x1, fx) = (rx.lo[ox], rx.hi[ox], rx.frac[ox]);
            dx[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * g;
            dx[y0 * w + x1] += (1.0 - fy) * fx * g;
            dx[y1 * w + x0] += fy * (1.0 - fx) * g;
            dx[y1 * w + x1] += fy * fx * g;
        }
    }
}

pub(crate) fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.dims4().expect("rank-4 input");
    let (ry, rx) = (Interp::new(h, oh), Interp::new(w, ow));
    let xs = x.data();
    let mut y = Tensor::zeros([n, c, oh, ow]);
    par::for_each_chunk(y.data_mut(), oh * ow, |plane, dst| {
        resize_plane(&xs[plane * h * w..(plane + 1) * h * w], &ry, &rx, w, dst);
    });
    y
}

pub(crate) fn resize_bilinear_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, oh, ow] = dy.dims4().expect("rank-4 gradient");
    let (ry, rx) = (Interp::new(h, oh), Interp::new(w, ow));
    let dys = dy.data();
    let mut dx = Tensor::zeros([n, c, h, w]);
    par::for_each_chunk(dx.data_mut(), h * w, |plane, dst| {
        resize_plane_backward(&dys[plane * oh * ow..(plane + 1) * oh * ow], &ry, &rx, w, dst);
    });
    dx
}

/// Nearest-neighbour resize of one plane (`src = floor(o · in/out)`).
pub(crate) fn resize_plane_nearest(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ys: Vec<usize> = (0..oh).map(|o| (o * h / oh).min(h - 1)).collect();
    let xs: Vec<usize> = (0..ow).map(|o| (o * w / ow).min(w - 1)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for &y in &ys {
        out.extend(xs.iter().map(|&x| src[y * w + x]));
    }
    out
}

/// Per-channel reduction over `[N, C, H, W]` data.
fn channel_map<T: Send>(
    data: &[f64],
    [n, c, h, w]: [usize; 4],
    f: impl Fn(usize, &mut dyn Iterator<Item = f64>) -> T + Send + Sync,
) -> Vec<T> {
    let hw = h * w;
    par::map_collect(c, |ch| {
        let mut it = (0..n).flat_map(move |s| data[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().copied());
        f(ch, &mut it)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

pub(crate) fn batch_stats(x: &Tensor) -> BatchStats {
    let dims = x.dims4().expect("rank-4 input");
    let m = (dims[0] * dims[2] * dims[3]) as f64;
    let mean = channel_map(x.data(), dims, |_, it| it.sum::<f64>() / m);
    let var = channel_map(x.data(), dims, |ch, it| {
        it.map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>() / m
    });
    BatchStats { mean, var }
}

/// `y = scale · (x − mean) · inv_std + shift`, per channel.
pub(crate) fn affine_normalize(x: &Tensor, mean: &[f64], inv_std: &[f64], scale: &[f64], shift: &[f64]) -> Tensor {
    let [_, c, h, w] = x.dims4().expect("rank-4 input");
    let xs = x.data();
    let mut y = Tensor::zeros(x.shape().to_vec());
    par::for_each_chunk(y.data_mut(), h * w, |plane, dst| {
        let ch = plane % c;
        let (m, s, g, b) = (mean[ch], inv_std[ch], scale[ch], shift[ch]);
        for (o, &v) in dst.iter_mut().zip(&xs[plane * h * w..(plane + 1) * h * w]) {
            *o = g * (v - m) * s + b;
        }
    });
    y
}

pub(crate) struct NormGrads {
    pub dx: Tensor,
    pub dscale: Tensor,
    pub dshift: Tensor,
}

/// Gradient of the normalization. With `batch_stats` the mean and variance
/// are functions of `x` and their dependence is propagated.
pub(crate) fn normalize_backward(
    x: &Tensor,
    dy: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[f64],
    batch_stats: bool,
) -> NormGrads {
    let [n, c, h, w] = x.dims4().expect("rank-4 input");
    let hw = h * w;
    let m = (n * hw) as f64;
    let (xs, dys) = (x.data(), dy.data());
    let sums: Vec<(f64, f64)> = par::map_collect(c, |ch| {
        let (mut sdy, mut sdyx) = (0.0, 0.0);
        for s in 0..n {
            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            for (&v, &g) in xs[r.clone()].iter().zip(&dys[r]) {
                sdy += g;
                sdyx += g * (v - mean[ch]) * inv_std[ch];
            }
        }
        (sdy, sdyx)
    });
    let mut dx = Tensor::zeros(x.shape().to_vec());
    par::for_each_chunk(dx.data_mut(), hw, |plane, dst| {
        let ch = plane % c;
        let (sdy, sdyx) = sums[ch];
        let r = plane * hw..(plane + 1) * hw;
        let k = scale[ch] * inv_std[ch];
        for ((o, &v), &g) in dst.iter_mut().zip(&xs[r.clone()]).zip(&dys[r]) {
            *o = if batch_stats {
                let xhat = (v - mean[ch]) * inv_std[ch];
                k / m * (m * g - sdy - xhat * sdyx)
            } else {
                k * g
            };
        }
    });
    NormGrads {
        dx,
        dscale: Tensor::from_fn([c], |ch| sums[ch].1),
        dshift: Tensor::from_fn([c], |ch| sums[ch].0),
    }
}

/// Max pooling with implicit `-inf` padding; returns the output and, for each
/// output element, the flat in-plane index of the (first) maximum.
pub(crate) fn max_pool(x: &Tensor, k: usize, stride: usize, pad: usize) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = x.dims4().expect("rank-4 input");
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let xs = x.data();
    let planes = par::map_collect(n * c, |plane| {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let mut vals = Vec::with_capacity(ho * wo);
        let mut idx = Vec::with_capacity(ho * wo);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut arg = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if src[i] > best || arg == usize::MAX {
                            best = src[i];
                            arg = i;
                        }
                    }
                }
                vals.push(best);
                idx.push(arg);
            }
        }
        (vals, idx)
    });
    let mut data = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for (v, i) in planes {
        data.extend(v);
        arg.extend(i);
    }
    (Tensor::from_vec([n, c, ho, wo], data).expect("pool shape"), arg)
}

pub(crate) fn max_pool_backward(dy: &Tensor, arg: &[usize], h: usize, w: usize) -> Tensor {
    let [n, c, ho, wo] = dy.dims4().expect("rank-4 gradient");
    let dys = dy.data();
    let mut dx = Tensor::zeros([n, c, h, w]);
    par::for_each_chunk(dx.data_mut(), h * w, |plane, dst| {
        let r = plane * ho * wo..(plane + 1) * ho * wo;
        for (&g, &i) in dys[r.clone()].iter().zip(&arg[r]) {
            dst[i] += g;
        }
    });
    dx
}
