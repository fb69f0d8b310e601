//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated. [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar root with
//! respect to every node that (transitively) depends on a leaf created with
//! [`Graph::leaf`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Normalize {
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ChannelScale {
        x: Var,
        s: Var,
    },
    Concat(Vec<Var>),
    Resize(Var),
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    BceWithLogits {
        logits: Var,
        target: Arc<Tensor>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(name: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(name, format!("{:?}", a.shape()), b.shape()));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that gradients are not propagated to.
    pub fn constant(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.push_node(t.into(), Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.push_node(t.into(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dims4(&self, v: Var) -> Result<[usize; 4]> {
        self.value(v).dims4()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_node(Arc::new(value), op, requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xd = self.dims4(x)?;
        let wd = self.dims4(w)?;
        let geom = ConvGeom::new(xd, wd, stride, pad).ok_or_else(|| {
            Error::shape("conv input", format!("{} channels and spatial >= kernel", wd[1]), &xd)
        })?;
        if let Some(b) = b {
            if self.shape(b) != [wd[0]] {
                return Err(Error::shape("conv bias", format!("[{}]", wd[0]), self.shape(b)));
            }
        }
        let y = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// Per-channel normalization with explicit statistics; `batch_stats` marks
    /// the statistics as derived from `x` itself.
    pub fn normalize(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let [_, c, _, _] = self.dims4(x)?;
        for (name, v) in [("norm scale", scale), ("norm shift", shift)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(name, format!("[{c}]"), self.shape(v)));
            }
        }
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("norm statistics", format!("[{c}]"), &[mean.len()]));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = kernels::affine_normalize(
            self.value(x),
            &mean,
            &inv_std,
            self.value(scale).data(),
            self.value(shift).data(),
        );
        Ok(self.push(
            y,
            Op::Normalize {
                x,
                scale,
                shift,
                mean,
                inv_std,
                batch_stats,
            },
            &[x, scale, shift],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add operand", self.value(a), self.value(b))?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul operand", self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::from_vec(av.shape().to_vec(), data)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).map(|v| v * k);
        self.push(y, Op::Scale(x, k), &[x])
    }

    /// `x[n, c, ·, ·] · s[n, c]`, broadcasting `s` over spatial positions.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x)?;
        if self.shape(s) != [n, c] {
            return Err(Error::shape("channel weights", format!("[{n}, {c}]"), self.shape(s)));
        }
        let sv = self.value(s).data();
        let mut y = self.value(x).clone();
        for (plane, chunk) in y.data_mut().chunks_mut(h * w).enumerate() {
            let k = sv[plane];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.push(y, Op::ChannelScale { x, s }, &[x, s]))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Empty("concat of zero tensors".into()))?;
        let [n, _, h, w] = self.dims4(*first)?;
        let mut total = 0;
        for &x in xs {
            let [xn, xc, xh, xw] = self.dims4(x)?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::shape("concat operand", format!("[{n}, _, {h}, {w}]"), self.shape(x)));
            }
            total += xc;
        }
        let mut data = Vec::with_capacity(n * total * h * w);
        for s in 0..n {
            for &x in xs {
                let v = self.value(x);
                let per = v.shape()[1] * h * w;
                data.extend_from_slice(&v.data()[s * per..(s + 1) * per]);
            }
        }
        let y = Tensor::from_vec([n, total, h, w], data)?;
        Ok(self.push(y, Op::Concat(xs.to_vec()), xs))
    }

    /// Bilinear resize to `(height, width)` with half-pixel centres.
    pub fn resize_bilinear(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        self.dims4(x)?;
        if height == 0 || width == 0 {
            return Err(Error::shape("resize target", "non-zero size", &[height, width]));
        }
        let y = kernels::resize_bilinear(self.value(x), height, width);
        Ok(self.push(y, Op::Resize(x), &[x]))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let [_, _, h, w] = self.dims4(x)?;
        if h + 2 * pad < k || w + 2 * pad < k || pad >= k {
            return Err(Error::shape("max pool input", format!("spatial >= {k}"), self.shape(x)));
        }
        let (y, arg) = kernels::max_pool(self.value(x), k, stride, pad);
        Ok(self.push(y, Op::MaxPool { x, arg }, &[x]))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean, taken about the first element
    /// of each plane so a constant plane pools to exactly its value.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x)?;
        let hw = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p[0] + p.iter().map(|v| v - p[0]).sum::<f64>() / hw)
            .collect();
        let y = Tensor::from_vec([n, c], data)?;
        Ok(self.push(y, Op::GlobalAvgPool(x), &[x]))
    }

    /// `x[n, in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (n, fin, fout) = match (xs, ws) {
            (&[n, i], &[o, wi]) if wi == i => (n, i, o),
            _ => return Err(Error::shape("linear input", format!("[_, {}]", ws.get(1).copied().unwrap_or(0)), xs)),
        };
        if self.shape(b) != [fout] {
            return Err(Error::shape("linear bias", format!("[{fout}]"), self.shape(b)));
        }
        let mut y = Tensor::zeros([n, fout]);
        for (row, out) in y.data_mut().chunks_mut(fout).enumerate() {
            out.copy_from_slice(self.value(b).data());
            let xr = &self.value(x).data()[row * fin..(row + 1) * fin];
            kernels::gemm(1, fin, fout, xr, (fin, 1), self.value(w).data(), (1, fin), 1.0, out);
        }
        Ok(self.push(y, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`,
    /// evaluated in the overflow-free form `max(z,0) − z·t + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: impl Into<Arc<Tensor>>) -> Result<Var> {
        let target = target.into();
        same_shape("loss target", self.value(logits), &target)?;
        let z = self.value(logits).data();
        let m = z.len() as f64;
        let loss = z
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / m;
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, target }, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root", "a scalar", self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.shape(root).to_vec(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), g, geom, self.wants(*x));
                if let Some(dx) = cg.dx {
                    acc(*x, dx);
                }
                acc(*w, cg.dw);
                if let Some(b) = b {
                    acc(*b, cg.db);
                }
            }
            Op::Normalize {
                x,
                scale,
                shift,
                mean,
                inv_std,
                batch_stats,
            } => {
                let ng = kernels::normalize_backward(
                    self.value(*x),
                    g,
                    mean,
                    inv_std,
                    self.value(*scale).data(),
                    *batch_stats,
                );
                if self.wants(*x) {
                    acc(*x, ng.dx);
                }
                acc(*scale, ng.dscale);
                acc(*shift, ng.dshift);
            }
            Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
                    .collect();
                acc(*x, Tensor::from_vec(g.shape().to_vec(), data).expect("relu grad"));
            }
            Op::Sigmoid(x) => {
                let data = g.data().iter().zip(out.data()).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                acc(*x, Tensor::from_vec(g.shape().to_vec(), data).expect("sigmoid grad"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                acc(*a, Tensor::from_vec(g.shape().to_vec(), da).expect("mul grad"));
                acc(*b, Tensor::from_vec(g.shape().to_vec(), db).expect("mul grad"));
            }
            Op::Scale(x, k) => acc(*x, g.map(|v| v * k)),
            Op::ChannelScale { x, s } => {
                let [n, c, h, w] = g.dims4().expect("rank-4 gradient");
                let (xv, sv) = (self.value(*x), self.value(*s));
                let mut dx = g.clone();
                let mut ds = Tensor::zeros([n, c]);
                for (plane, chunk) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    let xs = &xv.data()[plane * h * w..(plane + 1) * h * w];
                    ds.data_mut()[plane] = chunk.iter().zip(xs).map(|(g, x)| g * x).sum();
                    let k = sv.data()[plane];
                    chunk.iter_mut().for_each(|v| *v *= k);
                }
                acc(*x, dx);
                acc(*s, ds);
            }
            Op::Concat(xs) => {
                let [n, total, h, w] = g.dims4().expect("rank-4 gradient");
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.wants(x) {
                        let mut data = Vec::with_capacity(n * c * h * w);
                        for s in 0..n {
                            let start = (s * total + offset) * h * w;
                            data.extend_from_slice(&g.data()[start..start + c * h * w]);
                        }
                        acc(x, Tensor::from_vec([n, c, h, w], data).expect("concat grad"));
                    }
                    offset += c;
                }
            }
            Op::Resize(x) => {
                let [_, _, h, w] = self.dims4(*x).expect("rank-4 input");
                acc(*x, kernels::resize_bilinear_backward(g, h, w));
            }
            Op::MaxPool { x, arg } => {
                let [_, _, h, w] = self.dims4(*x).expect("rank-4 input");
                acc(*x, kernels::max_pool_backward(g, arg, h, w));
            }
            Op::GlobalAvgPool(x) => {
                let [n, c, h, w] = self.dims4(*x).expect("rank-4 input");
                let hw = (h * w) as f64;
                let dx = Tensor::from_fn([n, c, h, w], |i| g.data()[i / (h * w)] / hw);
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = Tensor::zeros([n, fin]);
                    kernels::gemm(n, fout, fin, g.data(), (fout, 1), self.value(*w).data(), (fin, 1), 0.0, dx.data_mut());
                    acc(*x, dx);
                }
                let mut dw = Tensor::zeros([fout, fin]);
                kernels::gemm(fout, n, fin, g.data(), (1, fout), self.value(*x).data(), (fin, 1), 0.0, dw.data_mut());
                acc(*w, dw);
                let mut db = Tensor::zeros([fout]);
                for row in g.data().chunks(fout) {
                    db.data_mut().iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                acc(*b, db);
            }
            Op::BceWithLogits { logits, target } => {
                let z = self.value(*logits);
                let k = g.data()[0] / z.len() as f64;
                let data = z.data().iter().zip(target.data()).map(|(&z, &t)| k * (sigmoid(z) - t)).collect();
                acc(*logits, Tensor::from_vec(z.shape().to_vec(), data).expect("bce grad"));
            }
            Op::Sum(x) => {
                acc(*x, Tensor::full(self.shape(*x).to_vec(), g.data()[0]));
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
