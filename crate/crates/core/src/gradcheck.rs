//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::Result;
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Below this magnitude both gradients are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many coordinates per tensor; `None` checks all.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-3,
            abs_floor: 1e-6,
            coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub tensors: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }
}

enum Target {
    Input(usize),
    Param(crate::params::ParamId),
}

/// Compares analytic and numeric gradients of a scalar objective built by
/// `forward` from `inputs` (train mode). Non-scalar outputs are reduced to
/// `Σ r ⊙ out` with fixed random weights `r`. Every input and every trainable
/// parameter the pass touches is checked.
pub fn check_gradients<F>(store: &mut ParamStore, inputs: &[Tensor], forward: F, opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Tensor> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut objective = |store: &mut ParamStore, inputs: &[Tensor], analytic: bool| -> Result<(f64, Option<(Vec<Option<Tensor>>, Vec<_>)>)> {
        let mut cx = Ctx::new(store, Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| cx.graph_mut().leaf(t.clone())).collect();
        let out = forward(&mut cx, &vars)?;
        let root = if cx.graph().value(out).len() == 1 {
            out
        } else {
            let shape = cx.graph().shape(out).to_vec();
            let r = weights
                .get_or_insert_with(|| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)))
                .clone();
            let r = cx.graph_mut().constant(r);
            let prod = cx.graph_mut().mul(out, r)?;
            cx.graph_mut().sum(prod)
        };
        let value = cx.graph().value(root).data()[0];
        if !analytic {
            return Ok((value, None));
        }
        let grads = cx.graph().backward(root)?;
        let input_grads = vars.iter().map(|&v| grads.get(v).cloned()).collect();
        Ok((value, Some((input_grads, cx.param_grads(&grads)))))
    };

    let (_, analytic) = objective(store, inputs, true)?;
    let (input_grads, param_grads) = analytic.expect("requested");

    let mut targets: Vec<(String, Target, Tensor)> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let g = input_grads[i].clone().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        targets.push((format!("input{i}"), Target::Input(i), g));
    }
    for (id, g) in param_grads {
        targets.push((store.entry(id).name.clone(), Target::Param(id), g));
    }

    let mut pick = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut report = GradReport {
        tensors: targets.len(),
        ..GradReport::default()
    };
    let mut inputs = inputs.to_vec();
    for (name, target, grad) in &targets {
        let n = grad.len();
        let coords: Vec<usize> = match opts.coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut pick, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let mut eval_at = |delta: f64, store: &mut ParamStore, inputs: &mut Vec<Tensor>| -> Result<f64> {
                let cell = match target {
                    Target::Input(i) => &mut inputs[*i].data_mut()[idx],
                    Target::Param(id) => &mut store.get_mut(*id).data_mut()[idx],
                };
                let original = *cell;
                *cell = original + delta;
                let v = objective(store, inputs, false).map(|r| r.0);
                let cell = match target {
                    Target::Input(i) => &mut inputs[*i].data_mut()[idx],
                    Target::Param(id) => &mut store.get_mut(*id).data_mut()[idx],
                };
                *cell = original;
                v
            };
            let plus = eval_at(opts.step, store, &mut inputs)?;
            let minus = eval_at(-opts.step, store, &mut inputs)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grad.data()[idx];
            let scale = analytic.abs().max(numeric.abs());
            let diff = (analytic - numeric).abs();
            let ok = if scale < opts.abs_floor {
                diff < opts.abs_floor
            } else {
                let rel = diff / scale;
                report.max_rel_error = report.max_rel_error.max(rel);
                rel < opts.rel_tol
            };
            report.checked += 1;
            if !ok {
                report.mismatches.push(Mismatch {
                    tensor: name.clone(),
                    index: idx,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
