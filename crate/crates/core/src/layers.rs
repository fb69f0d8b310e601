//! Parameterised layers shared by the encoder, the decoder blocks and the heads.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{Ctx, Init, Mode, ParamGroup, ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let shape = [out_channels, in_channels, kernel, kernel];
        let w = init.fan_in_normal(&wname, &shape, in_channels * kernel * kernel);
        let weight = store.add(wname, w, ParamRole::ConvWeight, group)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([out_channels]), ParamRole::ConvBias, group)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.graph_mut().conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, channels: usize) -> Result<Self> {
        Ok(Self {
            scale: store.add(format!("{name}.weight"), Tensor::full([channels], 1.0), ParamRole::NormScale, group)?,
            shift: store.add(format!("{name}.bias"), Tensor::zeros([channels]), ParamRole::NormShift, group)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), ParamRole::RunningMean, group)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full([channels], 1.0), ParamRole::RunningVar, group)?,
            channels,
        })
    }

    /// Batch statistics in train mode (updating the running averages),
    /// running statistics in infer mode.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let c = cx.graph().dims4(x)?[1];
        if c != self.channels {
            return Err(Error::shape("norm input", format!("{} channels", self.channels), cx.graph().shape(x)));
        }
        let scale = cx.param(self.scale);
        let shift = cx.param(self.shift);
        cx.mark_touched(self.running_mean);
        cx.mark_touched(self.running_var);
        match cx.mode() {
            Mode::Train => {
                let [n, _, h, w] = cx.graph().dims4(x)?;
                let stats = kernels::batch_stats(cx.graph().value(x));
                let m = (n * h * w) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let store = cx.store_mut();
                let rm = store.get_mut(self.running_mean);
                for (r, &b) in rm.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b;
                }
                let rv = store.get_mut(self.running_var);
                for (r, &b) in rv.data_mut().iter_mut().zip(&stats.var) {
                    *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b * unbias;
                }
                cx.graph_mut().normalize(x, scale, shift, stats.mean, &stats.var, NORM_EPS, true)
            }
            Mode::Infer => {
                let mean = cx.store().get(self.running_mean).data().to_vec();
                let var = cx.store().get(self.running_var).data().to_vec();
                cx.graph_mut().normalize(x, scale, shift, mean, &var, NORM_EPS, false)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.scale, self.shift, self.running_mean, self.running_var]
    }
}

/// Convolution description used by the decoder blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// 1 or 3; padding keeps the spatial size.
    pub kernel_size: usize,
    /// Conv → norm → ReLU when set; a bare biased convolution otherwise.
    pub has_bn_relu: bool,
}

impl ConvSpec {
    pub fn bn_relu(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            has_bn_relu: true,
        }
    }

    pub fn plain(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            has_bn_relu: false,
        }
    }
}

/// A [`ConvSpec`] bound to stored parameters.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub spec: ConvSpec,
    pub conv: Conv2d,
    pub norm: Option<BatchNorm2d>,
}

impl ConvUnit {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, group: ParamGroup, spec: ConvSpec) -> Result<Self> {
        if !matches!(spec.kernel_size, 1 | 3) {
            return Err(Error::Config(format!("{name}: kernel size must be 1 or 3, got {}", spec.kernel_size)));
        }
        let pad = spec.kernel_size / 2;
        let conv = Conv2d::new(
            store,
            init,
            &format!("{name}.conv"),
            group,
            spec.in_channels,
            spec.out_channels,
            spec.kernel_size,
            1,
            pad,
            !spec.has_bn_relu,
        )?;
        let norm = if spec.has_bn_relu {
            Some(BatchNorm2d::new(store, &format!("{name}.bn"), group, spec.out_channels)?)
        } else {
            None
        };
        Ok(Self { spec, conv, norm })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let c = cx.graph().dims4(x)?[1];
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "conv input",
                format!("{} channels", self.spec.in_channels),
                cx.graph().shape(x),
            ));
        }
        let y = self.conv.forward(cx, x)?;
        match &self.norm {
            Some(norm) => {
                let y = norm.forward(cx, y)?;
                Ok(cx.graph_mut().relu(y))
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv.params();
        if let Some(n) = &self.norm {
            p.extend(n.params());
        }
        p
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, group: ParamGroup, in_features: usize, out_features: usize) -> Result<Self> {
        let wname = format!("{name}.weight");
        let w = init.fan_in_uniform(&wname, &[out_features, in_features], in_features);
        let bname = format!("{name}.bias");
        let b = Tensor::zeros([out_features]);
        Ok(Self {
            weight: store.add(wname, w, ParamRole::DenseWeight, group)?,
            bias: store.add(bname, b, ParamRole::DenseBias, group)?,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.graph_mut().linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}
