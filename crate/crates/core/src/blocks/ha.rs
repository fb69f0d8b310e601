use crate::autograd::Var;
use crate::error::Result;
use crate::layers::{ConvSpec, ConvUnit, Dense};
use crate::params::{Ctx, Init, ParamGroup, ParamId, ParamStore};

use super::{expect_channels, reduced};

/// Head attention on the encoder top: spatial gating as in self refinement,
/// then channel re-weighting from the pooled compressed features.
#[derive(Clone, Debug)]
pub struct HaParams {
    pub compress: ConvUnit,
    pub conv_w: ConvUnit,
    pub conv_b: ConvUnit,
    pub fc1: Dense,
    pub fc2: Dense,
}

impl HaParams {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, in_channels: usize, width: usize, reduction: usize) -> Result<Self> {
        let g = ParamGroup::Head;
        let hidden = reduced(width, reduction);
        Ok(Self {
            compress: ConvUnit::new(store, init, &format!("{name}.compress"), g, ConvSpec::bn_relu(in_channels, width, 3))?,
            conv_w: ConvUnit::new(store, init, &format!("{name}.conv_w"), g, ConvSpec::plain(width, width, 3))?,
            conv_b: ConvUnit::new(store, init, &format!("{name}.conv_b"), g, ConvSpec::plain(width, width, 3))?,
            fc1: Dense::new(store, init, &format!("{name}.fc1"), g, width, hidden)?,
            fc2: Dense::new(store, init, &format!("{name}.fc2"), g, hidden, width)?,
        })
    }

    pub fn width(&self) -> usize {
        self.compress.spec.out_channels
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.compress.params();
        p.extend(self.conv_w.params());
        p.extend(self.conv_b.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HaTrace {
    /// Spatially gated features before channel weighting.
    pub gated: Var,
    /// Per-sample channel weights `[n, width]`.
    pub weights: Var,
    pub output: Var,
}

pub fn ha_trace(cx: &mut Ctx, top: Var, p: &HaParams) -> Result<HaTrace> {
    expect_channels(cx, top, "F", p.compress.spec.in_channels)?;
    let compressed = p.compress.forward(cx, top)?;
    let mask = p.conv_w.forward(cx, compressed)?;
    let bias = p.conv_b.forward(cx, compressed)?;
    let gated = {
        let g = cx.graph_mut();
        let m = g.mul(mask, compressed)?;
        let s = g.add(m, bias)?;
        g.relu(s)
    };

    let pooled = cx.graph_mut().global_avg_pool(compressed)?;
    let hidden = p.fc1.forward(cx, pooled)?;
    let hidden = cx.graph_mut().relu(hidden);
    let logits = p.fc2.forward(cx, hidden)?;
    let weights = cx.graph_mut().sigmoid(logits);
    let output = cx.graph_mut().channel_scale(gated, weights)?;
    Ok(HaTrace { gated, weights, output })
}

pub fn ha_forward(cx: &mut Ctx, top: Var, p: &HaParams) -> Result<Var> {
    ha_trace(cx, top, p).map(|t| t.output)
}
