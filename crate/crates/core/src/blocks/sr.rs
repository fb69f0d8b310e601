use crate::autograd::Var;
use crate::error::Result;
use crate::layers::{ConvSpec, ConvUnit};
use crate::params::{Ctx, Init, ParamGroup, ParamId, ParamStore};

use super::expect_channels;

/// Self refinement: squeeze to `width` channels, then predict a
/// multiplicative mask and an additive bias from the squeezed features.
#[derive(Clone, Debug)]
pub struct SrParams {
    pub conv6: ConvUnit,
    pub conv_w: ConvUnit,
    pub conv_b: ConvUnit,
}

impl SrParams {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, in_channels: usize, width: usize) -> Result<Self> {
        let g = ParamGroup::Head;
        Ok(Self {
            conv6: ConvUnit::new(store, init, &format!("{name}.conv6"), g, ConvSpec::bn_relu(in_channels, width, 3))?,
            conv_w: ConvUnit::new(store, init, &format!("{name}.conv_w"), g, ConvSpec::plain(width, width, 3))?,
            conv_b: ConvUnit::new(store, init, &format!("{name}.conv_b"), g, ConvSpec::plain(width, width, 3))?,
        })
    }

    pub fn width(&self) -> usize {
        self.conv6.spec.out_channels
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv6.params();
        p.extend(self.conv_w.params());
        p.extend(self.conv_b.params());
        p
    }
}

/// `ReLU(W ⊙ f̃ + b)` with `f̃ = conv6(f_in)`, `W = conv_w(f̃)`, `b = conv_b(f̃)`.
pub fn sr_forward(cx: &mut Ctx, f_in: Var, p: &SrParams) -> Result<Var> {
    expect_channels(cx, f_in, "f_in", p.conv6.spec.in_channels)?;
    let squeezed = p.conv6.forward(cx, f_in)?;
    let mask = p.conv_w.forward(cx, squeezed)?;
    let bias = p.conv_b.forward(cx, squeezed)?;
    let g = cx.graph_mut();
    let gated = g.mul(mask, squeezed)?;
    let shifted = g.add(gated, bias)?;
    Ok(g.relu(shifted))
}
