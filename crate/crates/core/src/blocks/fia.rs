use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{ConvSpec, ConvUnit};
use crate::params::{Ctx, Init, ParamGroup, ParamId, ParamStore};

use super::expect_channels;

/// Feature interweaved aggregation: fuses low-level detail, high-level
/// semantic and (optionally) global context features through mutually
/// gating multiplicative paths.
#[derive(Clone, Debug)]
pub struct FiaParams {
    /// 1×1 compression of the low-level input to `width` channels.
    pub conv1: ConvUnit,
    /// Semantic mask from the high-level input.
    pub conv2: ConvUnit,
    /// Detail mask from the compressed low-level input.
    pub conv3: ConvUnit,
    /// Context mask from the global context input; absent when the block is
    /// built without a context path.
    pub conv4: Option<ConvUnit>,
    /// Fusion of the concatenated branches.
    pub conv5: ConvUnit,
    pub width: usize,
}

impl FiaParams {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, low_channels: usize, width: usize, with_context: bool) -> Result<Self> {
        let g = ParamGroup::Head;
        let branches = if with_context { 3 } else { 2 };
        Ok(Self {
            conv1: ConvUnit::new(store, init, &format!("{name}.conv1"), g, ConvSpec::bn_relu(low_channels, width, 1))?,
            conv2: ConvUnit::new(store, init, &format!("{name}.conv2"), g, ConvSpec::plain(width, width, 3))?,
            conv3: ConvUnit::new(store, init, &format!("{name}.conv3"), g, ConvSpec::plain(width, width, 3))?,
            conv4: with_context
                .then(|| ConvUnit::new(store, init, &format!("{name}.conv4"), g, ConvSpec::plain(width, width, 3)))
                .transpose()?,
            conv5: ConvUnit::new(store, init, &format!("{name}.conv5"), g, ConvSpec::bn_relu(branches * width, width, 3))?,
            width,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p.extend(self.conv3.params());
        if let Some(c) = &self.conv4 {
            p.extend(c.params());
        }
        p.extend(self.conv5.params());
        p
    }
}

/// Intermediate branches of one aggregation, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct FiaTrace {
    /// `ReLU(up(conv2(f_h)) ⊙ conv1(f_l))`
    pub f_hl: Var,
    /// `ReLU(conv3(conv1(f_l)) ⊙ up(f_h))`
    pub f_lh: Var,
    /// `ReLU(up(conv4(f_g)) ⊙ conv1(f_l))`
    pub f_gl: Option<Var>,
    pub output: Var,
}

/// `f_h` must be exactly half of `f_l` spatially; `f_g` may be any integer
/// divisor of it (it comes from the encoder top and is upsampled here).
pub fn fia_trace(cx: &mut Ctx, f_l: Var, f_h: Var, f_g: Option<Var>, p: &FiaParams) -> Result<FiaTrace> {
    let [n, _, h, w] = expect_channels(cx, f_l, "f_l", p.conv1.spec.in_channels)?;
    let dh = expect_channels(cx, f_h, "f_h", p.width)?;
    if dh[0] != n || dh[2] * 2 != h || dh[3] * 2 != w {
        return Err(Error::shape("f_h", format!("[{n}, {}, {}, {}]", p.width, h / 2, w / 2), &dh));
    }
    match (f_g, &p.conv4) {
        (Some(g), Some(_)) => {
            let dg = expect_channels(cx, g, "f_g", p.width)?;
            if dg[0] != n || h % dg[2] != 0 || w % dg[3] != 0 {
                return Err(Error::shape(
                    "f_g",
                    format!("[{n}, {}, h, w] with h | {h} and w | {w}", p.width),
                    &dg,
                ));
            }
        }
        (None, None) => {}
        (Some(_), None) => return Err(Error::Config("f_g given to an aggregation block built without a context path".into())),
        (None, Some(_)) => return Err(Error::Config("aggregation block expects a global context input f_g".into())),
    }

    let fl = p.conv1.forward(cx, f_l)?;

    let mask_h = p.conv2.forward(cx, f_h)?;
    let mask_h = cx.graph_mut().resize_bilinear(mask_h, h, w)?;
    let hl = cx.graph_mut().mul(mask_h, fl)?;
    let f_hl = cx.graph_mut().relu(hl);

    let mask_l = p.conv3.forward(cx, fl)?;
    let up_h = cx.graph_mut().resize_bilinear(f_h, h, w)?;
    let lh = cx.graph_mut().mul(mask_l, up_h)?;
    let f_lh = cx.graph_mut().relu(lh);

    let f_gl = match (f_g, &p.conv4) {
        (Some(g), Some(conv4)) => {
            let mask_g = conv4.forward(cx, g)?;
            let mask_g = cx.graph_mut().resize_bilinear(mask_g, h, w)?;
            let gl = cx.graph_mut().mul(mask_g, fl)?;
            Some(cx.graph_mut().relu(gl))
        }
        _ => None,
    };

    let mut parts = vec![f_hl, f_lh];
    parts.extend(f_gl);
    let cat = cx.graph_mut().concat_channels(&parts)?;
    let output = p.conv5.forward(cx, cat)?;
    Ok(FiaTrace { f_hl, f_lh, f_gl, output })
}

pub fn fia_forward(cx: &mut Ctx, f_l: Var, f_h: Var, f_g: Option<Var>, p: &FiaParams) -> Result<Var> {
    fia_trace(cx, f_l, f_h, f_g, p).map(|t| t.output)
}
