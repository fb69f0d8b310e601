use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{ConvSpec, ConvUnit, Dense};
use crate::params::{Ctx, Init, ParamGroup, ParamId, ParamStore};

use super::{expect_channels, reduced};

#[derive(Clone, Debug)]
pub struct GcfStage {
    pub fc3: Dense,
    pub fc4: Dense,
    pub conv10: ConvUnit,
}

/// Global context flow: per-stage channel re-weighting of the encoder top.
/// In shared mode one parameter triple serves every stage.
#[derive(Clone, Debug)]
pub struct GcfParams {
    stages: Vec<GcfStage>,
    pub shared: bool,
}

impl GcfParams {
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        top_channels: usize,
        width: usize,
        reduction: usize,
        shared: bool,
    ) -> Result<Self> {
        let hidden = reduced(top_channels, reduction);
        let g = ParamGroup::Head;
        let labels: Vec<String> = if shared {
            vec!["shared".into()]
        } else {
            (1..=3).map(|t| t.to_string()).collect()
        };
        let stages = labels
            .iter()
            .map(|l| {
                let pre = format!("{name}.{l}");
                Ok(GcfStage {
                    fc3: Dense::new(store, init, &format!("{pre}.fc3"), g, top_channels, hidden)?,
                    fc4: Dense::new(store, init, &format!("{pre}.fc4"), g, hidden, width)?,
                    conv10: ConvUnit::new(store, init, &format!("{pre}.conv10"), g, ConvSpec::bn_relu(top_channels, width, 3))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { stages, shared })
    }

    /// Parameters used at `stage` (1-based).
    pub fn stage(&self, stage: usize) -> Result<&GcfStage> {
        if !(1..=3).contains(&stage) {
            return Err(Error::Stage(stage));
        }
        Ok(&self.stages[if self.shared { 0 } else { stage - 1 }])
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .flat_map(|s| {
                let mut p = s.fc3.params();
                p.extend(s.fc4.params());
                p.extend(s.conv10.params());
                p
            })
            .collect()
    }
}

/// `conv10_t(f_top) ⊙ σ(fc4_t(ReLU(fc3_t(gap(f_top)))))`, broadcast per channel.
pub fn gcf_forward(cx: &mut Ctx, f_top: Var, stage: usize, p: &GcfParams) -> Result<Var> {
    let s = p.stage(stage)?;
    expect_channels(cx, f_top, "f_top", s.fc3.in_features)?;
    let gap = cx.graph_mut().global_avg_pool(f_top)?;
    let hidden = s.fc3.forward(cx, gap)?;
    let hidden = cx.graph_mut().relu(hidden);
    let logits = s.fc4.forward(cx, hidden)?;
    let weights = cx.graph_mut().sigmoid(logits);
    let features = s.conv10.forward(cx, f_top)?;
    cx.graph_mut().channel_scale(features, weights)
}
