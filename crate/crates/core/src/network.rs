//! Encoder → head attention → refinement → three aggregation stages, with a
//! dominant prediction head and three auxiliary heads used only in training.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{Backbone, BackboneConfig};
use crate::blocks::{fia_forward, gcf_forward, ha_forward, sr_forward, FiaParams, GcfParams, HaParams, SrParams};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvSpec, ConvUnit};
use crate::params::{Ctx, Init, Mode, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Which decoder components are present. With everything off the decoder is
/// a plain upsample-and-concatenate network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub use_fia: bool,
    pub use_sr: bool,
    pub use_ha: bool,
    pub use_gcf: bool,
    /// One context-flow parameter set reused by all three stages.
    pub gcf_shared: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        Self {
            use_fia: true,
            use_sr: true,
            use_ha: true,
            use_gcf: true,
            gcf_shared: false,
        }
    }

    pub fn baseline() -> Self {
        Self {
            use_fia: false,
            use_sr: false,
            use_ha: false,
            use_gcf: false,
            gcf_shared: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gcf_shared && !self.use_gcf {
            return Err(Error::Flags("gcf_shared requires use_gcf".into()));
        }
        if self.use_gcf && !self.use_fia {
            return Err(Error::Flags("use_gcf requires use_fia (context features enter through aggregation)".into()));
        }
        Ok(())
    }
}

fn default_width() -> usize {
    256
}

fn default_reduction() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    /// Decoder width.
    #[serde(default = "default_width")]
    pub width: usize,
    /// Bottleneck ratio of the fully connected attention layers.
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    #[serde(default)]
    pub flags: AblationFlags,
}

impl NetworkConfig {
    /// ResNet-50 encoder, 256-wide decoder.
    pub fn full_scale() -> Self {
        Self {
            backbone: BackboneConfig::resnet50(),
            width: default_width(),
            reduction: default_reduction(),
            flags: AblationFlags::full(),
        }
    }

    /// Tiny encoder and a narrow decoder for CPU-scale runs.
    pub fn desk_scale() -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            width: 32,
            reduction: 4,
            flags: AblationFlags::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.flags.validate()?;
        if self.width == 0 || self.reduction == 0 {
            return Err(Error::Config("width and reduction must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Top {
    Attention(HaParams),
    Squeeze(ConvUnit),
}

#[derive(Clone, Debug)]
enum Fuse {
    Interweaved(FiaParams),
    Concat(ConvUnit),
}

#[derive(Clone, Debug)]
struct DecoderStage {
    fuse: Fuse,
    refine: Option<SrParams>,
}

#[derive(Clone, Debug)]
pub struct NetworkOutput {
    /// `[batch, 1, H, W]` logits at input resolution.
    pub dominant: Var,
    /// Auxiliary logits of the three decoder stages in order; empty in infer mode.
    pub aux: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Gcpa {
    config: NetworkConfig,
    backbone: Backbone,
    top: Top,
    top_refine: Option<SrParams>,
    stages: Vec<DecoderStage>,
    gcf: Option<GcfParams>,
    head: Conv2d,
    aux_heads: Vec<Conv2d>,
}

impl Gcpa {
    /// Registers every parameter of the configured variant in `store`.
    pub fn build(store: &mut ParamStore, config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Init::new(seed);
        let flags = config.flags;
        let d = config.width;
        let ch = config.backbone.channels();
        let backbone = Backbone::build(store, init, &config.backbone)?;

        let top = if flags.use_ha {
            Top::Attention(HaParams::new(store, init, "ha", ch[3], d, config.reduction)?)
        } else {
            Top::Squeeze(ConvUnit::new(store, init, "top", ParamGroup::Head, ConvSpec::bn_relu(ch[3], d, 3))?)
        };
        let top_refine = flags.use_sr.then(|| SrParams::new(store, init, "sr0", d, d)).transpose()?;

        let mut stages = Vec::with_capacity(3);
        for (t, &low) in [ch[2], ch[1], ch[0]].iter().enumerate() {
            let name = format!("stage{}", t + 1);
            let fuse = if flags.use_fia {
                Fuse::Interweaved(FiaParams::new(store, init, &format!("{name}.fia"), low, d, flags.use_gcf)?)
            } else {
                Fuse::Concat(ConvUnit::new(
                    store,
                    init,
                    &format!("{name}.fuse"),
                    ParamGroup::Head,
                    ConvSpec::bn_relu(d + low, d, 3),
                )?)
            };
            let refine = flags.use_sr.then(|| SrParams::new(store, init, &format!("{name}.sr"), d, d)).transpose()?;
            stages.push(DecoderStage { fuse, refine });
        }

        let gcf = flags
            .use_gcf
            .then(|| GcfParams::new(store, init, "gcf", ch[3], d, config.reduction, flags.gcf_shared))
            .transpose()?;

        let head_conv = |store: &mut ParamStore, name: &str| Conv2d::new(store, init, name, ParamGroup::Head, d, 1, 3, 1, 1, true);
        let head = head_conv(store, "head.dominant")?;
        let aux_heads = (1..=3).map(|i| head_conv(store, &format!("head.aux{i}"))).collect::<Result<_>>()?;

        Ok(Self {
            config: config.clone(),
            backbone,
            top,
            top_refine,
            stages,
            gcf,
            head,
            aux_heads,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Train mode yields auxiliary logits and uses batch statistics; infer
    /// mode runs the dominant path only.
    pub fn forward(&self, cx: &mut Ctx, images: Var) -> Result<NetworkOutput> {
        let [_, _, h, w] = cx.graph().dims4(images)?;
        let enc = self.backbone.encode(cx, &self.config.backbone, images)?;
        let [s1, s2, s3, s4] = enc.stages;

        let top = match &self.top {
            Top::Attention(p) => ha_forward(cx, s4, p)?,
            Top::Squeeze(c) => c.forward(cx, s4)?,
        };
        let mut f_h = match &self.top_refine {
            Some(p) => sr_forward(cx, top, p)?,
            None => top,
        };

        let mut taps = Vec::with_capacity(3);
        for (t, (stage, f_l)) in self.stages.iter().zip([s3, s2, s1]).enumerate() {
            let f_g = self.gcf.as_ref().map(|p| gcf_forward(cx, s4, t + 1, p)).transpose()?;
            let fused = match &stage.fuse {
                Fuse::Interweaved(p) => fia_forward(cx, f_l, f_h, f_g, p)?,
                Fuse::Concat(conv) => {
                    let [_, _, lh, lw] = cx.graph().dims4(f_l)?;
                    let up = cx.graph_mut().resize_bilinear(f_h, lh, lw)?;
                    let cat = cx.graph_mut().concat_channels(&[up, f_l])?;
                    conv.forward(cx, cat)?
                }
            };
            f_h = match &stage.refine {
                Some(p) => sr_forward(cx, fused, p)?,
                None => fused,
            };
            taps.push(f_h);
        }

        let logits = self.head.forward(cx, f_h)?;
        let dominant = cx.graph_mut().resize_bilinear(logits, h, w)?;
        let aux = match cx.mode() {
            Mode::Infer => Vec::new(),
            Mode::Train => self
                .aux_heads
                .iter()
                .zip(&taps)
                .map(|(head, &tap)| {
                    let l = head.forward(cx, tap)?;
                    cx.graph_mut().resize_bilinear(l, h, w)
                })
                .collect::<Result<_>>()?,
        };
        Ok(NetworkOutput { dominant, aux })
    }

    /// Saliency probabilities `[batch, 1, H, W]` from the dominant head.
    pub fn predict(&self, store: &mut ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut cx = Ctx::new(store, Mode::Infer);
        let x = cx.graph_mut().constant(images.clone());
        let out = self.forward(&mut cx, x)?;
        let probs = cx.graph_mut().sigmoid(out.dominant);
        Ok(cx.graph().value(probs).clone())
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.backbone.params()
    }

    pub fn fia_params(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .flat_map(|s| match &s.fuse {
                Fuse::Interweaved(p) => p.params(),
                Fuse::Concat(_) => Vec::new(),
            })
            .collect()
    }

    pub fn sr_params(&self) -> Vec<ParamId> {
        self.top_refine
            .iter()
            .chain(self.stages.iter().filter_map(|s| s.refine.as_ref()))
            .flat_map(SrParams::params)
            .collect()
    }

    pub fn ha_params(&self) -> Vec<ParamId> {
        match &self.top {
            Top::Attention(p) => p.params(),
            Top::Squeeze(_) => Vec::new(),
        }
    }

    pub fn gcf_params(&self) -> Vec<ParamId> {
        self.gcf.as_ref().map(GcfParams::params).unwrap_or_default()
    }

    pub fn aux_head_params(&self) -> Vec<ParamId> {
        self.aux_heads.iter().flat_map(Conv2d::params).collect()
    }
}

/// Same as [`Gcpa::build`]; named for ablation use.
pub fn build_variant(store: &mut ParamStore, config: &NetworkConfig, seed: u64) -> Result<Gcpa> {
    Gcpa::build(store, config, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weights of the three auxiliary losses.
    pub lambda: [f64; 3],
    /// Probability clamp of the reference cross-entropy.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: [1.0; 3],
            epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("auxiliary weights must be >= 0, got {:?}", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon must lie in (0, 0.5), got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of probabilities `s` against a binary mask `g`,
/// with `s` clamped to `[eps, 1 − eps]`.
pub fn bce_loss(s: &Tensor, g: &Tensor, eps: f64) -> Result<f64> {
    if s.shape() != g.shape() {
        return Err(Error::shape("ground truth", format!("{:?}", s.shape()), g.shape()));
    }
    if g.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinary("G".into()));
    }
    let total: f64 = s
        .data()
        .iter()
        .zip(g.data())
        .map(|(&p, &t)| {
            let p = p.clamp(eps, 1.0 - eps);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / s.len() as f64)
}

/// `dominant + Σ λ_i · aux_i`.
pub fn total_loss(dominant: f64, aux: [f64; 3], cfg: &LossConfig) -> f64 {
    aux.iter().zip(&cfg.lambda).fold(dominant, |acc, (a, l)| acc + l * a)
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub dominant: Var,
    pub aux: Vec<Var>,
}

/// Builds the supervised objective on the tape. Cross-entropies are computed
/// from logits; auxiliary terms are included when the output carries them.
pub fn training_loss(cx: &mut Ctx, out: &NetworkOutput, masks: &Tensor, cfg: &LossConfig) -> Result<LossTerms> {
    let masks = std::sync::Arc::new(masks.clone());
    let g = cx.graph_mut();
    let dominant = g.bce_with_logits(out.dominant, masks.clone())?;
    let mut total = dominant;
    let mut aux = Vec::with_capacity(out.aux.len());
    for (&logits, &lambda) in out.aux.iter().zip(&cfg.lambda) {
        let l = g.bce_with_logits(logits, masks.clone())?;
        let weighted = g.scale(l, lambda);
        total = g.add(total, weighted)?;
        aux.push(l);
    }
    Ok(LossTerms { total, dominant, aux })
}
