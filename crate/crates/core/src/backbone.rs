//! Multi-level encoders. Both variants return four stages, shallowest first,
//! each halving the spatial size of the previous one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d};
use crate::params::{Ctx, Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const RESNET50_CHANNELS: [usize; 4] = [256, 512, 1024, 2048];
pub const TINY_CHANNELS: [usize; 4] = [16, 32, 64, 128];
const PREFIX: &str = "backbone";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Resnet50,
    Tiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    #[serde(default)]
    pub stage_channels: Option<Vec<usize>>,
    #[serde(default)]
    pub pretrained_weights_path: Option<PathBuf>,
}

impl BackboneConfig {
    pub fn resnet50() -> Self {
        Self {
            kind: BackboneKind::Resnet50,
            stage_channels: None,
            pretrained_weights_path: None,
        }
    }

    pub fn tiny() -> Self {
        Self {
            kind: BackboneKind::Tiny,
            stage_channels: None,
            pretrained_weights_path: None,
        }
    }

    pub fn channels(&self) -> [usize; 4] {
        match self.kind {
            BackboneKind::Resnet50 => RESNET50_CHANNELS,
            BackboneKind::Tiny => TINY_CHANNELS,
        }
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        match self.kind {
            BackboneKind::Resnet50 => 32,
            BackboneKind::Tiny => 16,
        }
    }

    /// Spatial reduction of the shallowest stage relative to the input.
    pub fn first_stage_stride(&self) -> usize {
        match self.kind {
            BackboneKind::Resnet50 => 4,
            BackboneKind::Tiny => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(ch) = &self.stage_channels {
            if ch[..] != self.channels()[..] {
                return Err(Error::Config(format!(
                    "{:?} backbone has stage channels {:?}, config says {ch:?}",
                    self.kind,
                    self.channels()
                )));
            }
        }
        if self.kind == BackboneKind::Tiny && self.pretrained_weights_path.is_some() {
            return Err(Error::Weights("tiny backbone has no pretrained weights".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub stages: [Var; 4],
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, init: Init, conv: &str, bn: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let g = ParamGroup::Backbone;
        Ok(Self {
            conv: Conv2d::new(store, init, conv, g, cin, cout, k, stride, k / 2, false)?,
            bn: BatchNorm2d::new(store, bn, g, cout)?,
        })
    }

    fn forward(&self, cx: &mut Ctx, x: Var, relu: bool) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(if relu { cx.graph_mut().relu(y) } else { y })
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: ConvBn,
    spatial: ConvBn,
    expand: ConvBn,
    downsample: Option<ConvBn>,
}

impl Bottleneck {
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.reduce.forward(cx, x, true)?;
        let y = self.spatial.forward(cx, y, true)?;
        let y = self.expand.forward(cx, y, false)?;
        let skip = match &self.downsample {
            Some(d) => d.forward(cx, x, false)?,
            None => x,
        };
        let sum = cx.graph_mut().add(y, skip)?;
        Ok(cx.graph_mut().relu(sum))
    }
}

/// Parameter names follow the torchvision layout (`layer2.0.downsample.1.weight`).
#[derive(Clone, Debug)]
pub struct ResNet50 {
    stem: ConvBn,
    layers: [Vec<Bottleneck>; 4],
}

const RESNET50_DEPTHS: [usize; 4] = [3, 4, 6, 3];

/// `(name, shape)` of every stored resnet50 tensor, names without the
/// `backbone.` prefix.
pub fn resnet50_inventory() -> Vec<(String, Vec<usize>)> {
    let mut inv = Vec::new();
    let conv = |inv: &mut Vec<(String, Vec<usize>)>, conv: &str, bn: &str, cin: usize, cout: usize, k: usize| {
        inv.push((format!("{conv}.weight"), vec![cout, cin, k, k]));
        for s in ["weight", "bias", "running_mean", "running_var"] {
            inv.push((format!("{bn}.{s}"), vec![cout]));
        }
    };
    conv(&mut inv, "conv1", "bn1", 3, 64, 7);
    let mut cin = 64;
    for (li, &depth) in RESNET50_DEPTHS.iter().enumerate() {
        let planes = 64 << li;
        for b in 0..depth {
            let p = format!("layer{}.{b}", li + 1);
            conv(&mut inv, &format!("{p}.conv1"), &format!("{p}.bn1"), cin, planes, 1);
            conv(&mut inv, &format!("{p}.conv2"), &format!("{p}.bn2"), planes, planes, 3);
            conv(&mut inv, &format!("{p}.conv3"), &format!("{p}.bn3"), planes, planes * 4, 1);
            if b == 0 {
                conv(&mut inv, &format!("{p}.downsample.0"), &format!("{p}.downsample.1"), cin, planes * 4, 1);
            }
            cin = planes * 4;
        }
    }
    inv
}

impl ResNet50 {
    fn new(store: &mut ParamStore, init: Init) -> Result<Self> {
        let n = |s: &str| format!("{PREFIX}.{s}");
        let stem = ConvBn::new(store, init, &n("conv1"), &n("bn1"), 3, 64, 7, 2)?;
        let mut cin = 64;
        let mut layers: [Vec<Bottleneck>; 4] = Default::default();
        for (li, &depth) in RESNET50_DEPTHS.iter().enumerate() {
            let planes = 64 << li;
            let stride = if li == 0 { 1 } else { 2 };
            for b in 0..depth {
                let p = n(&format!("layer{}.{b}", li + 1));
                let s = if b == 0 { stride } else { 1 };
                layers[li].push(Bottleneck {
                    reduce: ConvBn::new(store, init, &format!("{p}.conv1"), &format!("{p}.bn1"), cin, planes, 1, 1)?,
                    spatial: ConvBn::new(store, init, &format!("{p}.conv2"), &format!("{p}.bn2"), planes, planes, 3, s)?,
                    expand: ConvBn::new(store, init, &format!("{p}.conv3"), &format!("{p}.bn3"), planes, planes * 4, 1, 1)?,
                    downsample: (b == 0)
                        .then(|| {
                            ConvBn::new(
                                store,
                                init,
                                &format!("{p}.downsample.0"),
                                &format!("{p}.downsample.1"),
                                cin,
                                planes * 4,
                                1,
                                s,
                            )
                        })
                        .transpose()?,
                });
                cin = planes * 4;
            }
        }
        Ok(Self { stem, layers })
    }

    fn encode(&self, cx: &mut Ctx, images: Var) -> Result<EncoderOutput> {
        let x = self.stem.forward(cx, images, true)?;
        let mut x = cx.graph_mut().max_pool(x, 3, 2, 1)?;
        let mut stages = Vec::with_capacity(4);
        for layer in &self.layers {
            for block in layer {
                x = block.forward(cx, x)?;
            }
            stages.push(x);
        }
        Ok(EncoderOutput {
            stages: stages.try_into().expect("four stages"),
        })
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.stem.params();
        for b in self.layers.iter().flatten() {
            p.extend(b.reduce.params());
            p.extend(b.spatial.params());
            p.extend(b.expand.params());
            if let Some(d) = &b.downsample {
                p.extend(d.params());
            }
        }
        p
    }
}

/// Four (3×3 stride-2 conv, norm, ReLU) stages.
#[derive(Clone, Debug)]
pub struct TinyEncoder {
    stages: [ConvBn; 4],
}

impl TinyEncoder {
    fn new(store: &mut ParamStore, init: Init) -> Result<Self> {
        let mut cin = 3;
        let mut stages = Vec::with_capacity(4);
        for (i, &cout) in TINY_CHANNELS.iter().enumerate() {
            let p = format!("{PREFIX}.stage{}", i + 1);
            stages.push(ConvBn::new(store, init, &format!("{p}.conv"), &format!("{p}.bn"), cin, cout, 3, 2)?);
            cin = cout;
        }
        Ok(Self {
            stages: stages.try_into().expect("four stages"),
        })
    }

    fn encode(&self, cx: &mut Ctx, images: Var) -> Result<EncoderOutput> {
        let mut x = images;
        let mut out = Vec::with_capacity(4);
        for s in &self.stages {
            x = s.forward(cx, x, true)?;
            out.push(x);
        }
        Ok(EncoderOutput {
            stages: out.try_into().expect("four stages"),
        })
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Resnet50(ResNet50),
    Tiny(TinyEncoder),
}

impl Backbone {
    /// Registers the encoder parameters; loads pretrained weights when the
    /// config names a file.
    pub fn build(store: &mut ParamStore, init: Init, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let b = match cfg.kind {
            BackboneKind::Resnet50 => Backbone::Resnet50(ResNet50::new(store, init)?),
            BackboneKind::Tiny => Backbone::Tiny(TinyEncoder::new(store, init)?),
        };
        if let Some(path) = &cfg.pretrained_weights_path {
            let weights = load_pretrained(cfg)?;
            apply_pretrained(store, &weights)
                .map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
        }
        Ok(b)
    }

    /// `images` is `[batch, 3, H, W]` with `H`, `W` multiples of the config divisor.
    pub fn encode(&self, cx: &mut Ctx, cfg: &BackboneConfig, images: Var) -> Result<EncoderOutput> {
        let [_, c, h, w] = cx.graph().dims4(images)?;
        if c != 3 {
            return Err(Error::shape("images", "[batch, 3, H, W]", cx.graph().shape(images)));
        }
        let d = cfg.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::InputSize {
                height: h,
                width: w,
                divisor: d,
            });
        }
        match self {
            Backbone::Resnet50(r) => r.encode(cx, images),
            Backbone::Tiny(t) => t.encode(cx, images),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Backbone::Resnet50(r) => r.params(),
            Backbone::Tiny(t) => t.stages.iter().flat_map(ConvBn::params).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    pub missing: Vec<String>,
    /// Tensors present in the file but not part of the encoder (classifier head, counters).
    pub ignored: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct PretrainedWeights {
    pub tensors: BTreeMap<String, Tensor>,
    pub report: LoadReport,
}

/// Reads and validates a resnet50 weight archive against the full parameter
/// inventory. Tensor names are the unprefixed torchvision names.
pub fn load_pretrained(cfg: &BackboneConfig) -> Result<PretrainedWeights> {
    if cfg.kind == BackboneKind::Tiny {
        return Err(Error::Weights("tiny backbone has no pretrained weights".into()));
    }
    let path = cfg
        .pretrained_weights_path
        .as_deref()
        .ok_or_else(|| Error::Weights("no pretrained weights path configured".into()))?;
    load_resnet50_file(path)
}

fn load_resnet50_file(path: &Path) -> Result<PretrainedWeights> {
    if !path.exists() {
        return Err(Error::Weights(format!("pretrained weights file not found: {}", path.display())));
    }
    let mut archive = archive::read(path)?;
    let inventory = resnet50_inventory();
    let mut tensors = BTreeMap::new();
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    for (name, shape) in &inventory {
        match archive.tensors.remove(name) {
            None => missing.push(name.clone()),
            Some(t) if t.shape() != &shape[..] => {
                mismatched.push(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape()))
            }
            Some(t) => {
                tensors.insert(name.clone(), t);
            }
        }
    }
    if let Some(first) = missing.first() {
        return Err(Error::MissingTensor(if missing.len() == 1 {
            first.clone()
        } else {
            format!("{first}` and {} more: `{}", missing.len() - 1, missing[1..].join("`, `"))
        }));
    }
    if !mismatched.is_empty() {
        return Err(Error::Inventory(mismatched.join("; ")));
    }
    let report = LoadReport {
        loaded: tensors.len(),
        missing,
        ignored: archive.tensors.into_keys().collect(),
    };
    Ok(PretrainedWeights { tensors, report })
}

pub fn apply_pretrained(store: &mut ParamStore, weights: &PretrainedWeights) -> Result<()> {
    for (name, t) in &weights.tensors {
        let full = format!("{PREFIX}.{name}");
        let id = store.id(&full).ok_or_else(|| Error::MissingTensor(full.clone()))?;
        store.set(id, t.clone())?;
    }
    Ok(())
}
