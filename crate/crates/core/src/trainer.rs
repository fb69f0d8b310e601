//! Mini-batch SGD with momentum, a warm-up then linear-decay schedule over
//! two learning-rate groups, deterministic batching and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{self, Archive};
use crate::data::{self, AugmentConfig, DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::network::{training_loss, Gcpa, LossConfig, NetworkConfig};
use crate::params::{Ctx, Mode, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_lr_backbone: f64,
    pub max_lr_head: f64,
    /// Fraction of all steps spent ramping up from zero.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Steps between periodic checkpoints; `None` keeps only the final one.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_lr_backbone: 5e-3,
            max_lr_head: 0.05,
            warmup_fraction: 1.0 / 30.0,
            seed: 0,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction must lie in (0, 1), got {}", self.warmup_fraction));
        }
        for (name, lr) in [("max_lr_backbone", self.max_lr_backbone), ("max_lr_head", self.max_lr_head)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay must be >= 0".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be >= 1".into());
        }
        self.loss.validate()?;
        self.augment.validate()
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// Learning rates `(backbone, head)` at `step` of `total_steps`: a linear
/// ramp over the first ⌈warmup_fraction · total⌉ steps, then a linear decay
/// reaching zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<(f64, f64)> {
    if step >= total_steps {
        return Err(Error::StepRange {
            step,
            total: total_steps,
        });
    }
    let warmup = ((cfg.warmup_fraction * total_steps as f64).ceil() as usize).clamp(1, total_steps);
    let factor = if step < warmup || warmup == total_steps {
        step as f64 / warmup as f64
    } else {
        (total_steps - step) as f64 / (total_steps - warmup) as f64
    };
    Ok((cfg.max_lr_backbone * factor, cfg.max_lr_head * factor))
}

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `buf ← m·buf + (g + wd·p)`, `p ← p − lr·buf`. The first update seeds the
/// buffer with the gradient itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    /// Weight decay applied to `id`; normalization scale and shift are exempt.
    pub fn decay_for(&self, store: &ParamStore, id: ParamId) -> f64 {
        if store.entry(id).role.decays() {
            self.weight_decay
        } else {
            0.0
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: (f64, f64)) {
        for (id, grad) in grads {
            let entry = store.entry(*id);
            let rate = match entry.group {
                ParamGroup::Backbone => lr.0,
                ParamGroup::Head => lr.1,
            };
            let wd = self.decay_for(store, *id);
            let name = entry.name.clone();
            let p = store.get_mut(*id);
            let mut d = grad.clone();
            if wd != 0.0 {
                for (dv, &pv) in d.data_mut().iter_mut().zip(p.data()) {
                    *dv += wd * pv;
                }
            }
            let buf = match self.buffers.get_mut(&name) {
                Some(buf) => {
                    for (b, &dv) in buf.data_mut().iter_mut().zip(d.data()) {
                        *b = self.momentum * *b + dv;
                    }
                    buf
                }
                None => self.buffers.entry(name).or_insert(d),
            };
            for (pv, &b) in p.data_mut().iter_mut().zip(buf.data()) {
                *pv -= rate * b;
            }
        }
    }
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub loss_dom: f64,
    pub loss_aux: [f64; 3],
    pub loss_total: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,lr_backbone,lr_head,loss_dom,loss_aux1,loss_aux2,loss_aux3,loss_total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.lr_backbone,
            self.lr_head,
            self.loss_dom,
            self.loss_aux[0],
            self.loss_aux[1],
            self.loss_aux[2],
            self.loss_total
        )
    }
}

pub const CHECKPOINT_FORMAT: &str = "gcpa-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Every stored tensor, running statistics included.
    pub params: BTreeMap<String, Tensor>,
    pub momentum: BTreeMap<String, Tensor>,
    /// Number of completed optimizer steps.
    pub step: usize,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Checkpoint {
    /// Rebuilds the network and loads the stored tensors into a fresh store.
    /// Pretrained-weight paths are not consulted.
    pub fn restore(&self) -> Result<(Gcpa, ParamStore)> {
        let config = without_weights_path(&self.network);
        let mut store = ParamStore::new();
        let net = Gcpa::build(&mut store, &config, 0)?;
        store.load_named(&self.params)?;
        Ok((net, store))
    }
}

fn without_weights_path(config: &NetworkConfig) -> NetworkConfig {
    let mut c = config.clone();
    c.backbone.pretrained_weights_path = None;
    c
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Serde(e.to_string()))
}

/// Writes a checkpoint atomically. Tensors are stored as `param/<name>` and
/// `momentum/<name>`; counters and configuration go in the metadata header.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for (k, v) in &ckpt.params {
        tensors.insert(format!("param/{k}"), v.clone());
    }
    for (k, v) in &ckpt.momentum {
        tensors.insert(format!("momentum/{k}"), v.clone());
    }
    let metadata = BTreeMap::from([
        ("format".to_owned(), CHECKPOINT_FORMAT.to_owned()),
        ("version".to_owned(), CHECKPOINT_VERSION.to_owned()),
        ("step".to_owned(), ckpt.step.to_string()),
        ("network".to_owned(), to_json(&ckpt.network)?),
        ("train".to_owned(), to_json(&ckpt.train)?),
    ]);
    archive::write(path, &Archive { tensors, metadata })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let archive = archive::read(path)?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_owned(),
        reason,
    };
    let meta = |key: &str| {
        archive
            .metadata
            .get(key)
            .ok_or_else(|| corrupt(format!("metadata key `{key}` missing")))
    };
    if meta("format")? != CHECKPOINT_FORMAT {
        return Err(corrupt(format!("not a checkpoint (format `{}`)", meta("format")?)));
    }
    let version = meta("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version.clone(),
            expected: CHECKPOINT_VERSION.into(),
        });
    }
    let step = meta("step")?.parse().map_err(|e| corrupt(format!("step: {e}")))?;
    let network = serde_json::from_str(meta("network")?).map_err(|e| corrupt(format!("network config: {e}")))?;
    let train = serde_json::from_str(meta("train")?).map_err(|e| corrupt(format!("train config: {e}")))?;
    let (mut params, mut momentum) = (BTreeMap::new(), BTreeMap::new());
    for (k, v) in archive.tensors {
        if let Some(name) = k.strip_prefix("param/") {
            params.insert(name.to_owned(), v);
        } else if let Some(name) = k.strip_prefix("momentum/") {
            momentum.insert(name.to_owned(), v);
        } else {
            return Err(corrupt(format!("unexpected tensor `{k}`")));
        }
    }
    Ok(Checkpoint {
        params,
        momentum,
        step,
        network,
        train,
    })
}

/// Owns the parameters and optimizer state of one training run.
pub struct Trainer<'a> {
    net: &'a Gcpa,
    data: &'a DatasetIndex,
    cfg: TrainConfig,
    store: ParamStore,
    opt: Sgd,
    step: usize,
    total_steps: usize,
    steps_per_epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(net: &'a Gcpa, store: ParamStore, data: &'a DatasetIndex, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.split != Split::Train || data.samples.iter().any(|s| s.mask_path.is_none()) {
            return Err(Error::Config(format!("dataset `{}` is not a labeled train split", data.name)));
        }
        if data.is_empty() {
            return Err(Error::Empty(format!("dataset `{}`", data.name)));
        }
        let steps_per_epoch = cfg.steps_per_epoch(data.len());
        Ok(Self {
            net,
            data,
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            store,
            step: 0,
            total_steps: cfg.epochs * steps_per_epoch,
            steps_per_epoch,
            cfg,
        })
    }

    /// Continues the run captured in `ckpt`; `net` must have been built from
    /// the checkpoint's network configuration.
    pub fn resume(net: &'a Gcpa, data: &'a DatasetIndex, ckpt: &Checkpoint) -> Result<Self> {
        if without_weights_path(net.config()) != without_weights_path(&ckpt.network) {
            return Err(Error::Config("checkpoint was written by a different network configuration".into()));
        }
        let (_, store) = ckpt.restore()?;
        let mut t = Self::new(net, store, data, ckpt.train.clone())?;
        if ckpt.step > t.total_steps {
            return Err(Error::StepRange {
                step: ckpt.step,
                total: t.total_steps,
            });
        }
        for name in ckpt.momentum.keys() {
            let Some(id) = t.store.id(name) else {
                return Err(Error::Inventory(format!("momentum for unknown parameter `{name}`")));
            };
            if t.store.get(id).shape() != ckpt.momentum[name].shape() {
                return Err(Error::Inventory(format!("momentum `{name}` has the wrong shape")));
            }
        }
        t.opt.buffers = ckpt.momentum.clone();
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn optimizer(&self) -> &Sgd {
        &self.opt
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One forward/backward/update step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let lr = lr_at(step, self.total_steps, &self.cfg)?;
        let epoch = (step / self.steps_per_epoch) as u64;
        let order = data::batches(self.data.len(), self.cfg.batch_size, self.cfg.seed, epoch)?;
        let ids = &order[step % self.steps_per_epoch];
        let (images, masks) = data::load_train_batch(self.data, ids, self.cfg.seed, epoch, &self.cfg.augment)?;

        let mut cx = Ctx::new(&mut self.store, Mode::Train);
        let x = cx.graph_mut().constant(images);
        let out = self.net.forward(&mut cx, x)?;
        let terms = training_loss(&mut cx, &out, &masks, &self.cfg.loss)?;
        let scalar = |v| cx.graph().value(v).data()[0];
        let loss_total = scalar(terms.total);
        let loss_dom = scalar(terms.dominant);
        let mut loss_aux = [0.0; 3];
        for (slot, &v) in loss_aux.iter_mut().zip(&terms.aux) {
            *slot = scalar(v);
        }
        if !loss_total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = cx.graph().backward(terms.total)?;
        let param_grads = cx.param_grads(&grads);
        drop(cx);
        self.opt.step(&mut self.store, &param_grads, lr);
        self.step += 1;
        Ok(StepRecord {
            step,
            lr_backbone: lr.0,
            lr_head: lr.1,
            loss_dom,
            loss_aux,
            loss_total,
        })
    }

    /// Steps until `end` (capped at the run length), calling `on_step` after
    /// each update.
    pub fn run_until(
        &mut self,
        end: usize,
        mut on_step: impl FnMut(&StepRecord, &Self) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let end = end.min(self.total_steps);
        let mut log = Vec::with_capacity(end.saturating_sub(self.step));
        while self.step < end {
            let rec = self.step()?;
            on_step(&rec, self)?;
            log.push(rec);
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.store.to_named(),
            momentum: self.opt.buffers.clone(),
            step: self.step,
            network: self.net.config().clone(),
            train: self.cfg.clone(),
        }
    }
}

/// Runs a full training schedule and returns the final checkpoint with the
/// per-step log.
pub fn train(net: &Gcpa, store: ParamStore, data: &DatasetIndex, cfg: TrainConfig) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let mut t = Trainer::new(net, store, data, cfg)?;
    let log = t.run_until(usize::MAX, |_, _| Ok(()))?;
    Ok((t.checkpoint(), log))
}
