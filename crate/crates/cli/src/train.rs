use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use gcpa_core::data::{load_dataset, DatasetIndex, Split};
use gcpa_core::network::Gcpa;
use gcpa_core::params::ParamStore;
use gcpa_core::trainer::{load_checkpoint, save_checkpoint, Checkpoint, StepRecord, Trainer};
use gcpa_core::Error;

use crate::config::RunConfig;
use crate::status::{CliError, CliResult, Status};

pub const CHECKPOINT_NAME: &str = "checkpoint.safetensors";
pub const LOSS_LOG_NAME: &str = "loss.csv";

/// Where to pick up an interrupted run.
#[derive(Clone, Debug, PartialEq)]
pub enum Resume {
    Fresh,
    /// The latest checkpoint in the output directory.
    Latest,
    From(PathBuf),
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub log: Vec<StepRecord>,
    pub steps: usize,
}

pub fn cmd_train(cfg: &RunConfig, resume: &Resume) -> CliResult<Status> {
    let summary = train_run(cfg, resume)?;
    let last = summary.log.last().map_or(f64::NAN, |r| r.loss_dom);
    log::info!(
        "finished {} steps, final dominant loss {last:.4}; checkpoint {}",
        summary.steps,
        summary.checkpoint.display()
    );
    Ok(Status::Success)
}

pub fn open_train_set(cfg: &RunConfig) -> CliResult<DatasetIndex> {
    Ok(load_dataset(&cfg.data.root, &cfg.data.train, Split::Train)?)
}

/// Trains into `cfg.output_dir`: a config snapshot, `loss.csv`, the latest
/// checkpoint and, with `checkpoint_every`, numbered checkpoints.
pub fn train_run(cfg: &RunConfig, resume: &Resume) -> CliResult<TrainSummary> {
    let out = &cfg.output_dir;
    let resume_from = match resume {
        Resume::Fresh => None,
        Resume::Latest => Some(out.join(CHECKPOINT_NAME)),
        Resume::From(p) => Some(p.clone()),
    };
    let ckpt = match &resume_from {
        Some(path) if !path.is_file() => {
            return Err(CliError::usage(format!("no checkpoint to resume from at {}", path.display())))
        }
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let data = open_train_set(cfg)?;
    cfg.write_snapshot(out)?;

    let (net, store) = match &ckpt {
        Some(c) => {
            if c.network != cfg.model || c.train != cfg.train {
                log::warn!("resuming with the configuration stored in the checkpoint");
            }
            c.restore()?
        }
        None => {
            let mut store = ParamStore::new();
            let net = Gcpa::build(&mut store, &cfg.model, cfg.train.seed)?;
            (net, store)
        }
    };
    let mut trainer = match &ckpt {
        Some(c) => Trainer::resume(&net, &data, c)?,
        None => Trainer::new(&net, store, &data, cfg.train.clone())?,
    };
    log::info!(
        "training on {} ({} samples) from step {} of {}",
        data.name,
        data.len(),
        trainer.step_index(),
        trainer.total_steps()
    );

    let loss_path = out.join(LOSS_LOG_NAME);
    let mut loss_log = LossLog::open(&loss_path, trainer.step_index())?;
    let every = cfg.train.checkpoint_every;
    let ckpt_path = out.join(CHECKPOINT_NAME);
    let started = Instant::now();
    let total = trainer.total_steps();
    let log = trainer
        .run_until(usize::MAX, |rec, t| {
            loss_log.append(rec)?;
            if rec.step % 10 == 0 || rec.step + 1 == total {
                log::info!(
                    "step {}/{} loss {:.4} (dominant {:.4}) {:.1}s",
                    rec.step + 1,
                    total,
                    rec.loss_total,
                    rec.loss_dom,
                    started.elapsed().as_secs_f64()
                );
            }
            if every.is_some_and(|k| t.step_index() % k == 0) {
                let numbered = out.join("checkpoints").join(format!("step-{:06}.safetensors", t.step_index()));
                write_checkpoint(&t.checkpoint(), &numbered)?;
                write_checkpoint(&t.checkpoint(), &ckpt_path)?;
            }
            Ok(())
        })
        .map_err(CliError::from)?;
    write_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    Ok(TrainSummary {
        checkpoint: ckpt_path,
        loss_log: loss_path,
        steps: trainer.step_index(),
        log,
    })
}

fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> gcpa_core::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_owned(),
            source,
        })?;
    }
    save_checkpoint(ckpt, path)
}

/// `loss.csv`, rewritten up to the first step of this run so that a resumed
/// run never duplicates rows.
struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    fn open(path: &Path, start: usize) -> CliResult<Self> {
        let mut kept = Vec::new();
        if start > 0 {
            if let Ok(f) = File::open(path) {
                for line in BufReader::new(f).lines().skip(1) {
                    let line = line.map_err(|e| CliError::io(path, e))?;
                    let step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
                    if step.is_some_and(|s| s < start) {
                        kept.push(line);
                    }
                }
            }
        }
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "{}", StepRecord::CSV_HEADER)?;
            for line in &kept {
                writeln!(out, "{line}")?;
            }
            out.flush()
        };
        write().map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.to_owned(),
            out,
        })
    }

    fn append(&mut self, rec: &StepRecord) -> gcpa_core::Result<()> {
        writeln!(self.out, "{}", rec.csv_row())
            .and_then(|_| self.out.flush())
            .map_err(|source| Error::Io {
                path: self.path.clone(),
                source,
            })
    }
}
