//! Trains each configured component combination under one seed and
//! schedule, scores it, and tabulates MAE.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gcpa_core::data::{load_dataset, Split};
use gcpa_core::metrics::{evaluate, write_report};
use gcpa_core::network::{AblationFlags, NetworkConfig};
use gcpa_core::trainer::{load_checkpoint, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::infer::infer_dir;
use crate::status::{CliError, CliResult, Status};
use crate::train::{open_train_set, train_run, Resume};

pub const REPORT_NAME: &str = "ablation.json";
pub const TABLE_NAME: &str = "ablation.md";
pub const CSV_NAME: &str = "ablation.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
    pub mae: f64,
    pub max_f: f64,
    pub s_measure: f64,
    pub final_dominant_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Dataset the variants were scored on.
    pub dataset: String,
    /// Component table rows, in configured order.
    pub rows: Vec<AblationRow>,
    /// Shared context-flow variant; compared with the full row.
    pub shared: Option<AblationRow>,
    /// False when a variant failed and later ones were not run.
    pub complete: bool,
    pub failure: Option<String>,
}

impl AblationReport {
    /// The row whose flags switch every component on.
    pub fn full_row(&self) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.flags == AblationFlags::full())
    }

    pub fn baseline_row(&self) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.flags == AblationFlags::baseline())
    }

    /// Component table followed by the shared-versus-distinct pair, as Markdown.
    pub fn tables(&self) -> String {
        let tick = |on: bool| if on { "✓" } else { " " };
        let mut out = String::from("| Baseline | FIA | SR | HA | GCF | MAE |\n|:-:|:-:|:-:|:-:|:-:|--:|\n");
        for r in &self.rows {
            let f = &r.flags;
            let _ = writeln!(
                out,
                "| ✓ | {} | {} | {} | {} | {:.4} |",
                tick(f.use_fia),
                tick(f.use_sr),
                tick(f.use_ha),
                tick(f.use_gcf),
                r.mae
            );
        }
        if let (Some(shared), Some(full)) = (&self.shared, self.full_row()) {
            out.push_str("\n| | MAE |\n|---|--:|\n");
            let _ = writeln!(out, "| with the shared | {:.4} |", shared.mae);
            let _ = writeln!(out, "| with GCF | {:.4} |", full.mae);
        }
        if let Some(f) = &self.failure {
            let _ = writeln!(out, "\nincomplete: {f}");
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("variant,use_fia,use_sr,use_ha,use_gcf,gcf_shared,mae,max_f,s_measure,final_dominant_loss,seconds\n");
        for r in self.rows.iter().chain(&self.shared) {
            let f = &r.flags;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.name,
                f.use_fia,
                f.use_sr,
                f.use_ha,
                f.use_gcf,
                f.gcf_shared,
                r.mae,
                r.max_f,
                r.s_measure,
                r.final_dominant_loss,
                r.seconds
            );
        }
        out
    }

    /// Writes the JSON report, the Markdown tables and the CSV.
    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| CliError::failure(e.to_string()))?;
        for (name, text) in [(REPORT_NAME, json), (TABLE_NAME, self.tables()), (CSV_NAME, self.csv())] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn cmd_ablate(cfg: &RunConfig, full_scale: bool) -> CliResult<Status> {
    let report = run_ablation(cfg, full_scale)?;
    print!("{}", report.tables());
    Ok(if report.complete { Status::Success } else { Status::Partial })
}

/// Swaps in the large encoder and the reference schedule, keeping data and seed.
pub fn full_scale_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.model = NetworkConfig {
        flags: cfg.model.flags,
        ..NetworkConfig::full_scale()
    };
    c.model.backbone.pretrained_weights_path = cfg.model.backbone.pretrained_weights_path.clone();
    c.train = TrainConfig {
        seed: cfg.train.seed,
        checkpoint_every: cfg.train.checkpoint_every,
        ..TrainConfig::default()
    };
    c.eval.input_size = None;
    c
}

/// Trains and scores every variant. A failing variant stops the sweep; the
/// rows finished so far are saved and the report is marked incomplete.
pub fn run_ablation(cfg: &RunConfig, full_scale: bool) -> CliResult<AblationReport> {
    let cfg = if full_scale { full_scale_config(cfg) } else { cfg.clone() };
    cfg.validate()?;
    open_train_set(&cfg)?;
    let eval_name = cfg.ablate.eval_dataset.clone().unwrap_or_else(|| cfg.data.train.clone());
    load_dataset(&cfg.data.root, &eval_name, Split::Train)?;
    cfg.write_snapshot(&cfg.output_dir)?;

    let mut jobs: Vec<(String, AblationFlags, bool)> =
        cfg.ablate.variants.iter().map(|v| (v.name.clone(), v.flags, false)).collect();
    if cfg.ablate.shared_pair {
        if !jobs.iter().any(|(_, f, _)| *f == AblationFlags::full()) {
            jobs.push(("+gcf".into(), AblationFlags::full(), false));
        }
        let shared = AblationFlags {
            gcf_shared: true,
            ..AblationFlags::full()
        };
        jobs.push(("shared".into(), shared, true));
    }

    let mut report = AblationReport {
        dataset: eval_name.clone(),
        rows: Vec::new(),
        shared: None,
        complete: false,
        failure: None,
    };
    for (i, (name, flags, is_shared)) in jobs.iter().enumerate() {
        log::info!("variant {}/{}: {name}", i + 1, jobs.len());
        match run_variant(&cfg, name, *flags, &eval_name) {
            Ok(row) => {
                log::info!("variant {name}: MAE {:.4} in {:.0}s", row.mae, row.seconds);
                if *is_shared {
                    report.shared = Some(row);
                } else {
                    report.rows.push(row);
                }
                report.save(&cfg.output_dir)?;
            }
            Err(e) => {
                log::error!("variant {name} failed: {e}");
                report.failure = Some(format!("variant `{name}`: {e}"));
                report.save(&cfg.output_dir)?;
                return Ok(report);
            }
        }
    }
    report.complete = true;
    report.save(&cfg.output_dir)?;
    Ok(report)
}

fn variant_dir(root: &Path, name: &str) -> PathBuf {
    let slug: String = name
        .chars()
        .map(|c| match c {
            '+' => 'p',
            c if c.is_ascii_alphanumeric() || c == '-' || c == '_' => c,
            _ => '_',
        })
        .collect();
    root.join("variants").join(slug)
}

fn run_variant(cfg: &RunConfig, name: &str, flags: AblationFlags, eval_name: &str) -> CliResult<AblationRow> {
    let started = Instant::now();
    let mut vcfg = cfg.clone();
    vcfg.model.flags = flags;
    vcfg.output_dir = variant_dir(&cfg.output_dir, name);
    let summary = train_run(&vcfg, &Resume::Fresh)?;
    let (net, mut store) = load_checkpoint(&summary.checkpoint)?.restore()?;

    let set = cfg.data.root.join(eval_name);
    let pred_dir = vcfg.output_dir.join("pred");
    let inferred = infer_dir(&net, &mut store, &set.join("images"), &pred_dir, cfg.input_size())?;
    if let Some((path, msg)) = inferred.failed.first() {
        return Err(CliError::failure(format!("inference failed on {}: {msg}", path.display())));
    }
    let metrics = evaluate(eval_name, &pred_dir, &set.join("masks"))?;
    write_report(&metrics, &vcfg.output_dir.join("report.json"))?;
    Ok(AblationRow {
        name: name.to_owned(),
        flags,
        mae: metrics.mae,
        max_f: metrics.max_f,
        s_measure: metrics.s_measure,
        final_dominant_loss: summary.log.last().map_or(f64::NAN, |r| r.loss_dom),
        seconds: started.elapsed().as_secs_f64(),
    })
}
