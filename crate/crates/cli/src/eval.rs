use std::path::Path;

use gcpa_core::metrics::{evaluate, write_report, MetricsReport};

use crate::status::{CliError, CliResult, Status};

pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, report_path: &Path, dataset: Option<&str>) -> CliResult<Status> {
    let name = dataset.map_or_else(|| dataset_name(gt_dir), str::to_owned);
    let report = evaluate(&name, pred_dir, gt_dir)?;
    if let Some(dir) = report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_report(&report, report_path)?;
    print!("{}", summary_table(std::slice::from_ref(&report)));
    Ok(Status::Success)
}

/// `<root>/<name>/masks` gives `name`; any other directory gives its own name.
pub fn dataset_name(gt_dir: &Path) -> String {
    let own = gt_dir.file_name().map(|n| n.to_string_lossy().into_owned());
    match own.as_deref() {
        Some("masks") | Some("gt") => gt_dir
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        Some(n) => n.to_owned(),
        None => "dataset".into(),
    }
}

/// One row per report: `dataset  F_β  S_m  MAE`, three decimals.
pub fn summary_table(reports: &[MetricsReport]) -> String {
    let width = reports.iter().map(|r| r.dataset.chars().count()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<width$}  {:>5}  {:>5}  {:>5}\n", "dataset", "F_β", "S_m", "MAE");
    for r in reports {
        out.push_str(&format!(
            "{:<width$}  {:>5.3}  {:>5.3}  {:>5.3}\n",
            r.dataset, r.max_f, r.s_measure, r.mae
        ));
    }
    out
}
