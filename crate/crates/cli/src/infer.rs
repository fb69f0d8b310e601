use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use gcpa_core::data::{preprocess_eval, resize_map, write_saliency_png};
use gcpa_core::network::Gcpa;
use gcpa_core::params::ParamStore;
use gcpa_core::trainer::load_checkpoint;
use gcpa_core::{Result, Tensor};

use crate::status::{CliError, CliResult, Status};

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Clone, Debug, Default)]
pub struct InferSummary {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
    pub failed: Vec<(PathBuf, String)>,
}

impl InferSummary {
    pub fn status(&self) -> Status {
        if self.failed.is_empty() {
            Status::Success
        } else {
            Status::Partial
        }
    }
}

/// Runs a checkpoint over every image in `input`. `size` defaults to the
/// training crop stored in the checkpoint.
pub fn cmd_infer(checkpoint: &Path, input: &Path, output: &Path, size: Option<usize>) -> CliResult<Status> {
    if !checkpoint.is_file() {
        return Err(CliError::usage(format!("checkpoint not found: {}", checkpoint.display())));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let (net, mut store) = ckpt.restore()?;
    let side = size.unwrap_or(ckpt.train.augment.crop);
    let summary = infer_dir(&net, &mut store, input, output, side)?;
    log::info!(
        "{} maps written to {}, {} skipped, {} failed",
        summary.written.len(),
        output.display(),
        summary.skipped.len(),
        summary.failed.len()
    );
    Ok(summary.status())
}

/// Writes `<output>/<stem>.png` for each image in `input`, at the image's
/// own size. Files with other extensions are skipped.
pub fn infer_dir(net: &Gcpa, store: &mut ParamStore, input: &Path, output: &Path, side: usize) -> CliResult<InferSummary> {
    let divisor = net.config().backbone.divisor();
    if side == 0 || side % divisor != 0 {
        return Err(CliError::usage(format!("inference size {side} must be a positive multiple of {divisor}")));
    }
    let entries = std::fs::read_dir(input)
        .map_err(|e| CliError::usage(format!("cannot read input directory {}: {e}", input.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    std::fs::create_dir_all(output).map_err(|e| CliError::io(output, e))?;

    let mut summary = InferSummary::default();
    let mut stems = BTreeSet::new();
    for path in files {
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if !is_image {
            log::warn!("skipping {}: not a jpg or png image", path.display());
            summary.skipped.push(path);
            continue;
        }
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        if !stems.insert(stem.clone()) {
            let msg = format!("another image already produced {stem}.png");
            log::error!("{}: {msg}", path.display());
            summary.failed.push((path, msg));
            continue;
        }
        let target = output.join(format!("{stem}.png"));
        match predict_file(net, store, &path, side, &target) {
            Ok(()) => summary.written.push(target),
            Err(e) => {
                log::error!("{}: {e}", path.display());
                summary.failed.push((path, e.to_string()));
            }
        }
    }
    if summary.written.is_empty() && summary.failed.is_empty() {
        return Err(CliError::usage(format!("no images found in {}", input.display())));
    }
    Ok(summary)
}

/// Predicts one file and writes its map at the original resolution.
pub fn predict_file(net: &Gcpa, store: &mut ParamStore, path: &Path, side: usize, target: &Path) -> Result<()> {
    let input = preprocess_eval(path, side)?;
    let batch = Tensor::stack(&[input.image])?;
    let probs = net.predict(store, &batch)?;
    let (h, w) = input.original_size;
    let map = resize_map(probs.data(), side, side, h, w)?;
    write_saliency_png(target, &map, h, w)
}
