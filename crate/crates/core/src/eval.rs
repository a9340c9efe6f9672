//! Evaluation against ground truth and single-image inference.

use std::path::{Path, PathBuf};
use std::thread;

use crate::data::{load_gray, load_rgb, pseudo_infrared, save_image, Sample};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, ImageMetrics};
use crate::tensor::Tensor;
use crate::train::Networks;

/// Model output and identity baseline (input taken as the answer).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub model: EvalReport,
    pub baseline: EvalReport,
}

fn worker_count(items: usize) -> usize {
    thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items)
        .max(1)
}

/// Applies `f` to every item on scoped worker threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = worker_count(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Runs the model on every sample and scores it and the identity baseline.
/// Full-reference metrics are reported only when every sample has ground truth.
pub fn evaluate(nets: &Networks, samples: &[Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Manifest("nothing to evaluate".into()));
    }
    let pairs = par_map(samples, |s| {
        let pred = nets.remove(&s.visible, &s.infrared)?;
        let model = ImageMetrics::compute(&pred, s.gt.as_ref(), &s.mask)?;
        let baseline = ImageMetrics::compute(&s.visible, s.gt.as_ref(), &s.mask)?;
        Ok((model, baseline))
    })?;
    let (model, baseline): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(Evaluation {
        model: EvalReport::aggregate(&model)?,
        baseline: EvalReport::aggregate(&baseline)?,
    })
}

/// `<dir>/<stem>.deshadow.png` for an input image path.
pub fn output_path(image: &Path) -> PathBuf {
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    image.with_file_name(format!("{stem}.deshadow.png"))
}

/// Removes shadows from one image file and writes the result next to it.
/// Returns the output path and the unquantised prediction.
pub fn infer_file(
    nets: &Networks,
    image: &Path,
    infrared: Option<&Path>,
) -> Result<(PathBuf, Tensor)> {
    let visible = load_rgb(image)?;
    let ir = match infrared {
        Some(p) => {
            let ir = load_gray(p)?;
            if ir.shape()[1..] != visible.shape()[1..] {
                return Err(Error::ShapeMismatch {
                    op: "infer",
                    lhs: ir.shape().to_vec(),
                    rhs: visible.shape().to_vec(),
                });
            }
            ir
        }
        None => pseudo_infrared(&visible),
    };
    let pred = nets.remove(&visible, &ir)?;
    let out = output_path(image);
    save_image(&out, &pred)?;
    Ok((out, pred))
}
