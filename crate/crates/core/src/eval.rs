//! Count metrics and inference helpers.
//!
//! `MAE = (1/N) Σ |C_i − C_i^GT|` and `MSE = sqrt((1/N) Σ |C_i − C_i^GT|²)`.
//! The latter is a root-mean-square, reported under the conventional name.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::load_checkpoint;
use crate::datagen::{load_split, Split};
use crate::error::{Error, Result};
use crate::net::{predict, ModelParams, NetConfig};
use crate::scene::{DensityMap, GrayImage, Scene};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalEntry {
    pub predicted: f64,
    pub ground_truth: f64,
    pub abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
    pub mae: f64,
    pub mse: f64,
}

impl EvalReport {
    /// Builds a report from `(predicted, ground truth)` pairs.
    pub fn from_counts(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Argument("cannot evaluate an empty split".into()));
        }
        let entries: Vec<EvalEntry> = pairs
            .iter()
            .map(|&(predicted, ground_truth)| EvalEntry {
                predicted,
                ground_truth,
                abs_error: (predicted - ground_truth).abs(),
            })
            .collect();
        let (mae, mse) = aggregate(&entries);
        Ok(Self { entries, mae, mse })
    }

    pub fn n(&self) -> usize {
        self.entries.len()
    }

    /// `(MAE, MSE)` recomputed from the per-image entries.
    pub fn recompute(&self) -> (f64, f64) {
        aggregate(&self.entries)
    }

    pub fn summary_line(&self) -> String {
        format!("N={} MAE={:.6} MSE={:.6}", self.n(), self.mae, self.mse)
    }
}

fn aggregate(entries: &[EvalEntry]) -> (f64, f64) {
    let n = entries.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for e in entries {
        abs += e.abs_error;
        sq += e.abs_error * e.abs_error;
    }
    (abs / n, (sq / n).sqrt())
}

/// Predicted counts for `scenes` in order.
pub fn evaluate(
    params: &ModelParams<f32>,
    cfg: &NetConfig,
    scenes: &[Scene],
    parallel: bool,
) -> Result<EvalReport> {
    let run = |s: &Scene| -> Result<(f64, f64)> {
        let (density, _) = predict(params, &s.image, cfg)?;
        Ok((density.count(), s.count() as f64))
    };
    let pairs: Vec<(f64, f64)> = if parallel {
        scenes.par_iter().map(run).collect::<Result<_>>()?
    } else {
        scenes.iter().map(run).collect::<Result<_>>()?
    };
    EvalReport::from_counts(&pairs)
}

pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest: &Path,
    split: Split,
    parallel: bool,
) -> Result<EvalReport> {
    let (params, cfg) = load_checkpoint(checkpoint)?;
    let scenes = load_split(manifest, split)?;
    evaluate(&params, &cfg.net, &scenes, parallel)
}

/// Mirror index into `0..n` without repeating the edge pixel.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Reflect-pads bottom and right so both sides are multiples of `multiple`
/// and at least `min_side`.
pub fn reflect_pad(img: &GrayImage, multiple: usize, min_side: usize) -> Result<GrayImage> {
    let target = |n: usize| n.max(min_side).div_ceil(multiple) * multiple;
    let (h, w) = (img.height(), img.width());
    GrayImage::from_fn(target(h), target(w), |r, c| img.get(reflect(r, h), reflect(c, w)))
}

/// Density for `img`. With `pad`, the image is reflect-padded to a valid
/// size and the density cropped back to the original shape.
pub fn infer_density(
    params: &ModelParams<f32>,
    cfg: &NetConfig,
    img: &GrayImage,
    pad: bool,
) -> Result<DensityMap> {
    if !pad {
        return Ok(predict(params, img, cfg)?.0);
    }
    let padded = reflect_pad(img, cfg.stride(), 16)?;
    let (density, _) = predict(params, &padded, cfg)?;
    density.crop(0, 0, img.height(), img.width())
}
