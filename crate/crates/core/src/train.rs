//! Optimization harness: random crops, mini-batch Adam and telemetry.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::bayes::BayesParams;
use crate::error::{Error, Result};
use crate::net::{full_forward, ModelParams, NetConfig};
use crate::scene::{GrayImage, Point, PointAnnotations, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Side of the square training crop.
    pub crop: usize,
    pub epochs: usize,
    pub bayes: BayesParams,
    pub net: NetConfig,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            crop: 64,
            epochs: 30,
            bayes: BayesParams::default(),
            net: NetConfig::default(),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so that a step can be a no-op.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!("learning rate {} must be >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        let stride = self.net.stride();
        if self.crop == 0 || !self.crop.is_multiple_of(stride) {
            return Err(Error::Argument(format!(
                "crop {} must be a positive multiple of {stride}",
                self.crop
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Argument("gradient clip must be positive".into()));
        }
        self.bayes.validate()?;
        self.net.validate()
    }
}

/// Square window with top-left pixel `(x0, y0)`. Heads inside the window are
/// shifted into crop coordinates; the rest are dropped.
pub fn crop_at(scene: &Scene, x0: usize, y0: usize, size: usize) -> Result<Scene> {
    let (h, w) = (scene.image.height(), scene.image.width());
    if size == 0 || x0 + size > w || y0 + size > h {
        return Err(Error::Argument(format!(
            "crop {size}x{size} at ({x0}, {y0}) does not fit a {h}x{w} image"
        )));
    }
    let image = GrayImage::from_fn(size, size, |r, c| scene.image.get(y0 + r, x0 + c))?;
    let (fx, fy, end_x, end_y) = (x0 as f64, y0 as f64, (x0 + size) as f64, (y0 + size) as f64);
    let points = scene
        .annotations
        .points()
        .iter()
        .filter(|p| p.x >= fx && p.x < end_x && p.y >= fy && p.y < end_y)
        .map(|p| Point::new(p.x - fx, p.y - fy))
        .collect();
    let density = match &scene.density {
        Some(d) => Some(d.crop(y0, x0, size, size)?),
        None => None,
    };
    Scene::new(image, PointAnnotations::new(points)?, density)
}

/// Uniformly placed square crop.
pub fn random_crop<R: Rng>(scene: &Scene, size: usize, rng: &mut R) -> Result<Scene> {
    let (h, w) = (scene.image.height(), scene.image.width());
    if size == 0 || size > h || size > w {
        return Err(Error::Argument(format!(
            "crop {size} is larger than the {h}x{w} image"
        )));
    }
    let x0 = rng.random_range(0..=w - size);
    let y0 = rng.random_range(0..=h - size);
    crop_at(scene, x0, y0, size)
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        let zeros: BTreeMap<_, _> = params
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with an already averaged gradient (parameter name order).
    fn apply(&mut self, params: &mut ModelParams<f32>, grads: &[Vec<f64>], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for ((name, p), g) in params.iter_mut().zip(grads) {
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let step = cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                *w = (*w as f64 - step) as f32;
            }
        }
    }
}

/// Loss, counts and parameter gradients for one sample.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: f64,
    pub predicted: f64,
    pub ground_truth: f64,
    /// One buffer per parameter, in name order.
    pub grads: Vec<Vec<f32>>,
}

pub fn sample_gradients(
    params: &ModelParams<f32>,
    scene: &Scene,
    cfg: &TrainConfig,
) -> Result<SampleGrad> {
    let mut tape = Tape::<f32>::new();
    let pv = params.bind(&mut tape, true);
    let x = tape.constant(scene.image.to_tensor());
    let out = full_forward(&mut tape, x, &scene.annotations, &pv, &cfg.net, &cfg.bayes)?;
    let loss = tape.value(out.loss).item() as f64;
    let predicted = tape.value(out.density).data().iter().map(|&v| v as f64).sum();
    if !loss.is_finite() {
        return Ok(SampleGrad {
            loss,
            predicted,
            ground_truth: scene.count() as f64,
            grads: Vec::new(),
        });
    }
    tape.backward(out.loss)?;
    let grads = pv
        .iter()
        .map(|(_, &v)| tape.grad(v).expect("trainable parameter").into_data())
        .collect();
    Ok(SampleGrad {
        loss,
        predicted,
        ground_truth: scene.count() as f64,
        grads,
    })
}

/// Per-epoch telemetry.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean absolute count error over the epoch's training crops.
    pub mae_train: f64,
    /// Mean over batches of the gradient norm restricted to priority-path parameters.
    pub priority_grad_norm: f64,
}

impl EpochStats {
    pub fn telemetry_line(&self) -> String {
        format!(
            "epoch={} loss={:.6} mae_train={:.6}",
            self.epoch, self.mean_loss, self.mae_train
        )
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de_d00d_f00d);
    rng.set_stream(epoch as u64);
    rng
}

/// One shuffled pass over `data`. Deterministic in `(cfg.seed, epoch)`;
/// `parallel` only changes scheduling, gradients are reduced in batch order.
pub fn train_epoch(
    params: &mut ModelParams<f32>,
    opt: &mut AdamState,
    data: &[Scene],
    cfg: &TrainConfig,
    epoch: usize,
    parallel: bool,
) -> Result<EpochStats> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);

    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let prio_mask: Vec<bool> = names.iter().map(|n| cfg.net.is_priority_path(n)).collect();
    let (mut loss_sum, mut abs_err_sum, mut prio_norm_sum) = (0.0, 0.0, 0.0);
    let mut batches = 0;

    for batch in order.chunks(cfg.batch_size) {
        let crops: Vec<(usize, Scene)> = batch
            .iter()
            .map(|&i| Ok((i, random_crop(&data[i], cfg.crop, &mut rng)?)))
            .collect::<Result<_>>()?;
        let run = |(i, s): &(usize, Scene)| {
            sample_gradients(params, s, cfg).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("sample {i}: {m}")),
                other => other,
            })
        };
        let results: Vec<SampleGrad> = if parallel {
            crops.par_iter().map(run).collect::<Result<_>>()?
        } else {
            crops.iter().map(run).collect::<Result<_>>()?
        };

        let mut grads: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        for ((i, _), r) in crops.iter().zip(&results) {
            let finite = r.loss.is_finite()
                && r.grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient on sample {i} in epoch {epoch}"
                )));
            }
            loss_sum += r.loss;
            abs_err_sum += (r.predicted - r.ground_truth).abs();
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v as f64;
                }
            }
        }
        let scale = 1.0 / results.len() as f64;
        grads.iter_mut().flatten().for_each(|v| *v *= scale);

        let norm_of = |mask: &dyn Fn(usize) -> bool| -> f64 {
            grads
                .iter()
                .enumerate()
                .filter(|(k, _)| mask(*k))
                .flat_map(|(_, g)| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        };
        prio_norm_sum += norm_of(&|k| prio_mask[k]);
        let total = norm_of(&|_| true);
        if total > cfg.grad_clip {
            let s = cfg.grad_clip / total;
            grads.iter_mut().flatten().for_each(|v| *v *= s);
        }
        opt.apply(params, &grads, cfg);
        batches += 1;
    }
    let n = data.len() as f64;
    Ok(EpochStats {
        epoch,
        mean_loss: loss_sum / n,
        mae_train: abs_err_sum / n,
        priority_grad_norm: prio_norm_sum / batches as f64,
    })
}

/// Runs `cfg.epochs` epochs (numbered from 1), reporting each to `on_epoch`.
pub fn train(
    params: &mut ModelParams<f32>,
    data: &[Scene],
    cfg: &TrainConfig,
    parallel: bool,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let mut opt = AdamState::new(params);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let stats = train_epoch(params, &mut opt, data, cfg, epoch, parallel)?;
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with(points: &[(f64, f64)], size: usize) -> Scene {
        let image = GrayImage::from_fn(size, size, |r, c| ((r * size + c) % 7) as f64 / 7.0).unwrap();
        let ann = PointAnnotations::new(points.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap();
        Scene::new(image, ann, None).unwrap()
    }

    #[test]
    fn full_size_crop_is_identity() {
        let s = scene_with(&[(1.0, 2.0), (30.5, 12.25)], 32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_crop(&s, 32, &mut rng).unwrap(), s);
    }

    #[test]
    fn crop_shifts_and_filters_heads() {
        let s = scene_with(&[(10.0, 10.0), (2.0, 2.0), (24.0, 9.0)], 32);
        let c = crop_at(&s, 8, 8, 16).unwrap();
        assert_eq!(c.annotations.points(), &[Point::new(2.0, 2.0)]);
        assert_eq!(c.image.get(0, 0), s.image.get(8, 8));
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let s = scene_with(&[], 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(random_crop(&s, 24, &mut rng), Err(Error::Argument(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { crop: 60, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
    }
}
