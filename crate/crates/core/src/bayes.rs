//! Bayesian point-supervision loss.
//!
//! Each pixel `x_m` is softly assigned to the annotated heads `y_1..y_N` and
//! to a background label `y_0` through Gaussian likelihoods with equal priors:
//!
//! ```text
//! p(x_m | y_n) ∝ exp(−‖x_m − y_n‖² / 2δ²)
//! p(x_m | y_0) ∝ exp(−(d − ‖x_m − y_n^m‖)² / 2δ²)      y_n^m = nearest head
//! p(y_n | x_m) = p(x_m | y_n) / (Σ_k p(x_m | y_k) + p(x_m | y_0))
//! ```
//!
//! Expected counts are posterior-weighted density sums and the loss is
//! `Σ_n |1 − E[c_n]| + |0 − E[c_0]|`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scene::{DensityMap, Point, PointAnnotations};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesParams {
    /// Gaussian spread δ in pixels, used as written in the exponent `2δ²`.
    pub delta: f64,
    /// Background margin as a fraction of the shorter crop side.
    pub d_ratio: f64,
}

impl Default for BayesParams {
    fn default() -> Self {
        Self {
            delta: 8.0,
            d_ratio: 0.1,
        }
    }
}

impl BayesParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Argument(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.d_ratio > 0.0 && self.d_ratio < 1.0) {
            return Err(Error::Argument(format!(
                "d_ratio must lie in (0, 1), got {}",
                self.d_ratio
            )));
        }
        Ok(())
    }

    /// Background margin `d` in pixels for a `height x width` crop.
    pub fn margin(&self, height: usize, width: usize) -> f64 {
        self.d_ratio * height.min(width) as f64
    }
}

/// Pixel centres of an `height x width` raster in row-major order.
pub fn pixel_grid(height: usize, width: usize) -> Vec<Point> {
    (0..height * width)
        .map(|i| Point::new((i % width) as f64, (i / width) as f64))
        .collect()
}

fn gauss_norm(delta: f64) -> f64 {
    1.0 / ((2.0 * std::f64::consts::PI).sqrt() * delta)
}

fn check_inputs(pixels: &[Point], delta: f64) -> Result<()> {
    if pixels.is_empty() {
        return Err(Error::Argument("pixel list is empty".into()));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Argument(format!("delta must be positive, got {delta}")));
    }
    Ok(())
}

/// Index of and distance to the nearest head; ties go to the lower index.
pub fn nearest_head(p: &Point, heads: &[Point]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, h) in heads.iter().enumerate() {
        let d2 = p.dist2(h);
        if best.is_none_or(|(_, b)| d2 < b) {
            best = Some((i, d2));
        }
    }
    best.map(|(i, d2)| (i, d2.sqrt()))
}

/// Foreground likelihoods `p(x_m | y_n)` as an `N x M` matrix.
pub fn likelihood_fg(pixels: &[Point], heads: &PointAnnotations, delta: f64) -> Result<Tensor<f64>> {
    check_inputs(pixels, delta)?;
    let norm = gauss_norm(delta);
    let heads = heads.points();
    let m = pixels.len();
    Ok(Tensor::from_fn(vec![heads.len(), m], |k| {
        let d2 = pixels[k % m].dist2(&heads[k / m]);
        norm * (-d2 / (2.0 * delta * delta)).exp()
    }))
}

/// Background likelihoods `p(x_m | y_0)`, one per pixel.
pub fn likelihood_bg(
    pixels: &[Point],
    heads: &PointAnnotations,
    delta: f64,
    d: f64,
) -> Result<Vec<f64>> {
    check_inputs(pixels, delta)?;
    if heads.is_empty() {
        return Err(Error::Argument(
            "background likelihood is undefined without heads".into(),
        ));
    }
    if !(d > 0.0) {
        return Err(Error::Argument(format!("margin d must be positive, got {d}")));
    }
    let norm = gauss_norm(delta);
    Ok(pixels
        .iter()
        .map(|p| {
            let (_, dist) = nearest_head(p, heads.points()).expect("heads non-empty");
            norm * (-(d - dist).powi(2) / (2.0 * delta * delta)).exp()
        })
        .collect())
}

/// Label posteriors per pixel: rows `0..N` are heads, row `N` is background.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorField {
    heads: usize,
    pixels: usize,
    probs: Vec<f64>,
}

impl PosteriorField {
    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    /// Posterior of label `row` at pixel `m`; `row == heads()` is background.
    pub fn get(&self, row: usize, m: usize) -> f64 {
        self.probs[row * self.pixels + m]
    }

    pub fn background(&self, m: usize) -> f64 {
        self.get(self.heads, m)
    }

    pub fn column_sum(&self, m: usize) -> f64 {
        (0..=self.heads).map(|r| self.get(r, m)).sum()
    }

    /// `(N + 1) x M` matrix.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_f64(vec![self.heads + 1, self.pixels], &self.probs)
    }

    /// Normalizes per-pixel log-likelihood columns with max subtraction.
    fn from_log_columns(heads: usize, pixels: usize, mut logs: Vec<f64>) -> Result<Self> {
        let rows = heads + 1;
        for m in 0..pixels {
            let max = (0..rows).map(|r| logs[r * pixels + m]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY || max.is_nan() {
                return Err(Error::Numeric(format!(
                    "pixel {m}: every label likelihood is zero"
                )));
            }
            let mut total = 0.0;
            for r in 0..rows {
                let v = (logs[r * pixels + m] - max).exp();
                logs[r * pixels + m] = v;
                total += v;
            }
            for r in 0..rows {
                logs[r * pixels + m] /= total;
            }
        }
        Ok(Self {
            heads,
            pixels,
            probs: logs,
        })
    }
}

/// Posteriors from explicit likelihoods `fg: [N x M]` and `bg: [M]`.
pub fn posteriors(fg: &Tensor<f64>, bg: &[f64]) -> Result<PosteriorField> {
    let [heads, pixels] = *fg.shape() else {
        return Err(Error::Shape(format!("foreground must be N x M, got {:?}", fg.shape())));
    };
    if bg.len() != pixels {
        return Err(Error::Shape(format!(
            "background has {} pixels, foreground {pixels}",
            bg.len()
        )));
    }
    let logs = fg.data().iter().chain(bg).map(|v| v.ln()).collect();
    PosteriorField::from_log_columns(heads, pixels, logs)
}

/// Posteriors computed directly in log space. The shared Gaussian
/// prefactor cancels and is omitted. With no heads every pixel is background.
pub fn posterior_field(
    pixels: &[Point],
    heads: &PointAnnotations,
    delta: f64,
    d: f64,
) -> Result<PosteriorField> {
    check_inputs(pixels, delta)?;
    let m = pixels.len();
    if heads.is_empty() {
        return Ok(PosteriorField {
            heads: 0,
            pixels: m,
            probs: vec![1.0; m],
        });
    }
    let inv = 1.0 / (2.0 * delta * delta);
    let hp = heads.points();
    let mut logs = Vec::with_capacity((hp.len() + 1) * m);
    for h in hp {
        logs.extend(pixels.iter().map(|p| -p.dist2(h) * inv));
    }
    logs.extend(pixels.iter().map(|p| {
        let (_, dist) = nearest_head(p, hp).expect("heads non-empty");
        -(d - dist).powi(2) * inv
    }));
    PosteriorField::from_log_columns(hp.len(), m, logs)
}

/// `(E[c_1..c_N], E[c_0])`.
pub fn expected_counts(post: &PosteriorField, dmap: &DensityMap) -> Result<(Vec<f64>, f64)> {
    let d = dmap.values();
    if d.len() != post.pixels {
        return Err(Error::Shape(format!(
            "density has {} pixels, posterior field {}",
            d.len(),
            post.pixels
        )));
    }
    let row = |r: usize| -> f64 {
        let mut acc = 0.0;
        for (m, &dv) in d.iter().enumerate() {
            acc += post.get(r, m) * dv;
        }
        acc
    };
    Ok(((0..post.heads).map(row).collect(), row(post.heads)))
}

/// Loss for a density map `[H, W]` or `[1, H, W]` on the tape, with the
/// background margin derived from the map's shorter side.
pub fn bayes_loss<S: Scalar>(
    tape: &mut Tape<S>,
    dmap: Var,
    heads: &PointAnnotations,
    params: &BayesParams,
) -> Result<Var> {
    params.validate()?;
    let (h, w) = tape.value(dmap).spatial()?;
    let pixels = pixel_grid(h, w);
    bayes_loss_on(tape, dmap, &pixels, heads, params.delta, params.margin(h, w))
}

/// Loss against explicit pixel locations (one per density element, row-major).
pub fn bayes_loss_on<S: Scalar>(
    tape: &mut Tape<S>,
    dmap: Var,
    pixels: &[Point],
    heads: &PointAnnotations,
    delta: f64,
    d: f64,
) -> Result<Var> {
    let value = tape.value(dmap);
    if value.has_nan() {
        return Err(Error::Numeric("density map contains NaN".into()));
    }
    if value.numel() != pixels.len() {
        return Err(Error::Shape(format!(
            "density has {} values for {} pixels",
            value.numel(),
            pixels.len()
        )));
    }
    let post = posterior_field(pixels, heads, delta, d)?;
    let m = pixels.len();
    let p = tape.constant(post.to_tensor());
    let flat = tape.reshape(dmap, vec![m, 1])?;
    let expected = tape.matmul(p, flat)?;
    let mut target = vec![S::one(); post.heads + 1];
    target[post.heads] = S::zero();
    let target = tape.constant(Tensor::new(vec![post.heads + 1, 1], target)?);
    let gap = tape.sub(target, expected)?;
    let dist = tape.abs(gap)?;
    tape.sum(dist)
}
