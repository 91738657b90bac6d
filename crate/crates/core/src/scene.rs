//! Domain rasters and annotations shared by every other module.
//!
//! Coordinates follow the (x = column, y = row) convention with the origin at
//! the centre of the top-left pixel, so pixel `(row, col)` sits at
//! `x = col, y = row`.

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

fn check_shape(what: &str, height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Shape(format!(
            "{what} must be at least 1x1, got {height}x{width}"
        )));
    }
    if height * width != len {
        return Err(Error::Shape(format!(
            "{what} of {height}x{width} needs {} values, got {len}",
            height * width
        )));
    }
    Ok(())
}

fn check_unit_range(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::Argument(format!(
            "{what} value {} at index {i} is outside [0, 1]",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Single-channel raster with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        check_shape("image", height, width, pixels.len())?;
        check_unit_range("pixel", &pixels)?;
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let pixels = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Round-trips through 8-bit quantization, matching what `save_image` writes.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|&p| quantize(p) as f64 / 255.0)
                .collect(),
        }
    }

    /// `[1, H, W]` tensor view for the network.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_f64(vec![1, self.height, self.width], &self.pixels)
    }

    /// Clamps into `[0, 1]` before building the image.
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let (h, w) = t.spatial()?;
        let pixels = t
            .data()
            .iter()
            .map(|v| v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0))
            .collect();
        Self::new(h, w, pixels)
    }
}

pub(crate) fn quantize(p: f64) -> u8 {
    (p * 255.0).round().clamp(0.0, 255.0) as u8
}

/// A single annotated head, in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Head points for one image. May be empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointAnnotations {
    points: Vec<Point>,
}

impl PointAnnotations {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() || p.x < 0.0 || p.y < 0.0 {
                return Err(Error::Argument(format!(
                    "point {i} ({}, {}) must be finite and non-negative",
                    p.x, p.y
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.x >= width as f64 || p.y >= height as f64 {
                return Err(Error::Argument(format!(
                    "point {i} ({}, {}) lies outside a {height}x{width} image",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

/// Image-sized field in `[0, 1]` marking candidate crowd regions.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl PriorityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_shape("priority map", height, width, values.len())?;
        check_unit_range("priority", &values)?;
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_f64(vec![1, self.height, self.width], &self.values)
    }

    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let (h, w) = t.spatial()?;
        Self::new(h, w, t.to_f64_vec())
    }

    pub fn as_image(&self) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self.values.clone(),
        }
    }
}

/// Non-negative per-pixel density; its sum is the predicted count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_shape("density map", height, width, values.len())?;
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Numeric(format!(
                "density value {} at index {i} must be finite and non-negative",
                values[i]
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn count(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_f64(vec![1, self.height, self.width], &self.values)
    }

    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let (h, w) = t.spatial()?;
        Self::new(h, w, t.to_f64_vec())
    }

    /// Top-left `height x width` window.
    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Result<Self> {
        if row0 + height > self.height || col0 + width > self.width {
            return Err(Error::Argument(format!(
                "window {height}x{width} at ({row0}, {col0}) exceeds {}x{} map",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width);
        for r in row0..row0 + height {
            let start = r * self.width + col0;
            values.extend_from_slice(&self.values[start..start + width]);
        }
        Self::new(height, width, values)
    }

    /// Max-normalized grayscale rendering for inspection.
    pub fn render(&self) -> GrayImage {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let pixels = if max > 0.0 {
            self.values.iter().map(|v| v / max).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        GrayImage {
            height: self.height,
            width: self.width,
            pixels,
        }
    }
}

/// An image with its head annotations and, optionally, a reference density.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: GrayImage,
    pub annotations: PointAnnotations,
    pub density: Option<DensityMap>,
}

impl Scene {
    pub fn new(
        image: GrayImage,
        annotations: PointAnnotations,
        density: Option<DensityMap>,
    ) -> Result<Self> {
        annotations.check_bounds(image.height(), image.width())?;
        if let Some(d) = &density {
            if d.height() != image.height() || d.width() != image.width() {
                return Err(Error::Shape(format!(
                    "density {}x{} does not match image {}x{}",
                    d.height(),
                    d.width(),
                    image.height(),
                    image.width()
                )));
            }
        }
        Ok(Self {
            image,
            annotations,
            density,
        })
    }

    pub fn count(&self) -> usize {
        self.annotations.len()
    }
}

/// Sum of isotropic Gaussians, one per head, each renormalized to unit mass
/// over the raster so border heads still contribute exactly one.
pub fn rasterize_density(
    ann: &PointAnnotations,
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<DensityMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("sigma must be positive, got {sigma}")));
    }
    let mut values = vec![0.0; height * width];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for p in ann.points() {
        let gx: Vec<f64> = (0..width)
            .map(|c| (-(c as f64 - p.x).powi(2) * inv).exp())
            .collect();
        let gy: Vec<f64> = (0..height)
            .map(|r| (-(r as f64 - p.y).powi(2) * inv).exp())
            .collect();
        // Separable kernel: total mass is the product of the marginal sums.
        let mass: f64 = gx.iter().sum::<f64>() * gy.iter().sum::<f64>();
        if mass <= 0.0 {
            continue;
        }
        for (r, &wy) in gy.iter().enumerate() {
            let row = &mut values[r * width..(r + 1) * width];
            for (v, &wx) in row.iter_mut().zip(&gx) {
                *v += wy * wx / mass;
            }
        }
    }
    DensityMap::new(height, width, values)
}
