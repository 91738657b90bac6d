//! Deterministic synthetic crowd scenes.
//!
//! Heads are radially shaded bright discs whose radius grows towards the
//! bottom of the frame (perspective). Dimmer clutter blobs are drawn but not
//! annotated, and Gaussian pixel noise is added last. Every scene depends
//! only on `(seed, index)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{
    load_annotations, load_density, load_image, save_annotations, save_density, save_image,
};
use crate::scene::{rasterize_density, GrayImage, Point, PointAnnotations, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_heads: usize,
    pub max_heads: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub min_clutter: usize,
    pub max_clutter: usize,
    /// Gaussian width of the stored reference density.
    pub density_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_heads: 1,
            max_heads: 15,
            min_radius: 2.0,
            max_radius: 5.0,
            noise: 0.05,
            min_clutter: 0,
            max_clutter: 4,
            density_sigma: 2.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Argument("scene must be non-empty".into()));
        }
        if self.min_heads > self.max_heads || self.min_clutter > self.max_clutter {
            return Err(Error::Argument("count ranges need lo <= hi".into()));
        }
        if !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius) {
            return Err(Error::Argument(format!(
                "radius range [{}, {}] must satisfy 1 <= lo <= hi",
                self.min_radius, self.max_radius
            )));
        }
        let side = self.width.min(self.height) as f64;
        if self.max_radius >= side / 2.0 {
            return Err(Error::Argument(format!(
                "head radius {} must be below half the shorter side ({})",
                self.max_radius,
                side / 2.0
            )));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Argument(format!("noise {} must lie in [0, 1)", self.noise)));
        }
        if !(self.density_sigma > 0.0) {
            return Err(Error::Argument("density sigma must be positive".into()));
        }
        Ok(())
    }

    /// Perspective radius at row `y`: smallest at the top, largest at the bottom.
    fn radius_at(&self, y: f64) -> f64 {
        let t = if self.height > 1 { y / (self.height - 1) as f64 } else { 0.0 };
        self.min_radius + (self.max_radius - self.min_radius) * t
    }
}

/// Per-pixel brightness of the structures painted onto the background.
struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    /// Paints `profile(ρ/r)` inside an ellipse, keeping the brighter value.
    fn stamp(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, profile: impl Fn(f64) -> f64) {
        let r0 = (cy - ry).floor().max(0.0) as usize;
        let r1 = ((cy + ry).ceil() as usize).min(self.height - 1);
        let c0 = (cx - rx).floor().max(0.0) as usize;
        let c1 = ((cx + rx).ceil() as usize).min(self.width - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let u = (c as f64 - cx) / rx;
                let v = (r as f64 - cy) / ry;
                let rho2 = u * u + v * v;
                if rho2 <= 1.0 {
                    let px = &mut self.pixels[r * self.width + c];
                    *px = px.max(profile(rho2));
                }
            }
        }
    }
}

/// Keeps a disc of radius `r` inside `[0, side - 1]` when it fits, else centres it.
fn clamp_centre(v: f64, r: f64, side: usize) -> f64 {
    let hi = side as f64 - 1.0 - r;
    if r <= hi {
        v.clamp(r, hi)
    } else {
        (side as f64 - 1.0) / 2.0
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Renders scene `index` of the corpus described by `spec`.
pub fn gen_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    Ok(gen_scene_with_radii(spec, index)?.0)
}

/// Like [`gen_scene`], also returning each head's disc radius in annotation order.
pub fn gen_scene_with_radii(spec: &SceneSpec, index: u64) -> Result<(Scene, Vec<f64>)> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, index);
    let (w, h) = (spec.width, spec.height);
    let base = rng.random_range(0.05..0.15);
    let mut canvas = Canvas {
        width: w,
        height: h,
        pixels: vec![base; w * h],
    };

    let clutter = rng.random_range(spec.min_clutter..=spec.max_clutter);
    for _ in 0..clutter {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let rx = rng.random_range(2.0..6.0);
        let ry = rng.random_range(2.0..6.0);
        let level = base + rng.random_range(0.12..0.28);
        canvas.stamp(cx, cy, rx, ry, |rho2| level * (1.0 - 0.3 * rho2));
    }

    let n = rng.random_range(spec.min_heads..=spec.max_heads);
    let mut heads: Vec<(Point, f64)> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = None;
        for _attempt in 0..200 {
            let y = rng.random_range(0.0..=(h as f64 - 1.0));
            let r = (spec.radius_at(y) * rng.random_range(0.9..1.1))
                .clamp(spec.min_radius, spec.max_radius);
            let y = clamp_centre(y, r, h);
            let x = clamp_centre(rng.random_range(0.0..=(w as f64 - 1.0)), r, w);
            let candidate = (Point::new(x, y), r);
            let free = heads
                .iter()
                .all(|(p, pr)| p.dist2(&candidate.0).sqrt() >= 0.9 * (pr + r));
            pick = Some(candidate);
            if free {
                break;
            }
        }
        heads.push(pick.expect("at least one attempt"));
    }
    for (p, r) in &heads {
        let peak = rng.random_range(0.75..1.0);
        // Pixel-centred discs of radius < 1 would vanish; pad by half a pixel.
        let rr = r + 0.5;
        canvas.stamp(p.x, p.y, rr, rr, |rho2| peak * (0.6 + 0.4 * (1.0 - rho2)));
    }

    if spec.noise > 0.0 {
        let dist = Normal::new(0.0, spec.noise).expect("valid noise");
        for px in &mut canvas.pixels {
            *px += dist.sample(&mut rng);
        }
    }
    for px in &mut canvas.pixels {
        *px = px.clamp(0.0, 1.0);
    }

    let image = GrayImage::new(h, w, canvas.pixels)?;
    let radii = heads.iter().map(|&(_, r)| r).collect();
    let annotations = PointAnnotations::new(heads.into_iter().map(|(p, _)| p).collect())?;
    let density = rasterize_density(&annotations, h, w, spec.density_sigma)?;
    Ok((Scene::new(image, annotations, Some(density))?, radii))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub annotations: String,
    pub density: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

/// Dataset index. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<SplitCounts>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `n_train + n_test` scenes and `manifest.json` under `out_dir`.
/// Test scenes use indices `n_train..n_train + n_test`.
pub fn gen_dataset(spec: &SceneSpec, n_train: usize, n_test: usize, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let mut manifest = Manifest {
        train: Vec::with_capacity(n_train),
        test: Vec::with_capacity(n_test),
        counts: Some(SplitCounts {
            train: n_train,
            test: n_test,
        }),
    };
    for (split, range) in [(Split::Train, 0..n_train), (Split::Test, n_train..n_train + n_test)] {
        let dir = out_dir.join(split.name());
        mkdir(&dir)?;
        let scenes: Vec<Scene> = range
            .clone()
            .into_par_iter()
            .map(|i| gen_scene(spec, i as u64))
            .collect::<Result<_>>()?;
        for (i, scene) in range.zip(scenes) {
            let stem = format!("{}/scene_{i:05}", split.name());
            let entry = ManifestEntry {
                image: format!("{stem}.pgm"),
                annotations: format!("{stem}.json"),
                density: format!("{stem}.radm"),
            };
            save_image(&scene.image, out_dir.join(&entry.image))?;
            save_annotations(&scene.annotations, out_dir.join(&entry.annotations))?;
            let density = scene.density.as_ref().expect("generated scenes carry density");
            save_density(density, out_dir.join(&entry.density))?;
            match split {
                Split::Train => manifest.train.push(entry),
                Split::Test => manifest.test.push(entry),
            }
        }
    }
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Accepts either the manifest file or the directory holding it.
pub fn load_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        Error::parse(format!("{} line {}", file.display(), e.line()), e.to_string())
    })?;
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, root))
}

pub fn load_split(path: &Path, split: Split) -> Result<Vec<Scene>> {
    let (manifest, root) = load_manifest(path)?;
    let entries = match split {
        Split::Train => &manifest.train,
        Split::Test => &manifest.test,
    };
    entries
        .iter()
        .map(|e| {
            let image = load_image(root.join(&e.image))?;
            let annotations = load_annotations(root.join(&e.annotations))?;
            let density = load_density(root.join(&e.density))?;
            Scene::new(image, annotations, Some(density))
        })
        .collect()
}
