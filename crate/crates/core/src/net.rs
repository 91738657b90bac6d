//! Miniature two-pass counting network.
//!
//! Pass 1: a four-block convolutional backbone yields features at strides
//! 2, 4, 8, 8. A pooled-context head (adaptive average pooling onto several
//! grids) runs on the third block and a dilated-convolution head on the
//! fourth. A decoder fuses them back up to stride 2 by upsampling,
//! concatenation and 1x1 convolutions, and a sigmoid head produces the
//! full-resolution priority map. A learned multiple of the image is added to
//! its logits.
//!
//! Feedback: the image and priority map pass through the column-relevance
//! block, giving an enhanced image.
//!
//! Pass 2: the same backbone and decoder (or a separate copy in two-tower
//! mode) process the enhanced image. Sibling feature and attention heads are
//! multiplied, projected to one channel and upsampled. A learned multiple of
//! the enhanced image is added before a softplus gives the non-negative
//! density map.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::bayes::{bayes_loss, BayesParams};
use crate::error::{Error, Result};
use crate::region_aware::{ra_apply, RaConfig};
use crate::scene::{DensityMap, GrayImage, PointAnnotations, PriorityMap};

/// Initial bias of the density projection; softplus(-9) ≈ 1.2e-4 per pixel.
const DENSITY_BIAS: f64 = -9.0;

/// Initial gains of the image shortcuts into the priority and density logits.
const PRIORITY_SKIP_GAIN: f64 = 8.0;
const DENSITY_SKIP_GAIN: f64 = 8.0;

/// Name prefix of the pass-2 trunk in two-tower mode.
const SECOND_TOWER: &str = "p2.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Output channels of each backbone block.
    pub widths: Vec<usize>,
    /// Channels of the context heads and decoder.
    pub head_width: usize,
    /// Output grids of the pooled-context head.
    pub pool_grids: Vec<usize>,
    /// Dilation rates of the dilated-convolution head.
    pub dilations: Vec<usize>,
    pub ra: RaConfig,
    /// Separate backbone/decoder weights for the second pass.
    pub two_tower: bool,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32, 32],
            head_width: 16,
            pool_grids: vec![1, 2, 3, 6],
            dilations: vec![1, 2, 3, 4],
            ra: RaConfig::default(),
            two_tower: false,
            seed: 0,
        }
    }
}

impl NetConfig {
    /// Narrow variant that accepts 16x16 inputs; used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            widths: vec![2, 3, 4, 4],
            head_width: 3,
            pool_grids: vec![1, 2],
            dilations: vec![1, 2],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Argument(format!(
                "need at least 2 backbone blocks, got {}",
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) || self.head_width == 0 {
            return Err(Error::Argument("channel widths must be at least 1".into()));
        }
        if self.pool_grids.is_empty() || self.pool_grids.contains(&0) {
            return Err(Error::Argument("pool grids must be non-empty and positive".into()));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Argument("dilations must be non-empty and positive".into()));
        }
        self.ra.validate()
    }

    fn blocks(&self) -> usize {
        self.widths.len()
    }

    /// Overall downsampling factor; input sides must be multiples of it.
    pub fn stride(&self) -> usize {
        1 << (self.blocks() - 1)
    }

    /// Level (block index) at which the two context heads run.
    fn context_level(&self) -> usize {
        self.blocks() - 2
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let stride = self.stride();
        if height < 16 || width < 16 {
            return Err(Error::Shape(format!(
                "input {height}x{width} is smaller than 16x16"
            )));
        }
        if !height.is_multiple_of(stride) || !width.is_multiple_of(stride) {
            return Err(Error::Shape(format!(
                "input {height}x{width} must have sides divisible by {stride}; pad to {}x{}",
                height.div_ceil(stride) * stride,
                width.div_ceil(stride) * stride
            )));
        }
        let side = height.min(width) / stride;
        let grid = self.pool_grids.iter().max().copied().unwrap_or(1);
        if grid > side {
            return Err(Error::Shape(format!(
                "pool grid {grid} exceeds the {side}-pixel context feature map of a {height}x{width} input"
            )));
        }
        Ok(())
    }

    /// Parameters used only while producing the priority map.
    pub fn is_priority_path(&self, name: &str) -> bool {
        name.starts_with("prio.")
            || (self.two_tower && !name.starts_with(SECOND_TOWER) && !is_density_head(name))
    }

    /// `(name, shape, fan_in)` of every parameter, in a fixed order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let hw = self.head_width;
        let conv = |out: &mut Vec<_>, name: String, f: usize, c: usize, k: usize| {
            out.push((format!("{name}.w"), vec![f, c, k, k], c * k * k));
            out.push((format!("{name}.b"), vec![f], c * k * k));
        };
        let towers: &[&str] = if self.two_tower { &["", SECOND_TOWER] } else { &[""] };
        for prefix in towers {
            let mut cin = 1;
            for (b, &w) in self.widths.iter().enumerate() {
                conv(&mut out, format!("{prefix}enc{b}"), w, cin, 3);
                cin = w;
            }
            let lvl = self.context_level();
            let ctx_in = self.widths[lvl] * (1 + self.pool_grids.len());
            conv(&mut out, format!("{prefix}can"), hw, ctx_in, 1);
            for i in 0..self.dilations.len() {
                conv(&mut out, format!("{prefix}aspp{i}"), hw, self.widths[lvl + 1], 3);
            }
            conv(&mut out, format!("{prefix}aspp.proj"), hw, hw * self.dilations.len(), 1);
            conv(&mut out, format!("{prefix}dec{lvl}"), hw, 2 * hw, 1);
            for l in 0..lvl {
                conv(&mut out, format!("{prefix}dec{l}"), hw, hw + self.widths[l], 1);
            }
        }
        conv(&mut out, "prio".into(), 1, hw, 1);
        out.push(("prio.skip.w".into(), vec![1, 1, 1, 1], 1));
        conv(&mut out, "feat".into(), hw, hw, 1);
        conv(&mut out, "att".into(), hw, hw, 1);
        conv(&mut out, "fuse".into(), 1, hw, 1);
        out.push(("fuse.skip.w".into(), vec![1, 1, 1, 1], 1));
        out
    }
}

fn is_density_head(name: &str) -> bool {
    ["feat.", "att.", "fuse."].iter().any(|p| name.starts_with(p))
}

/// Named weights and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<S>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every tensor on `tape`.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    /// Checks that every parameter of `cfg` is present with the right shape.
    pub fn check_layout(&self, cfg: &NetConfig) -> Result<()> {
        for (name, shape, _) in cfg.layout() {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Argument(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Wraps handles registered by the caller, e.g. a mix of trainable and
    /// frozen parameters.
    pub fn new(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Fan-in scaled uniform initialization, `U(−√(6/fan_in), √(6/fan_in))` for
/// weights. Biases start at zero except the density projection, and both image
/// shortcuts start at a fixed positive gain.
pub fn init_params(cfg: &NetConfig) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, fan_in) in cfg.layout() {
        let t = if name.ends_with(".b") {
            let fill = if name == "fuse.b" { DENSITY_BIAS } else { 0.0 };
            Tensor::full(shape, fill as f32)
        } else if name == "fuse.skip.w" {
            Tensor::full(shape, DENSITY_SKIP_GAIN as f32)
        } else if name == "prio.skip.w" {
            Tensor::full(shape, PRIORITY_SKIP_GAIN as f32)
        } else {
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as f32)
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams { tensors })
}

fn conv<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    pv: &ParamVars,
    name: &str,
    dilation: usize,
) -> Result<Var> {
    let y = tape.conv2d(x, pv.get(&format!("{name}.w"))?, dilation)?;
    tape.add_channel_bias(y, pv.get(&format!("{name}.b"))?)
}

fn conv_relu<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    pv: &ParamVars,
    name: &str,
    dilation: usize,
) -> Result<Var> {
    let y = conv(tape, x, pv, name, dilation)?;
    tape.relu(y)
}

fn hw_of<S: Scalar>(tape: &Tape<S>, x: Var) -> (usize, usize) {
    let s = tape.shape(x);
    (s[1], s[2])
}

/// Backbone features, one per block. Exposed for stride bookkeeping.
pub fn backbone<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    pv: &ParamVars,
    cfg: &NetConfig,
    prefix: &str,
) -> Result<Vec<Var>> {
    let mut feats = Vec::with_capacity(cfg.blocks());
    let mut h = x;
    for b in 0..cfg.blocks() {
        h = conv_relu(tape, h, pv, &format!("{prefix}enc{b}"), 1)?;
        if b + 1 < cfg.blocks() {
            h = tape.avg_pool(h, 2)?;
        }
        feats.push(h);
    }
    Ok(feats)
}

/// Backbone, both context heads and the decoder; output at stride 2.
fn trunk<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    pv: &ParamVars,
    cfg: &NetConfig,
    prefix: &str,
) -> Result<Var> {
    let feats = backbone(tape, x, pv, cfg, prefix)?;
    let lvl = cfg.context_level();
    let base = feats[lvl];
    let (lh, lw) = hw_of(tape, base);

    let mut parts = vec![base];
    for &g in &cfg.pool_grids {
        let pooled = tape.adaptive_avg_pool(base, g)?;
        parts.push(tape.upsample_bilinear(pooled, lh, lw)?);
    }
    let stacked = tape.concat_channels(&parts)?;
    let ctx = conv_relu(tape, stacked, pv, &format!("{prefix}can"), 1)?;

    let mut branches = Vec::with_capacity(cfg.dilations.len());
    for (i, &rate) in cfg.dilations.iter().enumerate() {
        branches.push(conv_relu(tape, feats[lvl + 1], pv, &format!("{prefix}aspp{i}"), rate)?);
    }
    let stacked = tape.concat_channels(&branches)?;
    let deep = conv_relu(tape, stacked, pv, &format!("{prefix}aspp.proj"), 1)?;

    let stacked = tape.concat_channels(&[ctx, deep])?;
    let mut y = conv_relu(tape, stacked, pv, &format!("{prefix}dec{lvl}"), 1)?;
    for l in (0..lvl).rev() {
        let (fh, fw) = hw_of(tape, feats[l]);
        let up = tape.upsample_bilinear(y, fh, fw)?;
        let stacked = tape.concat_channels(&[up, feats[l]])?;
        y = conv_relu(tape, stacked, pv, &format!("{prefix}dec{l}"), 1)?;
    }
    Ok(y)
}

fn input_hw<S: Scalar>(tape: &Tape<S>, img: Var, cfg: &NetConfig) -> Result<(usize, usize)> {
    let (h, w) = match tape.shape(img) {
        [1, h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("network input must be [1, H, W], got {s:?}"))),
    };
    cfg.check_input(h, w)?;
    Ok((h, w))
}

/// Priority map `[1, H, W]` in `[0, 1]`. The logits are the upsampled decoder
/// projection plus a learned multiple of the input image.
pub fn forward_pass1<S: Scalar>(
    tape: &mut Tape<S>,
    img: Var,
    pv: &ParamVars,
    cfg: &NetConfig,
) -> Result<Var> {
    let (h, w) = input_hw(tape, img, cfg)?;
    let y = trunk(tape, img, pv, cfg, "")?;
    let logits = conv(tape, y, pv, "prio", 1)?;
    let full = tape.upsample_bilinear(logits, h, w)?;
    let skip = tape.conv2d(img, pv.get("prio.skip.w")?, 1)?;
    let full = tape.add(full, skip)?;
    tape.sigmoid(full)
}

/// Enhanced image `[1, H, W]` from the image and its priority map.
pub fn feedback_apply<S: Scalar>(
    tape: &mut Tape<S>,
    img: Var,
    prio: Var,
    ra: &RaConfig,
) -> Result<Var> {
    let (h, w) = tape.value(img).spatial()?;
    if tape.value(prio).spatial()? != (h, w) {
        return Err(Error::Shape(format!(
            "priority map {:?} does not match image {:?}",
            tape.shape(prio),
            tape.shape(img)
        )));
    }
    let q = tape.reshape(img, vec![h, w])?;
    let a = tape.reshape(prio, vec![h, w])?;
    let o = ra_apply(tape, q, a, ra)?;
    tape.reshape(o, vec![1, h, w])
}

/// Density map `[1, H, W]`, every value ≥ 0.
pub fn forward_pass2<S: Scalar>(
    tape: &mut Tape<S>,
    enhanced: Var,
    pv: &ParamVars,
    cfg: &NetConfig,
) -> Result<Var> {
    let (h, w) = input_hw(tape, enhanced, cfg)?;
    let prefix = if cfg.two_tower { SECOND_TOWER } else { "" };
    let y = trunk(tape, enhanced, pv, cfg, prefix)?;
    let feat = conv_relu(tape, y, pv, "feat", 1)?;
    let att = conv(tape, y, pv, "att", 1)?;
    let att = tape.sigmoid(att)?;
    let fused = tape.mul(feat, att)?;
    let logits = conv(tape, fused, pv, "fuse", 1)?;
    let full = tape.upsample_bilinear(logits, h, w)?;
    let skip = tape.conv2d(enhanced, pv.get("fuse.skip.w")?, 1)?;
    let full = tape.add(full, skip)?;
    tape.softplus(full)
}

/// Tape handles produced by [`full_forward`].
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub loss: Var,
    pub density: Var,
    pub priority: Var,
}

/// Pass 1, feedback, pass 2 and the Bayesian loss.
pub fn full_forward<S: Scalar>(
    tape: &mut Tape<S>,
    img: Var,
    heads: &PointAnnotations,
    pv: &ParamVars,
    cfg: &NetConfig,
    bayes: &BayesParams,
) -> Result<Forward> {
    let priority = forward_pass1(tape, img, pv, cfg)?;
    let enhanced = feedback_apply(tape, img, priority, &cfg.ra)?;
    let density = forward_pass2(tape, enhanced, pv, cfg)?;
    let loss = bayes_loss(tape, density, heads, bayes)?;
    Ok(Forward {
        loss,
        density,
        priority,
    })
}

/// Gradient-free inference.
pub fn predict<S: Scalar>(
    params: &ModelParams<S>,
    img: &GrayImage,
    cfg: &NetConfig,
) -> Result<(DensityMap, PriorityMap)> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let x = tape.constant(img.to_tensor());
    let prio = forward_pass1(&mut tape, x, &pv, cfg)?;
    let enhanced = feedback_apply(&mut tape, x, prio, &cfg.ra)?;
    let density = forward_pass2(&mut tape, enhanced, &pv, cfg)?;
    Ok((
        DensityMap::from_tensor(tape.value(density))?,
        PriorityMap::from_tensor(tape.value(prio))?,
    ))
}
