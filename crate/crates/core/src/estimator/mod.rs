//! Three-head encoder-decoder estimator for clean image, background light
//! and transmission, with exact reverse-mode gradients.

mod checkpoint;
pub mod layers;
pub mod network;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Field3, ImageRGB, ScalarField3};
use crate::metatrain::loss::{loss_components, loss_gradients, total_loss, LossTerms, LossWeights};
use crate::metatrain::ParamSpace;
use crate::rng::Rng;
use crate::uwmodel::T_FLOOR;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use layers::{sigmoid, Tensor};
use network::{head_backward, head_forward, HeadLayout};

pub(crate) const INPUT_CHANNELS: usize = 3;
pub(crate) const OUTPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub num_enc_blocks: usize,
    pub num_dec_blocks: usize,
    /// Channels of the first encoder block; doubles per block.
    pub base_channels: usize,
    pub max_channels: usize,
    pub use_skip: bool,
    pub use_shortcut: bool,
    /// Square training crop size.
    pub patch_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            num_enc_blocks: 4,
            num_dec_blocks: 4,
            base_channels: 8,
            max_channels: 512,
            use_skip: true,
            use_shortcut: true,
            patch_size: 32,
        }
    }
}

impl ArchConfig {
    /// Full-size network: 64 to 512 channels over 256×256 crops.
    pub fn full_scale() -> Self {
        Self {
            base_channels: 64,
            max_channels: 512,
            patch_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_enc_blocks == 0 || self.num_enc_blocks != self.num_dec_blocks {
            return bad(format!(
                "encoder/decoder block counts must be equal and positive, got {}/{}",
                self.num_enc_blocks, self.num_dec_blocks
            ));
        }
        if self.num_enc_blocks > 16 {
            return bad(format!("{} blocks is too deep", self.num_enc_blocks));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return bad(format!(
                "channels need 0 < base ({}) <= max ({})",
                self.base_channels, self.max_channels
            ));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(self.size_multiple()) {
            return bad(format!(
                "patch_size {} must be a positive multiple of {}",
                self.patch_size,
                self.size_multiple()
            ));
        }
        Ok(())
    }

    /// Input sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.num_enc_blocks
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels
            .checked_shl(level as u32)
            .unwrap_or(usize::MAX)
            .min(self.max_channels)
    }
}

/// The three output heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Clean = 0,
    Background = 1,
    Transmission = 2,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Clean, Head::Background, Head::Transmission];

    pub fn name(self) -> &'static str {
        match self {
            Head::Clean => "clean",
            Head::Background => "background",
            Head::Transmission => "transmission",
        }
    }

    #[inline]
    fn activate(self, logit: f64) -> f64 {
        let s = sigmoid(logit);
        match self {
            Head::Transmission => T_FLOOR + (1.0 - T_FLOOR) * s,
            _ => s,
        }
    }

    /// d(activation)/d(logit) expressed through the activated value.
    #[inline]
    fn activation_slope(self, out: f64) -> f64 {
        match self {
            Head::Transmission => {
                let s = (out - T_FLOOR) / (1.0 - T_FLOOR);
                (1.0 - T_FLOOR) * s * (1.0 - s)
            }
            _ => out * (1.0 - out),
        }
    }
}

/// Parameters of the clean-image, background and transmission heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub seed: u64,
    /// Indexed by [`Head`].
    pub heads: [Vec<f64>; 3],
}

impl ModelParams {
    pub fn layout(&self) -> HeadLayout {
        HeadLayout::new(&self.arch)
    }

    pub fn head(&self, head: Head) -> &[f64] {
        &self.heads[head as usize]
    }

    pub fn len(&self) -> usize {
        self.heads.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().flatten().all(|v| v.is_finite())
    }

    /// Flat view over the three heads in order.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.heads.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.heads.iter_mut().flatten()
    }
}

impl ParamSpace for ModelParams {
    fn axpy(&mut self, alpha: f64, x: &Self) {
        for (a, b) in self.iter_mut().zip(x.iter()) {
            *a += alpha * b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|v| *v *= s);
    }

    fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            seed: self.seed,
            heads: self.heads.clone().map(|h| vec![0.0; h.len()]),
        }
    }
}

/// Deterministic fan-in scaled uniform weights, zero biases.
///
/// Weights are rounded to `f32` so a fresh model survives a checkpoint
/// round trip unchanged.
pub fn init(cfg: &ArchConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let layout = HeadLayout::new(cfg);
    let root = Rng::new(seed);
    let heads = Head::ALL.map(|head| {
        let mut rng = root.split(head as u64);
        let mut p = vec![0.0; layout.len];
        for conv in layout.convs() {
            let bound = (3.0 / conv.fan_in() as f64).sqrt();
            for w in &mut p[conv.offset..conv.offset + conv.weight_len()] {
                *w = rng.uniform(-bound, bound).expect("bound > 0") as f32 as f64;
            }
        }
        p
    });
    Ok(ModelParams {
        arch: cfg.clone(),
        seed,
        heads,
    })
}

/// The three estimated fields for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub clean: ImageRGB,
    pub background: ScalarField3,
    pub transmission: ScalarField3,
}

impl Prediction {
    pub fn field(&self, head: Head) -> &Field3 {
        match head {
            Head::Clean => &self.clean,
            Head::Background => &self.background,
            Head::Transmission => &self.transmission,
        }
    }
}

/// A supervised pair. Background and transmission targets exist only for
/// synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub input: ImageRGB,
    pub clean: ImageRGB,
    pub background: Option<ScalarField3>,
    pub transmission: Option<ScalarField3>,
}

impl TrainExample {
    pub fn shape(&self) -> (usize, usize) {
        self.input.shape()
    }

    pub fn validate(&self) -> Result<()> {
        self.input.ensure_same_shape(&self.clean)?;
        for f in [&self.background, &self.transmission].into_iter().flatten() {
            self.input.ensure_same_shape(f)?;
        }
        Ok(())
    }
}

fn check_input(arch: &ArchConfig, img: &ImageRGB) -> Result<()> {
    let m = arch.size_multiple();
    if img.height() == 0
        || !img.height().is_multiple_of(m)
        || !img.width().is_multiple_of(m)
        || img.width() == 0
    {
        return Err(Error::Indivisible {
            height: img.height(),
            width: img.width(),
            multiple: m,
        });
    }
    Ok(())
}

fn to_tensor(img: &ImageRGB) -> Tensor {
    Tensor {
        c: INPUT_CHANNELS,
        h: img.height(),
        w: img.width(),
        data: img.data().to_vec(),
    }
}

fn activate(head: Head, logits: Tensor) -> Field3 {
    let data = logits.data.into_iter().map(|v| head.activate(v)).collect();
    Field3::new(logits.h, logits.w, data).expect("head emits 3 channels")
}

/// Evaluates all three heads on `input`.
pub fn forward(params: &ModelParams, input: &ImageRGB) -> Result<Prediction> {
    check_input(&params.arch, input)?;
    input.ensure_finite()?;
    let layout = params.layout();
    let [clean, background, transmission] = Head::ALL.map(|head| {
        let (logits, _) = head_forward(
            &layout,
            params.arch.use_skip,
            params.head(head),
            to_tensor(input),
        );
        activate(head, logits)
    });
    Ok(Prediction {
        clean,
        background,
        transmission,
    })
}

fn example_gradient(
    params: &ModelParams,
    layout: &HeadLayout,
    example: &TrainExample,
    weights: &LossWeights,
) -> Result<(LossTerms, [Vec<f64>; 3])> {
    let mut caches = Vec::with_capacity(3);
    let mut fields = Vec::with_capacity(3);
    for head in Head::ALL {
        let (logits, cache) = head_forward(
            layout,
            params.arch.use_skip,
            params.head(head),
            to_tensor(&example.input),
        );
        fields.push(activate(head, logits));
        caches.push(cache);
    }
    let transmission = fields.pop().unwrap();
    let background = fields.pop().unwrap();
    let clean = fields.pop().unwrap();
    let pred = Prediction {
        clean,
        background,
        transmission,
    };
    let terms = loss_components(&pred, example)?;
    let field_grads = loss_gradients(&pred, example, weights)?;
    let mut grads = params.heads.clone().map(|h| vec![0.0; h.len()]);
    for head in Head::ALL {
        let out = pred.field(head);
        let g = &field_grads[head as usize];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let grad_logits = Tensor {
            c: OUTPUT_CHANNELS,
            h: out.height(),
            w: out.width(),
            data: g
                .iter()
                .zip(out.data())
                .map(|(&gv, &o)| gv * head.activation_slope(o))
                .collect(),
        };
        head_backward(
            layout,
            params.head(head),
            &caches[head as usize],
            &grad_logits,
            &mut grads[head as usize],
        );
    }
    Ok((terms, grads))
}

/// Batch-mean composite loss and its exact gradient for all three heads.
///
/// The loss is the mean over `batch` of the weighted sum of the four L1
/// terms. Per-example work runs in parallel; the reduction is sequential in
/// batch order, so results do not depend on thread count.
pub fn forward_backward(
    params: &ModelParams,
    batch: &[TrainExample],
    weights: &LossWeights,
) -> Result<(f64, ModelParams)> {
    let (loss, _, grad) = forward_backward_terms(params, batch, weights)?;
    Ok((loss, grad))
}

/// Like [`forward_backward`], also returning the batch-mean loss terms.
pub fn forward_backward_terms(
    params: &ModelParams,
    batch: &[TrainExample],
    weights: &LossWeights,
) -> Result<(f64, LossTerms, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    weights.validate()?;
    for ex in batch {
        ex.validate()?;
        check_input(&params.arch, &ex.input)?;
        weights.check_targets(ex)?;
    }
    let layout = params.layout();
    let per_example: Vec<(LossTerms, [Vec<f64>; 3])> = batch
        .par_iter()
        .map(|ex| example_gradient(params, &layout, ex, weights))
        .collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let mut grad = params.zeros_like();
    let mut terms = LossTerms::default();
    for (t, g) in &per_example {
        terms.accumulate(t);
        for (acc, part) in grad.heads.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        }
    }
    grad.scale(1.0 / n);
    terms.scale(1.0 / n);
    terms.ensure_finite(weights)?;
    Ok((total_loss(&terms, weights), terms, grad))
}

/// Batch-mean loss terms without gradients.
pub fn evaluate(params: &ModelParams, batch: &[TrainExample]) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let per: Vec<LossTerms> = batch
        .par_iter()
        .map(|ex| {
            ex.validate()?;
            loss_components(&forward(params, &ex.input)?, ex)
        })
        .collect::<Result<_>>()?;
    let mut terms = LossTerms::default();
    per.iter().for_each(|t| terms.accumulate(t));
    terms.scale(1.0 / batch.len() as f64);
    Ok(terms)
}

#[cfg(test)]
mod tests;
