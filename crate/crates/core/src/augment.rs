//! Branch-specific training augmentation.
//!
//! The emotion view gets random erasing, horizontal flip and color jitter,
//! and its batches may be mixed pairwise. The appearance view gets color
//! jitter only: it has no spatial transforms, so landmark targets stay
//! valid without any remapping.

use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Brightness and contrast factors are drawn from `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    pub flip_prob: f64,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, `[min, max]`.
    pub erase_area: [f64; 2],
    /// Erased rectangle height/width ratio, `[min, max]`.
    pub erase_aspect: [f64; 2],
    /// Beta(alpha, alpha) parameter of the mixing coefficient.
    pub mix_alpha: f64,
    pub emotion_enabled: bool,
    pub appearance_enabled: bool,
    pub mix_enabled: bool,
    /// Adds ½(CE(a) + CE(b)) of the two unmixed endpoint batches to the
    /// mixed loss.
    pub mix_real_term: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jitter: 0.2,
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: [0.02, 0.2],
            erase_aspect: [0.3, 3.3],
            mix_alpha: 0.2,
            emotion_enabled: true,
            appearance_enabled: true,
            mix_enabled: true,
            mix_real_term: true,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn disabled() -> Self {
        AugmentConfig {
            emotion_enabled: false,
            appearance_enabled: false,
            mix_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("augment.{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("flip_prob", self.flip_prob)?;
        unit("erase_prob", self.erase_prob)?;
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::config(format!(
                "augment.jitter must lie in [0, 1), got {}",
                self.jitter
            )));
        }
        let [lo, hi] = self.erase_area;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::config(format!(
                "augment.erase_area must satisfy 0 < min <= max < 1, got [{lo}, {hi}]"
            )));
        }
        let [lo, hi] = self.erase_aspect;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(format!(
                "augment.erase_aspect must satisfy 0 < min <= max, got [{lo}, {hi}]"
            )));
        }
        if !(self.mix_alpha > 0.0 && self.mix_alpha.is_finite()) {
            return Err(Error::config(format!(
                "augment.mix_alpha must be positive, got {}",
                self.mix_alpha
            )));
        }
        Ok(())
    }
}

fn check_image(img: &Tensor<f32>) -> (usize, usize, usize) {
    assert_eq!(img.rank(), 3, "augmentation expects a C×H×W image");
    (img.dim(0), img.dim(1), img.dim(2))
}

/// `clamp(contrast · (x − mean) + mean · brightness, 0, 1)`, where the mean
/// runs over all channels and both factors are drawn from
/// `[1 − jitter, 1 + jitter]`.
pub fn color_jitter(img: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> Tensor<f32> {
    if cfg.jitter == 0.0 {
        return img.clone();
    }
    let range = 1.0 - cfg.jitter..=1.0 + cfg.jitter;
    let brightness = rng.random_range(range.clone()) as f32;
    let contrast = rng.random_range(range) as f32;
    let mean = img.data().iter().sum::<f32>() / img.numel() as f32;
    img.map(|v| (contrast * (v - mean) + mean * brightness).clamp(0.0, 1.0))
}

/// Reverses column order in every channel.
pub fn horizontal_flip(img: &Tensor<f32>) -> Tensor<f32> {
    let (_, _, w) = check_image(img);
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Pixel rectangle `[top, top + height) × [left, left + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// With probability `erase_prob`, fills one rectangle with uniform noise.
/// Returns the erased rectangle, if any. Rectangles whose area fraction
/// falls outside `erase_area` or that do not fit are redrawn up to ten
/// times before giving up.
pub fn random_erase(img: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> (Tensor<f32>, Option<Rect>) {
    let (c, h, w) = check_image(img);
    if cfg.erase_prob <= 0.0 || !rng.random_bool(cfg.erase_prob.min(1.0)) {
        return (img.clone(), None);
    }
    let total = (h * w) as f64;
    let [alo, ahi] = cfg.erase_area;
    let (rlo, rhi) = (cfg.erase_aspect[0].ln(), cfg.erase_aspect[1].ln());
    for _ in 0..10 {
        let area = rng.random_range(alo..=ahi) * total;
        let aspect = rng.random_range(rlo..=rhi).exp();
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        let fraction = (eh * ew) as f64 / total;
        if eh == 0 || ew == 0 || eh > h || ew > w || fraction < alo || fraction > ahi {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        let mut out = img.clone();
        let data = out.data_mut();
        for ch in 0..c {
            for y in top..top + eh {
                for x in left..left + ew {
                    data[(ch * h + y) * w + x] = rng.random::<f32>();
                }
            }
        }
        let rect = Rect {
            top,
            left,
            height: eh,
            width: ew,
        };
        return (out, Some(rect));
    }
    (img.clone(), None)
}

/// Convex combination of two image batches and their class distributions.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub images: Tensor<f32>,
    pub target_a: Tensor<f32>,
    pub target_b: Tensor<f32>,
    pub lambda: f32,
}

impl MixedBatch {
    /// `λ · target_a + (1 − λ) · target_b`.
    pub fn mixed_targets(&self) -> Tensor<f32> {
        let l = self.lambda;
        let data = self
            .target_a
            .data()
            .iter()
            .zip(self.target_b.data())
            .map(|(&a, &b)| l * a + (1.0 - l) * b)
            .collect();
        Tensor::new(self.target_a.shape().to_vec(), data).expect("target shapes match")
    }
}

/// Mixes with a coefficient drawn from Beta(alpha, alpha).
pub fn mix_augment(
    batch_a: &Tensor<f32>,
    batch_b: &Tensor<f32>,
    labels_a: &Tensor<f32>,
    labels_b: &Tensor<f32>,
    alpha: f64,
    rng: &mut Rng,
) -> Result<MixedBatch> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::config(format!("mix_alpha {alpha}: {e}")))?;
    let lambda = beta.sample(rng) as f32;
    mix_with_lambda(batch_a, batch_b, labels_a, labels_b, lambda)
}

/// Deterministic mixing with a given coefficient.
pub fn mix_with_lambda(
    batch_a: &Tensor<f32>,
    batch_b: &Tensor<f32>,
    labels_a: &Tensor<f32>,
    labels_b: &Tensor<f32>,
    lambda: f32,
) -> Result<MixedBatch> {
    if batch_a.shape() != batch_b.shape() {
        return Err(Error::dim(format!(
            "mix_augment: image batches {:?} and {:?} differ",
            batch_a.shape(),
            batch_b.shape()
        )));
    }
    if labels_a.shape() != labels_b.shape() || labels_a.dim(0) != batch_a.dim(0) {
        return Err(Error::dim(format!(
            "mix_augment: label batches {:?} and {:?} do not match {} images",
            labels_a.shape(),
            labels_b.shape(),
            batch_a.dim(0)
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::usage(format!("mix_augment: lambda {lambda} outside [0, 1]")));
    }
    let data = batch_a
        .data()
        .iter()
        .zip(batch_b.data())
        .map(|(&a, &b)| (lambda * a + (1.0 - lambda) * b).clamp(0.0, 1.0))
        .collect();
    Ok(MixedBatch {
        images: Tensor::new(batch_a.shape().to_vec(), data)?,
        target_a: labels_a.clone(),
        target_b: labels_b.clone(),
        lambda,
    })
}

/// Builds the two training views of one sample from the sub-streams
/// `emotion` and `appearance` of `seed`.
pub fn apply_branch_pipelines(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let img = &sample.image;
    let emotion = if cfg.emotion_enabled {
        let mut r = rng::stream(seed, "emotion", 0);
        let (erased, _) = random_erase(img, cfg, &mut r);
        let flipped = if cfg.flip_prob > 0.0 && r.random_bool(cfg.flip_prob) {
            horizontal_flip(&erased)
        } else {
            erased
        };
        color_jitter(&flipped, cfg, &mut r)
    } else {
        img.clone()
    };
    let appearance = if cfg.appearance_enabled {
        color_jitter(img, cfg, &mut rng::stream(seed, "appearance", 0))
    } else {
        img.clone()
    };
    (emotion, appearance)
}
