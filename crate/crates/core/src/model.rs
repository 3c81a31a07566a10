//! The dual-branch multi-task network.
//!
//! ```text
//! emotion view ──► backbone ──► K attention heads ──► mean ──┐
//!                                                            ├─ concat ─► FC ─► FC ─┬─► expression logits (6)
//! appearance view ─► backbone ─► pool ─► flatten ─► FC ──────┘                      └─► landmarks (136)
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention_head, multi_head_combine, CrossAttentionHead, Gating};
use crate::autograd::{softmax_in_place, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::expression::{LANDMARK_DIM, NUM_CLASSES, NUM_LANDMARKS};
use crate::nn::{Bound, Conv, Dense, ParamStore, LINEAR_GAIN, RELU_GAIN};
use crate::rng;

/// Backbone width family. The three variants stand in for three different
/// appearance backbones and give ensemble members architectural diversity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneVariant {
    #[default]
    Standard,
    Wide,
    Slim,
}

impl BackboneVariant {
    pub const ALL: [BackboneVariant; 3] = [
        BackboneVariant::Standard,
        BackboneVariant::Wide,
        BackboneVariant::Slim,
    ];

    /// Output channels of the four convolution stages.
    pub fn widths(self) -> [usize; 4] {
        match self {
            BackboneVariant::Standard => [8, 16, 32, 64],
            BackboneVariant::Wide => [12, 24, 48, 96],
            BackboneVariant::Slim => [8, 12, 24, 48],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackboneVariant::Standard => "standard",
            BackboneVariant::Wide => "wide",
            BackboneVariant::Slim => "slim",
        }
    }
}

impl fmt::Display for BackboneVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown backbone variant `{s}` (expected standard, wide or slim)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Per-branch feature width F.
    pub feature_dim: usize,
    /// Shared trunk width H.
    pub trunk_width: usize,
    /// Number of attention heads K.
    pub heads: usize,
    /// Attention reduction ratio r.
    pub reduction: usize,
    /// Square input resolution.
    pub image_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: BackboneVariant::Standard,
            feature_dim: 128,
            trunk_width: 128,
            heads: 4,
            reduction: 4,
            image_size: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("trunk_width", self.trunk_width),
            ("heads", self.heads),
            ("reduction", self.reduction),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("backbone.{field} must be positive")));
            }
        }
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::config(format!(
                "backbone.image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        let last = self.variant.widths()[3];
        if last % self.reduction != 0 {
            return Err(Error::config(format!(
                "backbone.reduction {} does not divide the {} final channels of variant {}",
                self.reduction, last, self.variant
            )));
        }
        Ok(())
    }

    /// Side of the backbone's output map.
    fn map_size(&self) -> usize {
        self.image_size / 8
    }
}

/// Four 3×3 conv + ReLU stages. The first convolves with stride 2, the
/// second and third are followed by 2×2 max pooling, so the output map is
/// `image_size / 8` on a side.
#[derive(Clone, Debug)]
struct Backbone {
    stages: Vec<Conv>,
}

impl Backbone {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, widths: [usize; 4], rng: &mut rng::Rng) -> Self {
        let mut in_ch = 3;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let stride = if i == 0 { 2 } else { 1 };
                let conv = Conv::new(store, &format!("{name}.stage{i}"), in_ch, out, 3, stride, 1, RELU_GAIN, rng);
                in_ch = out;
                conv
            })
            .collect();
        Backbone { stages }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, stage) in self.stages.iter().enumerate() {
            let z = stage.apply(tape, p, h)?;
            h = tape.relu(z);
            if i == 1 || i == 2 {
                h = tape.max_pool2x2(h)?;
            }
        }
        Ok(h)
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// N×6
    pub expr_logits: Var,
    /// N×136, interleaved (x0, y0, x1, y1, …)
    pub land_pred: Var,
}

/// Inference output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub expr_probs: [f64; NUM_CLASSES],
    pub landmarks: Vec<[f64; 2]>,
}

impl Prediction {
    /// Argmax with the lowest index winning ties.
    pub fn class(&self) -> usize {
        argmax(&self.expr_probs)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct MtlNetwork<T> {
    config: BackboneConfig,
    params: ParamStore<T>,
    emotion_backbone: Backbone,
    heads: Vec<CrossAttentionHead>,
    appearance_backbone: Backbone,
    appearance_proj: Dense,
    trunk: [Dense; 2],
    expr_head: Dense,
    land_head: Dense,
    gating: Gating,
}

/// Parameter-name prefixes of the trainable groups, in declaration order.
pub const PARAM_GROUPS: [&str; 6] = [
    "emotion_backbone",
    "attention",
    "appearance_backbone",
    "trunk",
    "expr_head",
    "land_head",
];

impl<T: Scalar> MtlNetwork<T> {
    /// Builds and initializes a network deterministically from `seed`.
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let widths = config.variant.widths();
        let last = widths[3];
        let (f, h) = (config.feature_dim, config.trunk_width);
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "init", 0);

        let emotion_backbone = Backbone::new(&mut store, "emotion_backbone", widths, &mut r);
        let heads = (0..config.heads)
            .map(|k| CrossAttentionHead::new(&mut store, &format!("attention.head{k}"), last, config.reduction, f, &mut r))
            .collect::<Result<Vec<_>>>()?;
        let appearance_backbone = Backbone::new(&mut store, "appearance_backbone", widths, &mut r);
        let pooled = last * (config.map_size() / 2).pow(2);
        let appearance_proj = Dense::new(&mut store, "appearance_backbone.projection", pooled, f, true, RELU_GAIN, &mut r);
        let trunk = [
            Dense::new(&mut store, "trunk.fc0", 2 * f, h, true, RELU_GAIN, &mut r),
            Dense::new(&mut store, "trunk.fc1", h, h, true, RELU_GAIN, &mut r),
        ];
        let expr_head = Dense::new(&mut store, "expr_head", h, NUM_CLASSES, true, LINEAR_GAIN, &mut r);
        let land_head = Dense::new(&mut store, "land_head", h, LANDMARK_DIM, true, LINEAR_GAIN, &mut r);

        let net = MtlNetwork {
            config: config.clone(),
            params: store,
            emotion_backbone,
            heads,
            appearance_backbone,
            appearance_proj,
            trunk,
            expr_head,
            land_head,
            gating: Gating::Gated,
        };
        assert_eq!(net.params.get(net.expr_head.weight).shape(), &[h, NUM_CLASSES]);
        assert_eq!(net.params.get(net.land_head.weight).shape(), &[h, LANDMARK_DIM]);
        Ok(net)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Fixes every attention gate at 1 (testing aid).
    pub fn set_gating(&mut self, gating: Gating) {
        self.gating = gating;
    }

    pub fn cast<U: Scalar>(&self) -> MtlNetwork<U> {
        MtlNetwork {
            config: self.config.clone(),
            params: self.params.cast(),
            emotion_backbone: self.emotion_backbone.clone(),
            heads: self.heads.clone(),
            appearance_backbone: self.appearance_backbone.clone(),
            appearance_proj: self.appearance_proj.clone(),
            trunk: self.trunk.clone(),
            expr_head: self.expr_head.clone(),
            land_head: self.land_head.clone(),
            gating: self.gating,
        }
    }

    fn check_view(&self, tape: &Tape<T>, v: Var, which: &str) -> Result<usize> {
        let s = tape.value(v).shape();
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::dim(format!(
                "{which} view has shape {s:?}, expected N×3×{size}×{size}"
            )));
        }
        Ok(s[0])
    }

    /// Emotion-branch feature, N×F.
    pub fn emotion_features(&self, tape: &mut Tape<T>, p: &Bound, view: Var) -> Result<Var> {
        let map = self.emotion_backbone.apply(tape, p, view)?;
        let outs = self
            .heads
            .iter()
            .map(|head| cross_attention_head(tape, p, map, head, self.gating))
            .collect::<Result<Vec<_>>>()?;
        multi_head_combine(tape, &outs)
    }

    /// Appearance-branch feature, N×F.
    pub fn appearance_features(&self, tape: &mut Tape<T>, p: &Bound, view: Var) -> Result<Var> {
        let map = self.appearance_backbone.apply(tape, p, view)?;
        let pooled = tape.max_pool2x2(map)?;
        let flat = tape.flatten(pooled)?;
        let z = self.appearance_proj.apply(tape, p, flat)?;
        Ok(tape.relu(z))
    }

    /// Shared trunk and both heads over concatenated branch features.
    pub fn heads_from_features(&self, tape: &mut Tape<T>, p: &Bound, emotion: Var, appearance: Var) -> Result<Outputs> {
        let mut h = tape.concat(emotion, appearance)?;
        for layer in &self.trunk {
            let z = layer.apply(tape, p, h)?;
            h = tape.relu(z);
        }
        Ok(Outputs {
            expr_logits: self.expr_head.apply(tape, p, h)?,
            land_pred: self.land_head.apply(tape, p, h)?,
        })
    }

    /// Full forward pass over paired views of the same samples.
    pub fn forward_full(&self, tape: &mut Tape<T>, p: &Bound, emotion_view: Var, appearance_view: Var) -> Result<Outputs> {
        let ne = self.check_view(tape, emotion_view, "emotion")?;
        let na = self.check_view(tape, appearance_view, "appearance")?;
        if ne != na {
            return Err(Error::dim(format!(
                "axis 0 (batch) differs between views: emotion {ne}, appearance {na}"
            )));
        }
        self.forward_stacked(tape, p, emotion_view, appearance_view)
    }

    /// Forward pass where the emotion batch stacks `k` views per appearance
    /// sample (`k · N` rows, block-major). The appearance feature is computed
    /// once and tiled to match, so row `j·N + n` pairs emotion view `j` of
    /// sample `n` with that sample's appearance view.
    pub fn forward_stacked(&self, tape: &mut Tape<T>, p: &Bound, emotion_views: Var, appearance_view: Var) -> Result<Outputs> {
        let ne = self.check_view(tape, emotion_views, "emotion")?;
        let na = self.check_view(tape, appearance_view, "appearance")?;
        if ne % na != 0 {
            return Err(Error::dim(format!(
                "axis 0 (batch): emotion rows {ne} are not a multiple of appearance rows {na}"
            )));
        }
        let emotion = self.emotion_features(tape, p, emotion_views)?;
        let mut appearance = self.appearance_features(tape, p, appearance_view)?;
        if ne != na {
            appearance = tape.repeat_rows(appearance, ne / na)?;
        }
        self.heads_from_features(tape, p, emotion, appearance)
    }

    /// Classifies clean images; both branches see the same input. Only the
    /// expression head drives the class decision; landmarks are diagnostic.
    pub fn predict_expression(&self, images: &Tensor<T>) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward_full(&mut tape, &p, x, x)?;
        let logits = tape.value(out.expr_logits);
        let land = tape.value(out.land_pred);
        Ok((0..logits.dim(0))
            .map(|i| {
                let mut probs = logits.row(i).to_vec();
                softmax_in_place(&mut probs);
                let mut expr_probs = [0.0; NUM_CLASSES];
                for (d, s) in expr_probs.iter_mut().zip(&probs) {
                    *d = s.as_f64();
                }
                let row = land.row(i);
                let landmarks = (0..NUM_LANDMARKS)
                    .map(|k| [row[2 * k].as_f64(), row[2 * k + 1].as_f64()])
                    .collect();
                Prediction {
                    expr_probs,
                    landmarks,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            feature_dim: 8,
            trunk_width: 8,
            heads: 2,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn unknown_variant_is_a_config_error() {
        assert!(matches!(
            "huge".parse::<BackboneVariant>(),
            Err(Error::Config(_))
        ));
        assert_eq!("wide".parse::<BackboneVariant>().unwrap(), BackboneVariant::Wide);
    }

    #[test]
    fn invalid_dimensions_are_rejected() {
        let mut cfg = small();
        cfg.image_size = 24;
        assert!(MtlNetwork::<f32>::build(&cfg, 0).is_err());
        let mut cfg = small();
        cfg.reduction = 5;
        assert!(MtlNetwork::<f32>::build(&cfg, 0).is_err());
    }

    #[test]
    fn head_shapes() {
        let net = MtlNetwork::<f32>::build(&BackboneConfig::default(), 1).unwrap();
        assert_eq!(net.params().by_name("expr_head.weight").unwrap().shape(), &[128, 6]);
        assert_eq!(net.params().by_name("land_head.weight").unwrap().shape(), &[128, 136]);
        assert!(net.param_count() > 0);
    }

    #[test]
    fn every_param_belongs_to_a_group() {
        let net = MtlNetwork::<f32>::build(&small(), 1).unwrap();
        for p in net.params().iter() {
            assert!(
                PARAM_GROUPS.iter().any(|g| p.name.starts_with(g)),
                "{} has no group",
                p.name
            );
        }
    }

    #[test]
    fn resolution_mismatch_is_a_dimension_error() {
        let net = MtlNetwork::<f32>::build(&small(), 1).unwrap();
        let mut tape = Tape::new();
        let p = net.params().bind(&mut tape, false);
        let a = tape.constant(Tensor::zeros(&[2, 3, 16, 16]));
        let b = tape.constant(Tensor::zeros(&[2, 3, 32, 32]));
        assert!(matches!(
            net.forward_full(&mut tape, &p, a, b),
            Err(Error::Dimension(_))
        ));
        let c = tape.constant(Tensor::zeros(&[3, 3, 16, 16]));
        assert!(matches!(
            net.forward_full(&mut tape, &p, a, c),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5, 0.0]), 0);
        assert_eq!(argmax(&[0.1, 0.2, 0.2]), 1);
    }
}
