//! Multi-head cross attention for the emotion branch.
//!
//! Each head gates the backbone feature map twice: a spatial map (where to
//! look, one value per pixel) and channel gates (which features matter,
//! one value per channel). The gated map is pooled and projected to the
//! head's output width; heads are combined by their element-wise mean.

use crate::autograd::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_uniform, Bound, Conv, Dense, ParamId, ParamStore, LINEAR_GAIN, RELU_GAIN};
use crate::rng::Rng;

/// Squeeze-excitation gate: `sigmoid(relu(gap(x) · W_s) · W_e)`.
#[derive(Clone, Debug)]
pub struct ChannelAttentionUnit {
    pub squeeze: ParamId,
    pub excite: ParamId,
    pub channels: usize,
    pub reduction: usize,
}

impl ChannelAttentionUnit {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let hidden = reduced(channels, reduction)?;
        let squeeze = store.add(
            format!("{name}.squeeze"),
            init_uniform(&[channels, hidden], channels, RELU_GAIN, rng),
        );
        let excite = store.add(
            format!("{name}.excite"),
            init_uniform(&[hidden, channels], hidden, LINEAR_GAIN, rng),
        );
        Ok(ChannelAttentionUnit {
            squeeze,
            excite,
            channels,
            reduction,
        })
    }
}

/// `sigmoid(conv3x3(relu(conv1x1(x))))`, one map per sample.
#[derive(Clone, Debug)]
pub struct SpatialAttentionUnit {
    pub reduce: Conv,
    pub gate: Conv,
}

impl SpatialAttentionUnit {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let hidden = reduced(channels, reduction)?;
        Ok(SpatialAttentionUnit {
            reduce: Conv::new(store, &format!("{name}.reduce"), channels, hidden, 1, 1, 0, RELU_GAIN, rng),
            gate: Conv::new(store, &format!("{name}.gate"), hidden, 1, 3, 1, 1, LINEAR_GAIN, rng),
        })
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttentionHead {
    pub channel: ChannelAttentionUnit,
    pub spatial: SpatialAttentionUnit,
    pub projection: Dense,
}

impl CrossAttentionHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(CrossAttentionHead {
            channel: ChannelAttentionUnit::new(store, &format!("{name}.channel"), channels, reduction, rng)?,
            spatial: SpatialAttentionUnit::new(store, &format!("{name}.spatial"), channels, reduction, rng)?,
            projection: Dense::new(store, &format!("{name}.projection"), channels, out_dim, true, LINEAR_GAIN, rng),
        })
    }
}

/// Whether a head applies its gates. `Bypass` fixes both gates at 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Gating {
    #[default]
    Gated,
    Bypass,
}

fn reduced(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels == 0 || channels % reduction != 0 {
        return Err(Error::config(format!(
            "attention: {channels} channels are not divisible by reduction ratio {reduction}"
        )));
    }
    Ok(channels / reduction)
}

/// Channel gates in (0, 1), shape N×C.
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    feat: Var,
    unit: &ChannelAttentionUnit,
) -> Result<Var> {
    let pooled = tape.global_avg_pool(feat)?;
    let squeezed = tape.linear(pooled, p.var(unit.squeeze), None)?;
    let hidden = tape.relu(squeezed);
    let excited = tape.linear(hidden, p.var(unit.excite), None)?;
    Ok(tape.sigmoid(excited))
}

/// Spatial map in (0, 1), shape N×1×H×W.
pub fn spatial_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    feat: Var,
    unit: &SpatialAttentionUnit,
) -> Result<Var> {
    let reduced = unit.reduce.apply(tape, p, feat)?;
    let hidden = tape.relu(reduced);
    let logits = unit.gate.apply(tape, p, hidden)?;
    Ok(tape.sigmoid(logits))
}

/// `projection(gap(feat ⊙ spatial ⊙ channel))`, shape N×F.
pub fn cross_attention_head<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    feat: Var,
    head: &CrossAttentionHead,
    gating: Gating,
) -> Result<Var> {
    let attended = match gating {
        Gating::Bypass => feat,
        Gating::Gated => {
            let map = spatial_attention(tape, p, feat, &head.spatial)?;
            let gates = channel_attention(tape, p, feat, &head.channel)?;
            let spatially = tape.mul_spatial(feat, map)?;
            tape.mul_channel(spatially, gates)?
        }
    };
    let pooled = tape.global_avg_pool(attended)?;
    head.projection.apply(tape, p, pooled)
}

/// Element-wise mean of the head outputs; independent of head order.
pub fn multi_head_combine<T: Scalar>(tape: &mut Tape<T>, heads: &[Var]) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::usage("multi_head_combine: at least one head output is required"));
    }
    tape.mean_of(heads)
}
