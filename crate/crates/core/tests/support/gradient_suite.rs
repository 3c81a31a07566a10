//! Finite-difference cases for every differentiable primitive, each
//! attention unit and the full joint loss, in double precision. A case
//! returns its worst relative error over all seeds.

use mtl_fer::attention::{
    channel_attention, cross_attention_head, spatial_attention, ChannelAttentionUnit, CrossAttentionHead,
    Gating, SpatialAttentionUnit,
};
use mtl_fer::autograd::{finite_diff_check, GradCheck, Tape, Tensor, Var};
use mtl_fer::losses::{joint_loss_on, one_hot, ClassWeights};
use mtl_fer::model::{BackboneConfig, BackboneVariant, MtlNetwork};
use mtl_fer::nn::{Bound, ParamStore};
use mtl_fer::rng::stream;
use mtl_fer::Result;
use rand::Rng;

pub const SEEDS: u64 = 10;
pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

pub type Case = (&'static str, fn() -> f64);

pub const CASES: &[Case] = &[
    ("conv2d s1 p1 k3", || conv2d(1, 1, 3)),
    ("conv2d s2 p1 k3", || conv2d(2, 1, 3)),
    ("conv2d s1 p0 k1", || conv2d(1, 0, 1)),
    ("conv2d s2 p0 k2", || conv2d(2, 0, 2)),
    ("linear", linear),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("softmax", softmax),
    ("global_avg_pool", global_avg_pool),
    ("max_pool2x2", max_pool),
    ("concat", concat),
    ("reshape, flatten", reshape_flatten),
    ("repeat_rows, slice_rows", repeat_slice),
    ("mul", mul),
    ("add", add),
    ("add_scaled, scale", add_scaled),
    ("sum, mean_of", mean_of),
    ("mul_channel", mul_channel),
    ("mul_spatial", mul_spatial),
    ("weighted cross-entropy", cross_entropy),
    ("mse", mse),
    ("joint loss in lambda", joint_in_lambda),
    ("channel attention unit", || attention(Unit::Channel)),
    ("spatial attention unit", || attention(Unit::Spatial)),
    ("cross attention head", || attention(Unit::Head)),
    ("full joint loss, K=4", full_joint_loss),
];

pub fn rand_tensor(shape: &[usize], seed: u64, label: &str) -> Tensor<f64> {
    let mut r = stream(seed, label, 0);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

fn dim(seed: u64, label: &str, lo: usize, hi: usize) -> usize {
    stream(seed, label, 1).random_range(lo..=hi)
}

/// `Σ out ⊙ R` for a fixed random `R`, turning any output into a scalar
/// with a generic upstream gradient.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(rand_tensor(&shape, seed, "projection"));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn check<F>(inputs: impl Fn(u64) -> Vec<Tensor<f64>>, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var], u64) -> Result<Var>,
{
    (0..SEEDS)
        .map(|seed| {
            let xs = inputs(seed);
            GradCheck::new(EPS).run(|tape, v| f(tape, v, seed), &xs).unwrap()
        })
        .fold(0.0, f64::max)
}

fn conv2d(stride: usize, padding: usize, k: usize) -> f64 {
    check(
        |s| {
            let (n, c, o) = (dim(s, "n", 1, 2), dim(s, "c", 1, 3), dim(s, "o", 1, 3));
            let (h, w) = (dim(s, "h", k.max(3), 6), dim(s, "w", k.max(3), 6));
            vec![
                rand_tensor(&[n, c, h, w], s, "x"),
                rand_tensor(&[o, c, k, k], s, "k"),
                rand_tensor(&[o], s, "b"),
            ]
        },
        |tape, v, s| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
            project(tape, y, s)
        },
    )
}

fn linear() -> f64 {
    check(
        |s| {
            let (n, d, m) = (dim(s, "n", 1, 4), dim(s, "d", 1, 6), dim(s, "m", 1, 5));
            vec![
                rand_tensor(&[n, d], s, "x"),
                rand_tensor(&[d, m], s, "w"),
                rand_tensor(&[m], s, "b"),
            ]
        },
        |tape, v, s| {
            let y = tape.linear(v[0], v[1], Some(v[2]))?;
            project(tape, y, s)
        },
    )
}

fn matrix(s: u64) -> Vec<Tensor<f64>> {
    vec![rand_tensor(&[dim(s, "n", 1, 3), dim(s, "d", 2, 7)], s, "x")]
}

fn pair(s: u64) -> Vec<Tensor<f64>> {
    let shape = [dim(s, "n", 1, 3), dim(s, "d", 1, 5)];
    vec![rand_tensor(&shape, s, "a"), rand_tensor(&shape, s, "b")]
}

fn relu() -> f64 {
    check(matrix, |tape, v, s| {
        let y = tape.relu(v[0]);
        project(tape, y, s)
    })
}

fn sigmoid() -> f64 {
    check(matrix, |tape, v, s| {
        let y = tape.sigmoid(v[0]);
        project(tape, y, s)
    })
}

fn softmax() -> f64 {
    check(matrix, |tape, v, s| {
        let y = tape.softmax(v[0])?;
        project(tape, y, s)
    })
}

fn global_avg_pool() -> f64 {
    check(
        |s| {
            let shape = [dim(s, "n", 1, 2), dim(s, "c", 1, 3), dim(s, "h", 1, 4), dim(s, "w", 1, 4)];
            vec![rand_tensor(&shape, s, "x")]
        },
        |tape, v, s| {
            let y = tape.global_avg_pool(v[0])?;
            project(tape, y, s)
        },
    )
}

fn max_pool() -> f64 {
    check(
        |s| {
            let (h, w) = (2 * dim(s, "h", 1, 3), 2 * dim(s, "w", 1, 3));
            vec![rand_tensor(&[dim(s, "n", 1, 2), dim(s, "c", 1, 3), h, w], s, "x")]
        },
        |tape, v, s| {
            let y = tape.max_pool2x2(v[0])?;
            project(tape, y, s)
        },
    )
}

fn concat() -> f64 {
    check(
        |s| {
            let n = dim(s, "n", 1, 3);
            vec![
                rand_tensor(&[n, dim(s, "a", 1, 4)], s, "a"),
                rand_tensor(&[n, dim(s, "b", 1, 4)], s, "b"),
            ]
        },
        |tape, v, s| {
            let y = tape.concat(v[0], v[1])?;
            project(tape, y, s)
        },
    )
}

fn reshape_flatten() -> f64 {
    check(
        |s| vec![rand_tensor(&[2, dim(s, "c", 1, 3), 2, 2], s, "x")],
        |tape, v, s| {
            let shape = tape.value(v[0]).shape().to_vec();
            let r = tape.reshape(v[0], &[shape[0] * shape[1], 4])?;
            let back = tape.reshape(r, &shape)?;
            let y = tape.flatten(back)?;
            project(tape, y, s)
        },
    )
}

fn repeat_slice() -> f64 {
    check(
        |s| vec![rand_tensor(&[dim(s, "n", 1, 3), dim(s, "d", 1, 4)], s, "x")],
        |tape, v, s| {
            let n = tape.value(v[0]).dim(0);
            let tiled = tape.repeat_rows(v[0], 3)?;
            let y = tape.slice_rows(tiled, 1, 2 * n - 1)?;
            project(tape, y, s)
        },
    )
}

fn mul() -> f64 {
    check(pair, |tape, v, s| {
        let y = tape.mul(v[0], v[1])?;
        project(tape, y, s)
    })
}

fn add() -> f64 {
    check(pair, |tape, v, s| {
        let y = tape.add(v[0], v[1])?;
        project(tape, y, s)
    })
}

fn add_scaled() -> f64 {
    check(pair, |tape, v, s| {
        let y = tape.add_scaled(v[0], v[1], 0.7)?;
        let z = tape.scale(y, -1.3);
        project(tape, z, s)
    })
}

fn mean_of() -> f64 {
    check(
        |s| {
            let shape = [dim(s, "n", 1, 3), dim(s, "d", 1, 5)];
            (0..3).map(|i| rand_tensor(&shape, s, &format!("x{i}"))).collect()
        },
        |tape, v, s| {
            let y = tape.mean_of(v)?;
            project(tape, y, s)
        },
    )
}

fn mul_channel() -> f64 {
    check(
        |s| {
            let (n, c) = (dim(s, "n", 1, 2), dim(s, "c", 1, 3));
            vec![rand_tensor(&[n, c, 3, 2], s, "x"), rand_tensor(&[n, c], s, "g")]
        },
        |tape, v, s| {
            let y = tape.mul_channel(v[0], v[1])?;
            project(tape, y, s)
        },
    )
}

fn mul_spatial() -> f64 {
    check(
        |s| {
            let (n, c) = (dim(s, "n", 1, 2), dim(s, "c", 1, 3));
            vec![rand_tensor(&[n, c, 3, 2], s, "x"), rand_tensor(&[n, 1, 3, 2], s, "m")]
        },
        |tape, v, s| {
            let y = tape.mul_spatial(v[0], v[1])?;
            project(tape, y, s)
        },
    )
}

pub fn distribution_rows(n: usize, seed: u64) -> Tensor<f64> {
    let mut r = stream(seed, "targets", 0);
    let mut data = Vec::with_capacity(n * 6);
    for _ in 0..n {
        let row: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
        let total: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / total));
    }
    Tensor::from_f64(&[n, 6], &data).unwrap()
}

fn cross_entropy() -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let n = dim(seed, "n", 1, 5);
            let logits = rand_tensor(&[n, 6], seed, "logits").map(|v| 3.0 * v);
            let targets = distribution_rows(n, seed);
            let weights = ClassWeights::from_frequencies(&[3, 5, 7, 2, 9, 4]).unwrap().as_scalars();
            finite_diff_check(|tape, x| tape.weighted_cross_entropy(x, &targets, &weights), &logits, EPS)
                .unwrap()
        })
        .fold(0.0, f64::max)
}

fn mse() -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let n = dim(seed, "n", 1, 5);
            let target = rand_tensor(&[n, 136], seed, "land");
            let pred = rand_tensor(&[n, 136], seed, "pred");
            finite_diff_check(|tape, x| tape.mse(x, &target), &pred, EPS).unwrap()
        })
        .fold(0.0, f64::max)
}

/// dJoint/dλ against the landmark loss, as a relative error.
fn joint_in_lambda() -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let lambda = rand_tensor(&[1], seed, "lambda").item().abs() + 0.1;
            let expr = rand_tensor(&[1], seed, "e").item();
            let land = rand_tensor(&[1], seed, "l").item().abs() + 0.01;
            let f = |lambda: f64| {
                let mut tape = Tape::new();
                let e = tape.constant(Tensor::scalar(expr));
                let d = tape.constant(Tensor::scalar(land));
                let j = joint_loss_on(&mut tape, e, d, lambda).unwrap();
                tape.value(j).item()
            };
            let numeric = (f(lambda + EPS) - f(lambda - EPS)) / (2.0 * EPS);
            (numeric - land).abs() / land.abs().max(numeric.abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy)]
enum Unit {
    Channel,
    Spatial,
    Head,
}

/// Parameters enter as leaves after the feature map, so the checker
/// perturbs both.
fn attention(unit: Unit) -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let (n, c, h, w) = (dim(seed, "n", 1, 2), 8, dim(seed, "h", 2, 4), dim(seed, "w", 2, 4));
            let mut store = ParamStore::<f64>::new();
            let mut r = stream(seed, "init", 0);
            let channel = ChannelAttentionUnit::new(&mut store, "c", c, 4, &mut r).unwrap();
            let spatial = SpatialAttentionUnit::new(&mut store, "s", c, 4, &mut r).unwrap();
            let head = CrossAttentionHead::new(&mut store, "h", c, 4, 5, &mut r).unwrap();
            let mut inputs = vec![rand_tensor(&[n, c, h, w], seed, "feat")];
            inputs.extend(store.iter().map(|p| p.value.clone()));
            GradCheck::new(EPS)
                .run(
                    |tape, v| {
                        let p = Bound::new(v[1..].to_vec());
                        let out = match unit {
                            Unit::Channel => channel_attention(tape, &p, v[0], &channel)?,
                            Unit::Spatial => spatial_attention(tape, &p, v[0], &spatial)?,
                            Unit::Head => cross_attention_head(tape, &p, v[0], &head, Gating::Gated)?,
                        };
                        project(tape, out, seed)
                    },
                    &inputs,
                )
                .unwrap()
        })
        .fold(0.0, f64::max)
}

pub fn tiny(variant: BackboneVariant) -> BackboneConfig {
    BackboneConfig {
        variant,
        image_size: 16,
        feature_dim: 8,
        trunk_width: 8,
        heads: 4,
        reduction: 4,
    }
}

/// Weighted CE plus landmark MSE through both branches, K=4 heads and the
/// trunk, on two samples; three coordinates sampled per tensor.
fn full_joint_loss() -> f64 {
    let variants = BackboneVariant::ALL;
    (0..SEEDS)
        .map(|seed| {
            let cfg = tiny(variants[seed as usize % variants.len()]);
            let net = MtlNetwork::<f64>::build(&cfg, seed).unwrap();
            let ev = rand_tensor(&[2, 3, 16, 16], seed, "emotion").map(|v| 0.5 + 0.5 * v);
            let av = rand_tensor(&[2, 3, 16, 16], seed, "appearance").map(|v| 0.5 + 0.5 * v);
            let targets = one_hot::<f64>(&[seed as usize % 6, (seed as usize + 3) % 6]).unwrap();
            let land = rand_tensor(&[2, 136], seed, "land").map(|v| 0.5 + 0.4 * v);
            let weights = ClassWeights::from_frequencies(&[4, 6, 5, 3, 7, 5]).unwrap().as_scalars::<f64>();
            let mut inputs = vec![ev, av];
            inputs.extend(net.params().iter().map(|p| p.value.clone()));
            GradCheck::new(EPS)
                .sampled(3, seed)
                .run(
                    |tape, v| {
                        let p = Bound::new(v[2..].to_vec());
                        let out = net.forward_full(tape, &p, v[0], v[1])?;
                        let ce = tape.weighted_cross_entropy(out.expr_logits, &targets, &weights)?;
                        let mse = tape.mse(out.land_pred, &land)?;
                        joint_loss_on(tape, ce, mse, 1.0)
                    },
                    &inputs,
                )
                .unwrap()
        })
        .fold(0.0, f64::max)
}
