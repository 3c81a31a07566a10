//! Independent oracles for metrics, soft voting, bagging, augmentation and
//! checkpoints. Each check returns its worst observed deviation or a
//! description of the first mismatch.

use mtl_fer::augment::{apply_branch_pipelines, horizontal_flip, mix_augment, AugmentConfig};
use mtl_fer::autograd::Tensor;
use mtl_fer::checkpoint;
use mtl_fer::data::Sample;
use mtl_fer::ensemble::{bag_subsample, soft_vote};
use mtl_fer::losses::{one_hot, weighted_cross_entropy, ClassWeights};
use mtl_fer::metrics::{confusion_matrix, macro_f1};
use mtl_fer::model::{BackboneConfig, MtlNetwork};
use mtl_fer::rng::stream;
use mtl_fer::{Expression, NUM_CLASSES};
use rand::Rng;

pub type Check = std::result::Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Per-class precision/recall/F1 by scanning the pairs directly.
fn brute_force_f1(truth: &[usize], pred: &[usize]) -> ([f64; NUM_CLASSES], f64) {
    let mut f1 = [0.0; NUM_CLASSES];
    for (c, out) in f1.iter_mut().enumerate() {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                (false, false) => {}
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        *out = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    (f1, f1.iter().sum::<f64>() / NUM_CLASSES as f64)
}

/// Largest |library − oracle| over 1000 random label/prediction vectors.
pub fn metric_oracle_error() -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let mut r = stream(trial, "metrics", 0);
        let m = r.random_range(1..300);
        // prediction accuracy varies per trial so F1 spans its range
        let accuracy: f64 = r.random();
        let truth: Vec<usize> = (0..m).map(|_| r.random_range(0..NUM_CLASSES)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if r.random_bool(accuracy) { t } else { r.random_range(0..NUM_CLASSES) })
            .collect();
        let report = macro_f1(&confusion_matrix(&truth, &pred).unwrap());
        let (f1, mean) = brute_force_f1(&truth, &pred);
        worst = worst.max((report.macro_f1 - mean).abs());
        for c in 0..NUM_CLASSES {
            worst = worst.max((report.per_class_f1[c] - f1[c]).abs());
        }
    }
    worst
}

pub fn random_simplex(r: &mut impl Rng) -> [f64; NUM_CLASSES] {
    // exponential spacings give a uniform point on the simplex
    let e: [f64; NUM_CLASSES] = std::array::from_fn(|_| -(1.0 - r.random::<f64>()).ln());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Largest |soft_vote − coordinate mean| over 1000 draws of 5 members.
pub fn soft_vote_oracle_error() -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let mut r = stream(trial, "soft_vote", 0);
        let members: Vec<[f64; NUM_CLASSES]> = (0..5).map(|_| random_simplex(&mut r)).collect();
        let (probs, class) = soft_vote(&members).unwrap();
        for c in 0..NUM_CLASSES {
            let mut total = 0.0;
            for m in &members {
                total += m[c];
            }
            worst = worst.max((probs[c] - total / 5.0).abs());
        }
        let best = (0..NUM_CLASSES).fold(0, |b, c| if probs[c] > probs[b] { c } else { b });
        if class != best {
            return f64::INFINITY;
        }
    }
    worst
}

/// Constructed ties between every pair of classes resolve to the lower one.
pub fn soft_vote_ties() -> Check {
    for a in 0..NUM_CLASSES {
        for b in a + 1..NUM_CLASSES {
            let mut pa = [0.0; NUM_CLASSES];
            let mut pb = [0.0; NUM_CLASSES];
            pa[a] = 1.0;
            pb[b] = 1.0;
            for members in [vec![pa, pb], vec![pb, pa]] {
                let (_, class) = soft_vote(&members).unwrap();
                ensure(class == a, || format!("tie between {a} and {b} went to {class}"))?;
            }
        }
    }
    let (probs, class) = soft_vote(&[[1.0 / 6.0; NUM_CLASSES]]).unwrap();
    ensure(class == 0 && probs == [1.0 / 6.0; NUM_CLASSES], || "uniform vote".into())
}

fn check_bag(n: usize, fraction: f64, seed: u64) -> Check {
    let bag = bag_subsample(n, fraction, seed).map_err(|e| e.to_string())?;
    let k = (fraction * n as f64).round() as usize;
    ensure(bag.len() == k, || format!("N={n} fraction={fraction}: |bag|={} ≠ {k}", bag.len()))?;
    ensure(bag.windows(2).all(|w| w[0] < w[1]) && bag.iter().all(|&i| i < n), || {
        format!("N={n} seed={seed}: indices repeat or fall outside 0..N")
    })
}

/// Fixed sizes plus 200 fuzzed `(N, seed)` pairs at fraction 0.2.
pub fn bagging_contract() -> Check {
    check_bag(300_000, 0.2, 0)?;
    ensure(bag_subsample(300_000, 0.2, 0).unwrap().len() == 60_000, || "300000 → 60000".into())?;
    check_bag(600, 0.2, 1)?;
    ensure(bag_subsample(600, 0.2, 1).unwrap().len() == 120, || "600 → 120".into())?;
    let mut r = stream(0, "bag fuzz", 0);
    for _ in 0..200 {
        let n = r.random_range(3..50_000);
        check_bag(n, 0.2, r.random())?;
    }
    Ok(())
}

fn noise_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f32> {
    let mut r = stream(seed, "image", 0);
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| r.random()).collect()).unwrap()
}

pub fn flip_involution() -> Check {
    for seed in 0..200 {
        let mut r = stream(seed, "dims", 0);
        let img = noise_image(seed, r.random_range(1..4), r.random_range(1..20), r.random_range(1..20));
        ensure(horizontal_flip(&horizontal_flip(&img)) == img, || format!("seed {seed}"))?;
    }
    Ok(())
}

/// Pixel value strictly increasing in flat index, so any relocation breaks
/// monotonicity.
pub fn coordinate_coded(c: usize, h: usize, w: usize) -> Tensor<f32> {
    let n = c * h * w;
    Tensor::new(vec![c, h, w], (0..n).map(|i| (i as f32 + 0.5) / n as f32).collect()).unwrap()
}

/// The appearance view of a coordinate-coded image is a global monotone
/// intensity map of it: non-decreasing along the flat index everywhere and
/// strictly increasing away from the clamp bounds. Spatial augmentations
/// are all forced on to show they never reach this view.
pub fn appearance_preserves_positions() -> Check {
    let img = coordinate_coded(3, 64, 64);
    let sample = Sample {
        path: "coded.ppm".into(),
        image: img.clone(),
        expression: Expression::Happiness,
        landmarks: vec![[0.5, 0.5]; 68],
    };
    for jitter in [0.2, 0.9] {
        let cfg = AugmentConfig {
            jitter,
            flip_prob: 1.0,
            erase_prob: 1.0,
            ..AugmentConfig::default()
        };
        for seed in 0..500 {
            let (emotion, appearance) = apply_branch_pipelines(&sample, &cfg, seed);
            let d = appearance.data();
            for i in 1..d.len() {
                let interior = d[i - 1] > 0.0 && d[i] < 1.0;
                let ok = if interior { d[i] > d[i - 1] } else { d[i] >= d[i - 1] };
                ensure(ok, || format!("jitter {jitter} seed {seed}: pixel {i} moved"))?;
            }
            ensure(emotion != img, || format!("seed {seed}: emotion view untouched"))?;
        }
    }
    Ok(())
}

/// Largest |CE(mixed target) − (λ·CE(y_a) + (1−λ)·CE(y_b))|.
pub fn mix_ce_error() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..200 {
        let mut r = stream(seed, "mix", 0);
        let n = r.random_range(1..9);
        let a = Tensor::new(vec![n, 3, 4, 4], (0..n * 48).map(|_| r.random()).collect()).unwrap();
        let b = Tensor::new(vec![n, 3, 4, 4], (0..n * 48).map(|_| r.random()).collect()).unwrap();
        let ya: Vec<usize> = (0..n).map(|_| r.random_range(0..NUM_CLASSES)).collect();
        let yb: Vec<usize> = (0..n).map(|_| r.random_range(0..NUM_CLASSES)).collect();
        let (ta, tb) = (one_hot::<f32>(&ya).unwrap(), one_hot::<f32>(&yb).unwrap());
        let mixed = mix_augment(&a, &b, &ta, &tb, 0.2, &mut r).unwrap();
        let logits: Vec<f64> = (0..n * NUM_CLASSES).map(|_| r.random_range(-4.0..4.0)).collect();
        let logits = Tensor::from_f64(&[n, NUM_CLASSES], &logits).unwrap();
        let counts: [usize; NUM_CLASSES] = std::array::from_fn(|_| r.random_range(1..100));
        let w = ClassWeights::from_frequencies(&counts).unwrap();
        let ce = |t: &Tensor<f32>| weighted_cross_entropy(&logits, &t.cast::<f64>(), &w).unwrap();
        let l = mixed.lambda as f64;
        let lhs = ce(&mixed.mixed_targets());
        let rhs = l * ce(&mixed.target_a) + (1.0 - l) * ce(&mixed.target_b);
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

/// Saves to disk, loads back and compares predictions on 100 random
/// inputs bit for bit.
pub fn checkpoint_round_trip(dir: &std::path::Path) -> Check {
    let net = MtlNetwork::<f32>::build(&BackboneConfig::default(), 17).map_err(|e| e.to_string())?;
    let path = dir.join("round_trip.ckpt");
    checkpoint::save(&net, &path).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure(checkpoint::to_bytes(&loaded) == checkpoint::to_bytes(&net), || "re-serialized bytes differ".into())?;
    for chunk in 0..10u64 {
        let images = Tensor::new(
            vec![10, 3, 64, 64],
            {
                let mut r = stream(chunk, "inputs", 0);
                (0..10 * 3 * 64 * 64).map(|_| r.random()).collect()
            },
        )
        .unwrap();
        let a = net.predict_expression(&images).map_err(|e| e.to_string())?;
        let b = loaded.predict_expression(&images).map_err(|e| e.to_string())?;
        for (i, (pa, pb)) in a.iter().zip(&b).enumerate() {
            let same = pa.expr_probs.iter().zip(&pb.expr_probs).all(|(x, y)| x.to_bits() == y.to_bits())
                && pa.landmarks.iter().flatten().zip(pb.landmarks.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same, || format!("input {} differs", chunk * 10 + i as u64))?;
        }
    }
    Ok(())
}

