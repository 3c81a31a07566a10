//! Single-model training.
//!
//! Each step builds both branch views per sample, optionally mixes the
//! emotion views pairwise inside the batch, and minimizes
//! `CE(expr) + lambda * MSE(landmarks)` with Adam. The expression term is
//! class-weighted by inverse training-set frequency.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_branch_pipelines, mix_augment, AugmentConfig};
use crate::autograd::{adam_step, mse_forward, AdamConfig, AdamState, Tape, Tensor};
use crate::data::{image_batch, landmark_batch, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{joint_loss_on, one_hot, ClassWeights};
use crate::metrics::{confusion_matrix, macro_f1, MetricsReport};
use crate::model::{BackboneConfig, MtlNetwork, Prediction};
use crate::rng;

/// Rows per inference chunk. Fixed so predictions never depend on the
/// execution mode.
pub const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the landmark loss.
    pub lambda: f64,
    /// When false the landmark loss is left off the tape entirely.
    pub landmark_task: bool,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub backbone: BackboneConfig,
    /// Set programmatically; run configurations derive it from their
    /// global seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lambda: 1.0,
            landmark_task: true,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            backbone: BackboneConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be a finite value >= 0, got {}", self.lambda)));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(Error::config(format!("adam.learning_rate must be positive, got {}", a.learning_rate)));
        }
        for (name, b) in [("adam.beta1", a.beta1), ("adam.beta2", a.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(a.epsilon > 0.0) {
            return Err(Error::config(format!("adam.epsilon must be positive, got {}", a.epsilon)));
        }
        self.augment.validate()?;
        self.backbone.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub expr_loss: f64,
    pub land_loss: f64,
    pub joint_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,expr_loss,land_loss,joint_loss,val_macro_f1";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.epoch, r.expr_loss, r.land_loss, r.joint_loss, r.val_macro_f1
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Validation metrics of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalMetrics {
    pub report: MetricsReport,
    /// Mean squared landmark error on the validation set.
    pub landmark_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedMember {
    pub network: MtlNetwork<f32>,
    pub config: TrainConfig,
    /// Training-set indices this member saw, ascending.
    pub bag: Vec<usize>,
    pub metrics: FinalMetrics,
}

/// Inference over `dataset` in fixed chunks of [`EVAL_CHUNK`] rows.
pub fn predict_dataset(net: &MtlNetwork<f32>, dataset: &DatasetManifest, exec: Exec) -> Result<Vec<Prediction>> {
    let chunks: Vec<&[Sample]> = dataset.samples.chunks(EVAL_CHUNK).collect();
    let out = exec.map(chunks, |chunk| {
        let refs: Vec<&Sample> = chunk.iter().collect();
        net.predict_expression(&image_batch(&refs)?)
    });
    let mut preds = Vec::with_capacity(dataset.len());
    for chunk in out {
        preds.extend(chunk?);
    }
    Ok(preds)
}

/// Macro-F1 report of predicted classes against the dataset labels.
pub fn report_for(dataset: &DatasetManifest, classes: &[usize]) -> Result<MetricsReport> {
    let truth: Vec<usize> = dataset.samples.iter().map(|s| s.expression.index()).collect();
    Ok(macro_f1(&confusion_matrix(&truth, classes)?))
}

/// Mean over samples and coordinates of the squared landmark error.
pub fn landmark_mse(dataset: &DatasetManifest, preds: &[Prediction]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (s, p) in dataset.samples.iter().zip(preds) {
        for (t, q) in s.landmarks.iter().zip(&p.landmarks) {
            for k in 0..2 {
                let d = f64::from(t[k]) - q[k];
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Single-model evaluation: macro-F1 report and landmark MSE.
pub fn evaluate_model(net: &MtlNetwork<f32>, dataset: &DatasetManifest, exec: Exec) -> Result<FinalMetrics> {
    let preds = predict_dataset(net, dataset, exec)?;
    let classes: Vec<usize> = preds.iter().map(Prediction::class).collect();
    Ok(FinalMetrics {
        report: report_for(dataset, &classes)?,
        landmark_mse: landmark_mse(dataset, &preds),
    })
}

struct StepLosses {
    expr: f64,
    land: f64,
    joint: f64,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    weights: Vec<f32>,
    exec: Exec,
    tape: Tape<f32>,
}

impl Trainer<'_> {
    fn step(
        &mut self,
        net: &mut MtlNetwork<f32>,
        adam: &mut AdamState<f32>,
        batch: &[&Sample],
        step_seed: u64,
    ) -> Result<Option<StepLosses>> {
        let cfg = self.cfg;
        let n = batch.len();
        let views = self.exec.map_range(n, |i| {
            apply_branch_pipelines(batch[i], &cfg.augment, rng::derive_seed(step_seed, "sample", i as u64))
        });
        let (emotion, appearance): (Vec<_>, Vec<_>) = views.into_iter().unzip();
        let emotion = Tensor::stack(&emotion.iter().collect::<Vec<_>>())?;
        let appearance = Tensor::stack(&appearance.iter().collect::<Vec<_>>())?;
        let classes: Vec<usize> = batch.iter().map(|s| s.expression.index()).collect();
        let targets = one_hot::<f32>(&classes)?;
        let landmarks = landmark_batch(batch)?;

        // Emotion rows: the mixed batch, preceded by the real batch when
        // the real term is on. Landmark supervision uses the first block.
        let mix = cfg.augment.mix_enabled && n > 1;
        let mut blocks = Vec::new();
        let mut block_targets = Vec::new();
        if !mix || cfg.augment.mix_real_term {
            blocks.push(emotion.clone());
            block_targets.push(targets.clone());
        }
        if mix {
            let mut r = rng::stream(step_seed, "mix", 0);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut r);
            let partner = gather_rows(&emotion, &perm)?;
            let partner_targets = one_hot::<f32>(&perm.iter().map(|&j| classes[j]).collect::<Vec<_>>())?;
            let mixed = mix_augment(&emotion, &partner, &targets, &partner_targets, cfg.augment.mix_alpha, &mut r)?;
            block_targets.push(mixed.mixed_targets());
            blocks.push(mixed.images);
        }
        let k = blocks.len();
        let stacked = concat_rows(&blocks)?;

        let tape = &mut self.tape;
        tape.reset();
        let p = net.params().bind(tape, true);
        let ev = tape.constant(stacked);
        let av = tape.constant(appearance);
        let out = net.forward_stacked(tape, &p, ev, av)?;

        let mut expr = None;
        for (j, t) in block_targets.iter().enumerate() {
            let rows = tape.slice_rows(out.expr_logits, j * n, n)?;
            let ce = tape.weighted_cross_entropy(rows, t, &self.weights)?;
            expr = Some(match expr {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
        }
        // The partner batch is a row permutation of the real one, so the
        // real term ½(CE(a) + CE(b)) is just the real block's CE.
        let expr = expr.expect("at least one block");
        let land_rows = if k == 1 {
            out.land_pred
        } else {
            tape.slice_rows(out.land_pred, 0, n)?
        };
        let (loss, land_value) = if cfg.landmark_task {
            let land = tape.mse(land_rows, &landmarks)?;
            let v = f64::from(tape.value(land).item());
            (joint_loss_on(tape, expr, land, cfg.lambda)?, v)
        } else {
            (expr, f64::from(mse_forward(tape.value(land_rows), &landmarks)?))
        };
        let expr_value = f64::from(tape.value(expr).item());
        let joint_value = f64::from(tape.value(loss).item());
        if !(expr_value.is_finite() && land_value.is_finite() && joint_value.is_finite()) {
            return Ok(None);
        }
        tape.backward(loss)?;
        let grads = p.grads(tape);
        let mut params: Vec<&mut Tensor<f32>> = net.params_mut().iter_mut().map(|np| &mut np.value).collect();
        adam_step(&mut params, &grads, adam)?;
        Ok(Some(StepLosses {
            expr: expr_value,
            land: land_value,
            joint: joint_value,
        }))
    }
}

fn gather_rows(batch: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let data = rows.iter().flat_map(|&i| batch.row(i).iter().copied()).collect();
    Tensor::new(batch.shape().to_vec(), data)
}

fn concat_rows(blocks: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = blocks[0].shape().to_vec();
    shape[0] = blocks.iter().map(|b| b.dim(0)).sum();
    let data = blocks.iter().flat_map(|b| b.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// Trains one model on `train` and reports validation metrics after every
/// epoch. Deterministic in `cfg.seed` for either execution mode.
pub fn train_single(
    train: &DatasetManifest,
    val: &DatasetManifest,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(TrainedMember, TrainingLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let weights = ClassWeights::from_frequencies(&train.class_counts())?;
    let mut net = MtlNetwork::<f32>::build(&cfg.backbone, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam, net.params().iter().map(|p| &p.value));
    let mut trainer = Trainer {
        cfg,
        weights: weights.as_scalars(),
        exec,
        tape: Tape::new(),
    };
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
        let (mut expr, mut land, mut joint) = (0.0, 0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let step_seed = rng::derive_seed(cfg.seed, "augment", ((epoch as u64) << 32) | b as u64);
            let Some(losses) = trainer.step(&mut net, &mut adam, &batch, step_seed)? else {
                return Err(Error::Diverged {
                    epoch,
                    last_finite_epoch: log.records.last().map(|r| r.epoch),
                });
            };
            let w = batch.len() as f64;
            expr += losses.expr * w;
            land += losses.land * w;
            joint += losses.joint * w;
        }
        let total = train.len() as f64;
        let val_f1 = if val.is_empty() {
            0.0
        } else {
            evaluate_model(&net, val, exec)?.report.macro_f1
        };
        let record = EpochRecord {
            epoch,
            expr_loss: expr / total,
            land_loss: land / total,
            joint_loss: joint / total,
            val_macro_f1: val_f1,
        };
        log::info!(
            "epoch {epoch}: expr {:.4} land {:.5} joint {:.4} val_f1 {:.4}",
            record.expr_loss,
            record.land_loss,
            record.joint_loss,
            record.val_macro_f1
        );
        log.records.push(record);
    }
    let metrics = if val.is_empty() {
        FinalMetrics {
            report: report_for(val, &[])?,
            landmark_mse: 0.0,
        }
    } else {
        evaluate_model(&net, val, exec)?
    };
    Ok((
        TrainedMember {
            network: net,
            config: cfg.clone(),
            bag: (0..train.len()).collect(),
            metrics,
        },
        log,
    ))
}
