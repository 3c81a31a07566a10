//! Bagged ensembles: members trained on independent random subsamples,
//! combined by averaging their class probabilities.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::expression::NUM_CLASSES;
use crate::metrics::MetricsReport;
use crate::model::{argmax, BackboneVariant, MtlNetwork};
use crate::rng;
use crate::train::{predict_dataset, report_for, train_single, TrainConfig, TrainedMember};

const SIMPLEX_TOLERANCE: f64 = 1e-5;

/// `round(fraction * n)` distinct indices drawn uniformly from `0..n`,
/// returned in ascending order.
pub fn bag_subsample(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::usage(format!("subsample fraction must lie in (0, 1], got {fraction}")));
    }
    let k = (fraction * n as f64).round() as usize;
    if k == 0 {
        return Err(Error::usage(format!(
            "subsample of {n} samples at fraction {fraction} would be empty"
        )));
    }
    let mut bag = rand::seq::index::sample(&mut rng::stream(seed, "bag", 0), n, k).into_vec();
    bag.sort_unstable();
    Ok(bag)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub variant: BackboneVariant,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub member_count: usize,
    pub subsample_fraction: f64,
    /// Member `i` draws its bag from sub-stream `bag:i` of this seed.
    pub bag_seed: u64,
    pub members: Vec<MemberSpec>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        let variants = BackboneVariant::ALL;
        EnsembleConfig {
            member_count: 3,
            subsample_fraction: 0.2,
            bag_seed: 0,
            members: (0..3)
                .map(|i| MemberSpec {
                    variant: variants[i % variants.len()],
                    seed: i as u64,
                })
                .collect(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.member_count == 0 {
            return Err(Error::config("ensemble.member_count must be at least 1"));
        }
        if self.members.len() != self.member_count {
            return Err(Error::config(format!(
                "ensemble.members lists {} members but member_count is {}",
                self.members.len(),
                self.member_count
            )));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::config(format!(
                "ensemble.subsample_fraction must lie in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        Ok(())
    }

    pub fn bag_for(&self, member: usize, n: usize) -> Result<Vec<usize>> {
        bag_subsample(n, self.subsample_fraction, rng::derive_seed(self.bag_seed, "bag", member as u64))
    }
}

/// Trains every member on its own bag. Members that diverge are dropped
/// with a warning; at least one must survive.
pub fn train_ensemble(
    train: &DatasetManifest,
    val: &DatasetManifest,
    base: &TrainConfig,
    ecfg: &EnsembleConfig,
    exec: Exec,
) -> Result<Vec<TrainedMember>> {
    ecfg.validate()?;
    base.validate()?;
    let jobs: Vec<usize> = (0..ecfg.member_count).collect();
    let results = exec.map(jobs, |i| -> Result<Option<TrainedMember>> {
        let spec = &ecfg.members[i];
        let bag = ecfg.bag_for(i, train.len())?;
        let subset = train.subset(&bag)?;
        let mut cfg = base.clone();
        cfg.seed = spec.seed;
        cfg.backbone.variant = spec.variant;
        match train_single(&subset, val, &cfg, exec) {
            Ok((mut member, _)) => {
                member.bag = bag;
                Ok(Some(member))
            }
            Err(Error::Diverged { epoch, last_finite_epoch }) => {
                log::warn!(
                    "member {i} ({} seed {}) diverged at epoch {epoch} (last finite: {last_finite_epoch:?}); excluded",
                    spec.variant,
                    spec.seed
                );
                Ok(None)
            }
            Err(e) => Err(e),
        }
    });
    let mut members = Vec::new();
    for r in results {
        members.extend(r?);
    }
    if members.is_empty() {
        return Err(Error::usage("every ensemble member diverged"));
    }
    Ok(members)
}

/// Mean of member probability vectors and its argmax (lowest index on
/// ties). Members are reduced in a canonical order, so the result does
/// not depend on how they are listed.
pub fn soft_vote(member_probs: &[[f64; NUM_CLASSES]]) -> Result<([f64; NUM_CLASSES], usize)> {
    if member_probs.is_empty() {
        return Err(Error::usage("soft_vote: no member probabilities"));
    }
    for (m, p) in member_probs.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&v| !(v >= -SIMPLEX_TOLERANCE)) || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::usage(format!(
                "soft_vote: member {m} is not a probability vector (sum {sum})"
            )));
        }
    }
    let mut ordered: Vec<&[f64; NUM_CLASSES]> = member_probs.iter().collect();
    ordered.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut probs = [0.0; NUM_CLASSES];
    for p in ordered {
        for (acc, v) in probs.iter_mut().zip(p) {
            *acc += v;
        }
    }
    let k = member_probs.len() as f64;
    for v in &mut probs {
        *v /= k;
    }
    Ok((probs, argmax(&probs)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub path: String,
    pub class: usize,
    pub probs: [f64; NUM_CLASSES],
}

/// Soft-voted predictions for every sample, and their macro-F1 report.
pub fn evaluate(
    members: &[&MtlNetwork<f32>],
    dataset: &DatasetManifest,
    exec: Exec,
) -> Result<(MetricsReport, Vec<EnsemblePrediction>)> {
    if members.is_empty() {
        return Err(Error::usage("evaluate: no ensemble members"));
    }
    let per_member = members
        .iter()
        .map(|net| predict_dataset(net, dataset, exec))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(dataset.len());
    for (i, sample) in dataset.samples.iter().enumerate() {
        let probs: Vec<[f64; NUM_CLASSES]> = per_member.iter().map(|p| p[i].expr_probs).collect();
        let (probs, class) = soft_vote(&probs)?;
        out.push(EnsemblePrediction {
            path: sample.path.clone(),
            class,
            probs,
        });
    }
    let classes: Vec<usize> = out.iter().map(|p| p.class).collect();
    Ok((report_for(dataset, &classes)?, out))
}

/// `path,pred_class,p0,...,p5`, probabilities to 9 decimals.
pub fn predictions_csv(preds: &[EnsemblePrediction]) -> String {
    let mut out = String::from("path,pred_class");
    for c in 0..NUM_CLASSES {
        write!(out, ",p{c}").expect("writing to a String");
    }
    out.push('\n');
    for p in preds {
        write!(out, "{},{}", p.path, p.class).expect("writing to a String");
        for v in p.probs {
            write!(out, ",{v:.9}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorMember {
    /// Relative to the descriptor's directory.
    pub checkpoint: PathBuf,
    pub variant: BackboneVariant,
    pub seed: u64,
    pub bag_size: usize,
}

/// On-disk description of a trained ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleDescriptor {
    pub subsample_fraction: f64,
    pub bag_seed: u64,
    pub members: Vec<DescriptorMember>,
}

impl EnsembleDescriptor {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::load(format!("descriptor: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::load(format!("{}: {e}", path.display())))
    }

    /// Absolute checkpoint paths; errors list every missing file.
    pub fn checkpoint_paths(&self, descriptor_path: &Path) -> Result<Vec<PathBuf>> {
        let base = descriptor_path.parent().unwrap_or(Path::new("."));
        let paths: Vec<PathBuf> = self.members.iter().map(|m| base.join(&m.checkpoint)).collect();
        let missing: Vec<String> = paths
            .iter()
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::load(format!("missing member checkpoints: {}", missing.join(", "))));
        }
        Ok(paths)
    }
}
