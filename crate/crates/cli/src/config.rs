//! Run configuration: one TOML document per run.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/demo"
//!
//! [data]
//! root = "data"
//! val_fraction = 0.3333333333333333
//!
//! [train]
//! epochs = 30
//! lambda = 1.0
//!
//! [train.backbone]
//! variant = "standard"
//!
//! [ensemble]
//! member_count = 2
//! subsample_fraction = 0.2
//! [[ensemble.members]]
//! variant = "wide"
//! [[ensemble.members]]
//! variant = "slim"
//! seed = 11
//! ```
//!
//! Every seed not given explicitly derives from the global `seed` through
//! the named sub-streams `data`, `bag:i` and `train:i`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtl_fer::ensemble::{EnsembleConfig, MemberSpec};
use mtl_fer::model::BackboneVariant;
use mtl_fer::rng::derive_seed;
use mtl_fer::train::TrainConfig;
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    1.0 / 3.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSection {
    /// Defaults to the `[train.backbone]` variant.
    pub variant: Option<BackboneVariant>,
    /// Defaults to sub-stream `train:i` of the global seed.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub member_count: usize,
    #[serde(default = "default_fraction")]
    pub subsample_fraction: f64,
    /// Missing entries use the defaults of [`MemberSection`].
    #[serde(default)]
    pub members: Vec<MemberSection>,
}

fn default_fraction() -> f64 {
    0.2
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            member_count: 1,
            subsample_fraction: default_fraction(),
            members: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ensemble: EnsembleSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    /// Field-level checks that do not touch the file system.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            bail!("data.val_fraction must lie in (0, 1), got {}", self.data.val_fraction);
        }
        let e = &self.ensemble;
        if e.members.len() > e.member_count {
            bail!(
                "ensemble.members lists {} entries but ensemble.member_count is {}",
                e.members.len(),
                e.member_count
            );
        }
        self.ensemble_config().validate()?;
        Ok(())
    }

    /// Checks that the dataset directory looks usable.
    pub fn validate_paths(&self) -> Result<()> {
        for file in [mtl_fer::data::LABELS_FILE, mtl_fer::data::LANDMARKS_FILE] {
            let p = self.data.root.join(file);
            if !p.is_file() {
                bail!("data.root: {} not found", p.display());
            }
        }
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "data", 0)
    }

    pub fn member_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, "train", i as u64)
    }

    /// Training configuration of the single model trained by `train`.
    pub fn single_train_config(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = self.member_seed(0);
        cfg
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        let e = &self.ensemble;
        let members = (0..e.member_count)
            .map(|i| {
                let section = e.members.get(i);
                MemberSpec {
                    variant: section
                        .and_then(|m| m.variant)
                        .unwrap_or(self.train.backbone.variant),
                    seed: section.and_then(|m| m.seed).unwrap_or_else(|| self.member_seed(i)),
                }
            })
            .collect();
        EnsembleConfig {
            member_count: e.member_count,
            subsample_fraction: e.subsample_fraction,
            bag_seed: self.seed,
            members,
        }
    }
}
