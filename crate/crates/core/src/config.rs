//! Run configuration: a flat TOML file of documented keys.
//!
//! ```toml
//! dataset = "synthetic"
//! num_classes = 3
//! base_channels = [8, 16, 32]
//! epochs = 30
//! lr = 0.1
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Result, SaolError};
use crate::head::SaolConfig;
use crate::losses::LossConfig;
use crate::wsol::WsolConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Synthetic,
}

/// Output layer used for reported predictions at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadChoice {
    Saol,
    Gapfc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    /// CIFAR-10 batch file or directory.
    pub data_path: Option<PathBuf>,
    /// Training images used (synthetic: generated; CIFAR: leading subset).
    pub train_count: usize,
    pub test_count: usize,
    /// Seed of the synthetic generator, independent of the training seed.
    pub data_seed: u64,
    /// Synthetic image side.
    pub image_size: usize,
    pub num_classes: usize,
    /// Random crop and flip on training images.
    pub augment: bool,

    pub base_channels: Vec<usize>,
    pub width_factor: usize,
    pub strides: Vec<usize>,
    pub layers_per_block: usize,
    pub output_size: Option<(usize, usize)>,
    pub fused_blocks: Option<Vec<usize>>,
    pub mid_channels: Option<usize>,

    pub cutmix: bool,
    pub cutmix_alpha: f64,
    /// Probability that a training batch is mixed.
    pub cutmix_prob: f64,
    pub enable_ss1: bool,
    pub enable_ss2: bool,
    pub enable_sd: bool,
    pub gapfc_ce: bool,
    pub beta: f64,
    pub epsilon: f64,
    pub weight_sl: f64,
    pub weight_ss1: f64,
    pub weight_ss2: f64,
    pub weight_sd: f64,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Only `"cosine"` is supported.
    pub schedule: String,
    pub eval_batch_size: usize,

    pub seed: u64,
    pub out_dir: PathBuf,
    pub head: HeadChoice,

    pub wsol_threshold: f64,
    pub wsol_upsample: bool,
    /// Images whose heatmaps are exported by `wsol` and `visualize`.
    pub heatmaps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        let loss = LossConfig::default();
        let wsol = WsolConfig::default();
        RunConfig {
            dataset: DatasetKind::Synthetic,
            data_path: None,
            train_count: 2000,
            test_count: 500,
            data_seed: 0,
            image_size: 32,
            num_classes: 3,
            augment: false,
            base_channels: bb.base_channels,
            width_factor: bb.width_factor,
            strides: bb.strides,
            layers_per_block: bb.layers_per_block,
            output_size: None,
            fused_blocks: None,
            mid_channels: None,
            cutmix: true,
            cutmix_alpha: 1.0,
            cutmix_prob: 1.0,
            enable_ss1: loss.enable_ss1,
            enable_ss2: loss.enable_ss2,
            enable_sd: loss.enable_sd,
            gapfc_ce: loss.gapfc_ce,
            beta: loss.beta,
            epsilon: loss.epsilon,
            weight_sl: loss.weight_sl,
            weight_ss1: loss.weight_ss1,
            weight_ss2: loss.weight_ss2,
            weight_sd: loss.weight_sd,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 64,
            schedule: "cosine".into(),
            eval_batch_size: 100,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            head: HeadChoice::Saol,
            wsol_threshold: wsol.threshold,
            wsol_upsample: wsol.upsample,
            heatmaps: 8,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SaolError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SaolError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            SaolError::Config(m) => SaolError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SaolError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 || self.eval_batch_size < 1 {
            return bad("batch_size must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be >= 0".into());
        }
        if self.schedule != "cosine" {
            return bad(format!("unknown schedule {:?}", self.schedule));
        }
        if !(self.cutmix_alpha > 0.0) || !(0.0..=1.0).contains(&self.cutmix_prob) {
            return bad("cutmix_alpha must be > 0 and cutmix_prob in [0, 1]".into());
        }
        if self.train_count == 0 || self.test_count == 0 {
            return bad("train_count and test_count must be positive".into());
        }
        if self.dataset == DatasetKind::Cifar10 {
            if self.data_path.is_none() {
                return bad("cifar10 needs data_path".into());
            }
            if self.num_classes != 10 || self.image_size != 32 {
                return bad("cifar10 has 10 classes of 32x32 images".into());
            }
        }
        self.backbone_config().validate()?;
        self.loss_config().validate()?;
        self.wsol_config().validate()?;
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            base_channels: self.base_channels.clone(),
            width_factor: self.width_factor,
            strides: self.strides.clone(),
            layers_per_block: self.layers_per_block,
            in_channels: 3,
            input_size: (self.image_size, self.image_size),
        }
    }

    pub fn saol_config(&self) -> SaolConfig {
        SaolConfig {
            num_classes: self.num_classes,
            output_size: self.output_size,
            fused_blocks: self.fused_blocks.clone(),
            mid_channels: self.mid_channels,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            enable_ss1: self.enable_ss1,
            enable_ss2: self.enable_ss2,
            enable_sd: self.enable_sd,
            gapfc_ce: self.gapfc_ce,
            beta: self.beta,
            epsilon: self.epsilon,
            weight_sl: self.weight_sl,
            weight_ss1: self.weight_ss1,
            weight_ss2: self.weight_ss2,
            weight_sd: self.weight_sd,
        }
    }

    pub fn wsol_config(&self) -> WsolConfig {
        WsolConfig {
            threshold: self.wsol_threshold,
            upsample: self.wsol_upsample,
            ..WsolConfig::default()
        }
    }
}
