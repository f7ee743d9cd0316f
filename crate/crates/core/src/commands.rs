//! The `train`, `eval`, `wsol` and `visualize` commands.
//!
//! Every failure is tagged with the phase it happened in, which decides the
//! process exit code: 2 for configuration, 3 for data, 4 for checkpoints.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::autodiff::Tape;
use crate::config::{DatasetKind, HeadChoice, RunConfig};
use crate::data::{gen_synthetic, load_checkpoint, load_cifar10, make_batch, save_checkpoint, LabeledImage, MetricsLog, MetricsRow, Normalizer};
use crate::error::{Result, SaolError};
use crate::head::SaolModel;
use crate::tensor::Tensor;
use crate::train::{EvalReport, Trainer};
use crate::wsol::{self, loc_accuracy, random_box_baseline, LocMode, LocRecord, LocSummary, WsolConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Config,
    Data,
    Checkpoint,
    Run,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Config => "config",
            Phase::Data => "data",
            Phase::Checkpoint => "checkpoint",
            Phase::Run => "run",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{phase}: {source}")]
pub struct CommandError {
    pub phase: Phase,
    #[source]
    pub source: SaolError,
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match (self.phase, &self.source) {
            (Phase::Config, _) | (_, SaolError::Config(_)) => 2,
            (Phase::Data, _) => 3,
            (Phase::Checkpoint, _) => 4,
            (Phase::Run, _) => 1,
        }
    }
}

trait InPhase<T> {
    fn phase(self, phase: Phase) -> std::result::Result<T, CommandError>;
}

impl<T> InPhase<T> for Result<T> {
    fn phase(self, phase: Phase) -> std::result::Result<T, CommandError> {
        self.map_err(|source| CommandError { phase, source })
    }
}

pub type CommandResult<T> = std::result::Result<T, CommandError>;

/// Train and test splits plus the normalizer fitted on the training split.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub norm: Normalizer,
}

/// Offset separating the synthetic test split's seed from the training one.
const TEST_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn load_data(config: &RunConfig) -> Result<Datasets> {
    let (train, test) = match config.dataset {
        DatasetKind::Synthetic => (
            gen_synthetic(config.train_count, config.data_seed, config.image_size, config.num_classes)?,
            gen_synthetic(
                config.test_count,
                config.data_seed.wrapping_add(TEST_SEED_OFFSET),
                config.image_size,
                config.num_classes,
            )?,
        ),
        DatasetKind::Cifar10 => {
            let path = config
                .data_path
                .as_deref()
                .ok_or_else(|| SaolError::Config("cifar10 needs data_path".into()))?;
            let mut train = load_cifar10(path, false)?;
            let mut test = if path.is_dir() {
                load_cifar10(path, true)?
            } else {
                // a single file serves both splits: the test split is its tail
                let n = train.len().saturating_sub(config.test_count);
                train.split_off(n)
            };
            train.truncate(config.train_count);
            test.truncate(config.test_count);
            (train, test)
        }
    };
    if train.len() < 2 || test.is_empty() {
        return Err(SaolError::Argument("dataset too small to train and evaluate".into()));
    }
    let norm = Normalizer::fit(&train)?;
    Ok(Datasets { train, test, norm })
}

fn prepare_out_dir(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.out_dir).map_err(|e| SaolError::io(&config.out_dir, e))
}

/// Rebuilds the model stored in a checkpoint file.
pub fn load_model(config: &RunConfig, norm: &Normalizer, checkpoint: &Path) -> Result<Trainer> {
    let ck = load_checkpoint(checkpoint)?;
    Trainer::from_checkpoint(config.clone(), norm.clone(), &ck)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains from scratch, or from `resume`, writing the metrics log and a
/// checkpoint after every epoch into the output directory.
pub fn cmd_train(config: &RunConfig, resume: Option<&Path>) -> CommandResult<TrainOutcome> {
    config.validate().phase(Phase::Config)?;
    let data = load_data(config).phase(Phase::Data)?;
    prepare_out_dir(config).phase(Phase::Run)?;
    let ck_path = config.out_dir.join(CHECKPOINT_FILE);
    let log = MetricsLog::new(config.out_dir.join(METRICS_FILE));
    let mut trainer = match resume {
        Some(p) => load_model(config, &data.norm, p).phase(Phase::Checkpoint)?,
        None => {
            if log.path().exists() {
                fs::remove_file(log.path()).map_err(|e| SaolError::io(log.path(), e)).phase(Phase::Run)?;
            }
            Trainer::new(config.clone(), data.norm.clone()).phase(Phase::Config)?
        }
    };
    let cfg_path = config.out_dir.join("config.toml");
    fs::write(&cfg_path, config.to_toml()).map_err(|e| SaolError::io(&cfg_path, e)).phase(Phase::Run)?;
    info!(
        "training {} parameters on {} images for {} epochs",
        trainer.model.param_count(),
        data.train.len(),
        config.epochs
    );
    let rows = trainer
        .fit(&data.train, &data.test, |t, row| {
            log.append(row)?;
            save_checkpoint(&t.checkpoint(), &ck_path)
        })
        .phase(Phase::Run)?;
    if rows.is_empty() {
        // resumed past the last epoch: still leave a checkpoint behind
        save_checkpoint(&trainer.checkpoint(), &ck_path).phase(Phase::Checkpoint)?;
    }
    Ok(TrainOutcome {
        rows,
        checkpoint: ck_path,
        metrics: log.path().to_path_buf(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub head: HeadChoice,
}

impl EvalOutcome {
    /// Accuracy of the head selected for deployment.
    pub fn accuracy(&self) -> f64 {
        match self.head {
            HeadChoice::Saol => self.report.acc_saol,
            HeadChoice::Gapfc => self.report.acc_gapfc,
        }
    }
}

/// Test accuracy of both heads; written to `eval.csv`.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path) -> CommandResult<EvalOutcome> {
    config.validate().phase(Phase::Config)?;
    let data = load_data(config).phase(Phase::Data)?;
    let trainer = load_model(config, &data.norm, checkpoint).phase(Phase::Checkpoint)?;
    let report = trainer.evaluate(&data.test).phase(Phase::Run)?;
    prepare_out_dir(config).phase(Phase::Run)?;
    let path = config.out_dir.join("eval.csv");
    let selected = |h| if config.head == h { "1" } else { "0" };
    let text = format!(
        "head,accuracy,count,selected\nsaol,{},{},{}\ngapfc,{},{},{}\n",
        report.acc_saol,
        report.count,
        selected(HeadChoice::Saol),
        report.acc_gapfc,
        report.count,
        selected(HeadChoice::Gapfc)
    );
    fs::write(&path, text).map_err(|e| SaolError::io(&path, e)).phase(Phase::Run)?;
    Ok(EvalOutcome {
        report,
        head: config.head,
    })
}

/// SAOL maps of one image: attention `[1, H_o, W_o]` and spatial logits
/// `[K, H_o, W_o]`, plus the SAOL prediction.
#[derive(Clone, Debug)]
pub struct ImageMaps {
    pub attention: Tensor,
    pub spatial_logits: Tensor,
    pub pred_label: usize,
}

/// Forward passes over `data`, keeping the per-image maps.
pub fn saol_maps(model: &SaolModel, norm: &Normalizer, data: &[LabeledImage], batch: usize) -> Result<Vec<ImageMaps>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = make_batch(data, chunk, model.num_classes(), norm)?;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let o = model.forward(&mut tape, &p, xv)?;
        let a = tape.value(o.attention);
        let y = tape.value(o.spatial_logits);
        let preds = tape.value(o.final_logits).argmax_rows();
        for (n, pred_label) in preds.into_iter().enumerate() {
            out.push(ImageMaps {
                attention: a.gather_rows(&[n]),
                spatial_logits: y.gather_rows(&[n]),
                pred_label,
            });
        }
    }
    Ok(out)
}

/// Localization records using each image's ground-truth class map.
pub fn wsol_records(maps: &[ImageMaps], data: &[LabeledImage], config: &WsolConfig) -> Result<Vec<LocRecord>> {
    maps.iter()
        .zip(data)
        .enumerate()
        .map(|(i, (m, img))| {
            let (_, pred_box) = wsol::localize(&m.attention, &m.spatial_logits, img.label, img.size(), config)?;
            Ok(LocRecord {
                image_id: i,
                gt_label: img.label,
                pred_label: m.pred_label,
                gt_box: img.bbox,
                pred_box,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct WsolOutcome {
    pub records: Vec<LocRecord>,
    pub top1: LocSummary,
    pub gt_known: LocSummary,
    /// Hit rate of guessing another test image's box.
    pub random_baseline: f64,
    pub report: PathBuf,
    pub heatmaps: Vec<PathBuf>,
}

pub const BASELINE_TRIALS: usize = 20_000;

/// Localization accuracy on the test split, a report CSV, and heatmaps of
/// every class for the first `config.heatmaps` images.
pub fn cmd_wsol(config: &RunConfig, checkpoint: &Path) -> CommandResult<WsolOutcome> {
    config.validate().phase(Phase::Config)?;
    let data = load_data(config).phase(Phase::Data)?;
    let boxes: Vec<_> = data.test.iter().filter_map(|d| d.bbox).collect();
    if boxes.is_empty() {
        return Err(SaolError::Argument("dataset has no ground-truth boxes".into())).phase(Phase::Data);
    }
    let trainer = load_model(config, &data.norm, checkpoint).phase(Phase::Checkpoint)?;
    let wcfg = config.wsol_config();
    let run = || -> Result<WsolOutcome> {
        let maps = saol_maps(&trainer.model, &data.norm, &data.test, config.eval_batch_size)?;
        let records = wsol_records(&maps, &data.test, &wcfg)?;
        let random_baseline = if boxes.len() >= 2 {
            random_box_baseline(&boxes, BASELINE_TRIALS, wcfg.iou_threshold, config.seed)?
        } else {
            0.0
        };
        prepare_out_dir(config)?;
        let report = config.out_dir.join("wsol_report.csv");
        wsol::write_report(&report, &records, wcfg.iou_threshold)?;
        let dir = config.out_dir.join("heatmaps");
        fs::create_dir_all(&dir).map_err(|e| SaolError::io(&dir, e))?;
        let mut heatmaps = Vec::new();
        for (i, (m, img)) in maps.iter().zip(&data.test).take(config.heatmaps).enumerate() {
            for k in 0..config.num_classes {
                let raw = wsol::class_score_map(&m.attention, &m.spatial_logits, k)?;
                let (norm_map, _) = wsol::localize(&m.attention, &m.spatial_logits, k, img.size(), &wcfg)?;
                let stem = dir.join(format!("img{i:04}_class{k}"));
                let pgm = stem.with_extension("pgm");
                wsol::write_pgm(&pgm, &norm_map)?;
                wsol::write_map_csv(&stem.with_extension("csv"), &raw)?;
                heatmaps.push(pgm);
            }
        }
        Ok(WsolOutcome {
            top1: loc_accuracy(&records, LocMode::Top1, wcfg.iou_threshold),
            gt_known: loc_accuracy(&records, LocMode::GtKnown, wcfg.iou_threshold),
            records,
            random_baseline,
            report,
            heatmaps,
        })
    };
    run().phase(Phase::Run)
}

/// Binary PPM of a `[3, H, W]` image in `[0, 1]`.
pub fn write_ppm(path: &Path, pixels: &Tensor) -> Result<()> {
    let s = pixels.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(SaolError::Dimension(format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = pixels.data();
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| SaolError::io(path, e))
}

/// For the first `config.heatmaps` test images: the input, its attention
/// map and the predicted class's score map, under `visualize/`.
pub fn cmd_visualize(config: &RunConfig, checkpoint: &Path) -> CommandResult<Vec<PathBuf>> {
    config.validate().phase(Phase::Config)?;
    let data = load_data(config).phase(Phase::Data)?;
    let trainer = load_model(config, &data.norm, checkpoint).phase(Phase::Checkpoint)?;
    let run = || -> Result<Vec<PathBuf>> {
        let n = config.heatmaps.min(data.test.len());
        let subset = &data.test[..n];
        let maps = saol_maps(&trainer.model, &data.norm, subset, config.eval_batch_size)?;
        let dir = config.out_dir.join("visualize");
        fs::create_dir_all(&dir).map_err(|e| SaolError::io(&dir, e))?;
        let mut written = Vec::new();
        for (i, (m, img)) in maps.iter().zip(subset).enumerate() {
            let (h, w) = img.size();
            let input = dir.join(format!("img{i:04}_input.ppm"));
            write_ppm(&input, &img.pixels)?;
            let (oh, ow) = trainer.model.head.output_size();
            let att = wsol::min_max_normalize(&m.attention.clone().reshape([oh, ow])?);
            let att = if config.wsol_upsample { wsol::upsample_map(&att, h, w)? } else { att };
            let att_path = dir.join(format!("img{i:04}_attention.pgm"));
            wsol::write_pgm(&att_path, &att)?;
            let (cls, _) = wsol::localize(&m.attention, &m.spatial_logits, m.pred_label, (h, w), &config.wsol_config())?;
            let cls_path = dir.join(format!("img{i:04}_class{}.pgm", m.pred_label));
            wsol::write_pgm(&cls_path, &cls)?;
            written.extend([input, att_path, cls_path]);
        }
        Ok(written)
    };
    run().phase(Phase::Run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_phase() {
        let e = |phase, source| CommandError { phase, source };
        assert_eq!(e(Phase::Config, SaolError::Argument("x".into())).exit_code(), 2);
        assert_eq!(e(Phase::Data, SaolError::Format("x".into())).exit_code(), 3);
        assert_eq!(e(Phase::Checkpoint, SaolError::Format("x".into())).exit_code(), 4);
        assert_eq!(e(Phase::Run, SaolError::Config("x".into())).exit_code(), 2);
        assert_eq!(e(Phase::Run, SaolError::Domain("x".into())).exit_code(), 1);
    }

    #[test]
    fn missing_cifar_is_a_data_error_naming_the_path() {
        let cfg = RunConfig {
            dataset: DatasetKind::Cifar10,
            data_path: Some("/no/such/cifar".into()),
            num_classes: 10,
            ..RunConfig::default()
        };
        let err = cmd_train(&cfg, None).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("/no/such/cifar"));
    }
}
