//! SGD with momentum, the cosine schedule, and the training/evaluation loop.

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::cutmix::{downsample_mask, sample_cutmix_with, CutMixBatch};
use crate::data::{augment, make_batch, Checkpoint, LabeledImage, MetricsRow, Normalizer};
use crate::error::{Result, SaolError};
use crate::head::SaolModel;
use crate::losses::{loss_ce, loss_sd, loss_ss1, loss_ss2, loss_total, LossConfig, LossParts};
use crate::params::{Bound, Param, ParamStore};
use crate::tensor::Tensor;

/// `0.5·η₀·(1 + cos(π·t/T))` for fractional epoch `t` of `T`.
pub fn cosine_lr(eta0: f64, t: f64, total: f64) -> f64 {
    0.5 * eta0 * (1.0 + (std::f64::consts::PI * t / total).cos())
}

fn round_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μv + (g + λp)`, `p ← p − η·v`.
///
/// Parameters and velocities are rounded to `f32` after every update, so
/// the checkpoint format holds the full training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.velocity.len(), "one gradient per parameter");
        for ((id, g), v) in store.ids().collect::<Vec<_>>().into_iter().zip(grads).zip(&mut self.velocity) {
            let p = store.get_mut(id);
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
            round_f32(p);
            round_f32(v);
        }
    }
}

/// Network input and targets of one step, after optional CutMix.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    pub input: Tensor,
    pub labels: Tensor,
    pub cutmix: Option<CutMixBatch>,
}

/// Applies CutMix to a clean batch when the configuration asks for it.
pub fn prepare_step(x: Tensor, y: Tensor, config: &RunConfig, rng: &mut impl Rng) -> Result<StepBatch> {
    let n = x.shape()[0];
    if config.cutmix && n >= 2 && rng.random_bool(config.cutmix_prob) {
        let cm = sample_cutmix_with(&x, &y, config.cutmix_alpha, rng)?;
        Ok(StepBatch {
            input: cm.mixed.clone(),
            labels: cm.mixed_labels.clone(),
            cutmix: Some(cm),
        })
    } else {
        Ok(StepBatch {
            input: x,
            labels: y,
            cutmix: None,
        })
    }
}

/// Records the full training objective on `tape`. The mask and spatial
/// self-supervision terms need a CutMix batch; the patch-source logits are
/// computed with the same parameters and detached inside the loss.
pub fn build_objective(
    model: &SaolModel,
    loss: &LossConfig,
    tape: &mut Tape,
    p: &Bound,
    batch: &StepBatch,
) -> Result<(Var, LossParts)> {
    let eps = loss.epsilon;
    let xv = tape.constant(batch.input.clone());
    let yv = tape.constant(batch.labels.clone());
    let out = model.forward(tape, p, xv)?;
    let mut parts = LossParts {
        sl: loss_ce(tape, out.final_logits, yv, eps)?,
        ss1: None,
        ss2: None,
        sd: None,
        gapfc_ce: None,
    };
    if let Some(c) = &batch.cutmix {
        if loss.enable_ss1 || loss.enable_ss2 {
            let (ho, wo) = model.head.output_size();
            let m = downsample_mask(&c.mask, ho, wo)?;
            if loss.enable_ss1 {
                let mv = tape.constant(m.clone());
                parts.ss1 = Some(loss_ss1(tape, out.mask_pred, mv, eps)?);
            }
            if loss.enable_ss2 {
                let xa = tape.constant(c.source.clone());
                let ya = model.spatial_logits(tape, p, xa)?;
                parts.ss2 = Some(loss_ss2(tape, out.spatial_logits, ya, &m, eps)?);
            }
        }
    }
    if loss.enable_sd {
        parts.sd = Some(loss_sd(tape, out.final_logits, out.gapfc_logits, yv, loss.beta, eps)?);
    } else if loss.gapfc_ce {
        parts.gapfc_ce = Some(loss_ce(tape, out.gapfc_logits, yv, eps)?);
    }
    let total = loss_total(tape, &parts, loss)?;
    Ok((total, parts))
}

/// Loss terms of one step; absent terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub sl: f64,
    pub ss1: f64,
    pub ss2: f64,
    pub sd: f64,
    pub total: f64,
}

impl StepLosses {
    fn accumulate(&mut self, o: &StepLosses) {
        self.sl += o.sl;
        self.ss1 += o.ss1;
        self.ss2 += o.ss2;
        self.sd += o.sd;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        for v in [&mut self.sl, &mut self.ss1, &mut self.ss2, &mut self.sd, &mut self.total] {
            *v *= s;
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub acc_saol: f64,
    pub acc_gapfc: f64,
    pub count: usize,
}

/// Model, optimizer state and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: SaolModel,
    pub optimizer: Sgd,
    pub norm: Normalizer,
    /// Completed epochs.
    pub epoch: u64,
    pub step: u64,
    loss: LossConfig,
}

impl Trainer {
    pub fn new(config: RunConfig, norm: Normalizer) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = SaolModel::new(config.backbone_config(), config.saol_config(), &mut rng)?;
        for p in model.params.ids().collect::<Vec<_>>() {
            round_f32(model.params.get_mut(p));
        }
        let optimizer = Sgd::new(&model.params, config.momentum, config.weight_decay);
        let loss = config.loss_config();
        Ok(Trainer {
            config,
            model,
            optimizer,
            norm,
            epoch: 0,
            step: 0,
            loss,
        })
    }

    /// Rebuilds the trainer state stored in `ck`.
    pub fn from_checkpoint(config: RunConfig, norm: Normalizer, ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config, norm)?;
        t.model.params.load_from(&ck.params)?;
        if !ck.momentum.is_empty() {
            let mut vel = t.model.params.clone();
            vel.load_from(&ck.momentum)?;
            t.optimizer.velocity = vel.iter().map(|p| p.value.clone()).collect();
        }
        t.epoch = ck.epoch;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params: Vec<Param> = self.model.params.as_slice().to_vec();
        let momentum = params
            .iter()
            .zip(&self.optimizer.velocity)
            .map(|(p, v)| Param {
                name: p.name.clone(),
                value: v.clone(),
            })
            .collect();
        Checkpoint {
            params,
            momentum,
            epoch: self.epoch,
            step: self.step,
            seed: self.config.seed,
        }
    }

    /// RNG for the data order, augmentation and CutMix of `epoch`.
    fn epoch_rng(&self, epoch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch + 1);
        rng
    }

    /// One optimizer update on a batch of inputs `[N, C, H, W]` and labels
    /// `[N, K]`.
    pub fn train_step(&mut self, x: Tensor, y: Tensor, lr: f64, rng: &mut impl Rng) -> Result<StepLosses> {
        let batch = prepare_step(x, y, &self.config, rng)?;
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, true);
        let (total, parts) = build_objective(&self.model, &self.loss, &mut tape, &p, &batch)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let losses = StepLosses {
            sl: tape.value(parts.sl).item(),
            ss1: value(parts.ss1),
            ss2: value(parts.ss2),
            sd: value(parts.sd.or(parts.gapfc_ce)),
            total: tape.value(total).item(),
        };
        if !losses.total.is_finite() {
            return Err(SaolError::Domain(format!("non-finite loss at step {}", self.step)));
        }
        let mut grads = tape.backward(total)?;
        let g = p.collect_grads(&self.model.params, &mut grads);
        drop(tape);
        self.optimizer.step(&mut self.model.params, &g, lr);
        self.step += 1;
        Ok(losses)
    }

    /// One pass over `train`; returns the mean loss terms.
    pub fn train_epoch(&mut self, train: &[LabeledImage]) -> Result<StepLosses> {
        if train.len() < 2 {
            return Err(SaolError::Argument("training needs at least two images".into()));
        }
        let mut rng = self.epoch_rng(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let bs = self.config.batch_size;
        // a trailing batch of one cannot be mixed
        let batches: Vec<&[usize]> = order.chunks(bs).filter(|c| c.len() >= 2).collect();
        let mut sum = StepLosses::default();
        for (b, idx) in batches.iter().enumerate() {
            let t = self.epoch as f64 + b as f64 / batches.len() as f64;
            let lr = cosine_lr(self.config.lr, t, self.config.epochs as f64);
            let (x, y) = if self.config.augment {
                let imgs: Vec<LabeledImage> = idx
                    .iter()
                    .map(|&i| LabeledImage {
                        pixels: augment(&train[i].pixels, 4, &mut rng),
                        ..train[i].clone()
                    })
                    .collect();
                make_batch(&imgs, &(0..imgs.len()).collect::<Vec<_>>(), self.config.num_classes, &self.norm)?
            } else {
                make_batch(train, idx, self.config.num_classes, &self.norm)?
            };
            let s = self.train_step(x, y, lr, &mut rng)?;
            sum.accumulate(&s);
        }
        self.epoch += 1;
        Ok(sum.scaled(1.0 / batches.len() as f64))
    }

    /// Top-1 accuracy of both heads. Does not touch the training state.
    pub fn evaluate(&self, data: &[LabeledImage]) -> Result<EvalReport> {
        evaluate(&self.model, &self.norm, data, self.config.eval_batch_size)
    }

    /// Trains from the current epoch to the configured total, evaluating on
    /// `test` after each epoch and handing every row to `on_epoch`.
    pub fn fit(
        &mut self,
        train: &[LabeledImage],
        test: &[LabeledImage],
        mut on_epoch: impl FnMut(&Trainer, &MetricsRow) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.epoch < self.config.epochs {
            let l = self.train_epoch(train)?;
            let e = self.evaluate(test)?;
            let row = MetricsRow {
                epoch: self.epoch,
                step: self.step,
                loss_sl: l.sl,
                loss_ss1: l.ss1,
                loss_ss2: l.ss2,
                loss_sd: l.sd,
                acc_saol: e.acc_saol,
                acc_gapfc: e.acc_gapfc,
            };
            info!(
                "epoch {} loss {:.4} (sl {:.4}) acc saol {:.4} gapfc {:.4}",
                row.epoch, l.total, l.sl, e.acc_saol, e.acc_gapfc
            );
            on_epoch(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Predicted classes of both heads for `data`, in order.
pub fn predict(model: &SaolModel, norm: &Normalizer, data: &[LabeledImage], batch: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut saol, mut gapfc) = (Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = make_batch(data, chunk, model.num_classes(), norm)?;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, &p, xv)?;
        saol.extend(tape.value(out.final_logits).argmax_rows());
        gapfc.extend(tape.value(out.gapfc_logits).argmax_rows());
    }
    Ok((saol, gapfc))
}

pub fn evaluate(model: &SaolModel, norm: &Normalizer, data: &[LabeledImage], batch: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(SaolError::Argument("evaluation set is empty".into()));
    }
    let (saol, gapfc) = predict(model, norm, data, batch)?;
    let acc = |pred: &[usize]| {
        pred.iter().zip(data).filter(|(p, d)| **p == d.label).count() as f64 / data.len() as f64
    };
    Ok(EvalReport {
        acc_saol: acc(&saol),
        acc_gapfc: acc(&gapfc),
        count: data.len(),
    })
}

/// Area under the ROC curve of `scores` for binary `labels`, with ties
/// counted as one half. `None` when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut rank_sum, mut pos) = (0.0, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // average 1-based rank of the tie group
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            if labels[k] {
                rank_sum += rank;
                pos += 1;
            }
        }
        i = j;
    }
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Pixel AUC of the mask head predicting the downsampled CutMix mask on
/// freshly mixed batches of `data`; cells with coverage ≥ 0.5 count as
/// positive.
pub fn mask_auc(model: &SaolModel, norm: &Normalizer, data: &[LabeledImage], alpha: f64, batch: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ho, wo) = model.head.output_size();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(2)).filter(|c| c.len() >= 2) {
        let (x, y) = make_batch(data, chunk, model.num_classes(), norm)?;
        let cm = sample_cutmix_with(&x, &y, alpha, &mut rng)?;
        let m = downsample_mask(&cm.mask, ho, wo)?;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let xv = tape.constant(cm.mixed);
        let out = model.forward(&mut tape, &p, xv)?;
        scores.extend_from_slice(tape.value(out.mask_pred).data());
        labels.extend(m.data().iter().map(|&v| v >= 0.5));
    }
    roc_auc(&scores, &labels).ok_or_else(|| SaolError::Argument("mask AUC needs both classes".into()))
}
