//! Training objectives: supervised cross-entropy, the two CutMix
//! self-supervision losses, self-distillation, and their weighted total.
//!
//! All divergences are `D_KL(target ‖ prediction)` with the target detached,
//! so adjoints only reach the prediction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SaolError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Mask-prediction BCE on CutMix batches.
    pub enable_ss1: bool,
    /// Masked spatial-logit KL on CutMix batches.
    pub enable_ss2: bool,
    /// SAOL → GAP-FC self-distillation.
    pub enable_sd: bool,
    /// Train the GAP-FC head with plain cross-entropy when distillation is
    /// off (the CE side of the distillation ablation).
    pub gapfc_ce: bool,
    pub beta: f64,
    pub epsilon: f64,
    pub weight_sl: f64,
    pub weight_ss1: f64,
    pub weight_ss2: f64,
    pub weight_sd: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            enable_ss1: true,
            enable_ss2: true,
            enable_sd: true,
            gapfc_ce: false,
            beta: 0.5,
            epsilon: 1e-12,
            weight_sl: 1.0,
            weight_ss1: 1.0,
            weight_ss2: 1.0,
            weight_sd: 1.0,
        }
    }
}

impl LossConfig {
    /// Supervised term only.
    pub fn ce_only() -> Self {
        LossConfig {
            enable_ss1: false,
            enable_ss2: false,
            enable_sd: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(SaolError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(SaolError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        let w = [self.weight_sl, self.weight_ss1, self.weight_ss2, self.weight_sd];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SaolError::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn check_range(t: &Tensor, what: &str, hi: Option<f64>) -> Result<()> {
    for &v in t.data() {
        if v.is_nan() || v < 0.0 || hi.is_some_and(|h| v > h) {
            return Err(SaolError::Domain(format!("{what} contains {v}")));
        }
    }
    Ok(())
}

fn same_shape(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(SaolError::Dimension(format!(
            "shape mismatch {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// `−mean_n Σ_k y_k log(ŷ_k + ε)` for `[N, K]` probabilities and soft labels.
pub fn loss_ce(tape: &mut Tape, probs: Var, labels: Var, eps: f64) -> Result<Var> {
    same_shape(tape, probs, labels)?;
    check_range(tape.value(probs), "predicted probabilities", None)?;
    check_range(tape.value(labels), "labels", None)?;
    let n = tape.shape(probs)[0] as f64;
    let shifted = tape.add_scalar(probs, eps);
    let logp = tape.log(shifted);
    let prod = tape.mul(labels, logp)?;
    let s = tape.sum_all(prod);
    Ok(tape.scale(s, -1.0 / n))
}

/// Binary cross-entropy averaged over every pixel and sample.
pub fn loss_ss1(tape: &mut Tape, mask_pred: Var, mask_target: Var, eps: f64) -> Result<Var> {
    same_shape(tape, mask_pred, mask_target)?;
    check_range(tape.value(mask_pred), "predicted mask", Some(1.0))?;
    check_range(tape.value(mask_target), "target mask", Some(1.0))?;
    let count = tape.value(mask_pred).numel() as f64;
    let p = tape.add_scalar(mask_pred, eps);
    let log_p = tape.log(p);
    let q = tape.affine(mask_pred, -1.0, 1.0 + eps);
    let log_q = tape.log(q);
    let inv_target = tape.affine(mask_target, -1.0, 1.0);
    let a = tape.mul(mask_target, log_p)?;
    let b = tape.mul(inv_target, log_q)?;
    let both = tape.add(a, b)?;
    let s = tape.sum_all(both);
    Ok(tape.scale(s, -1.0 / count))
}

/// Per-row `Σ_k p log(p + ε)` of a constant distribution tensor, with the
/// class axis at position 1 collapsed to extent 1.
fn neg_entropy(p: &Tensor, eps: f64) -> Tensor {
    let shape = p.shape();
    let (outer, k) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[1] = 1;
    let mut out = Tensor::zeros(out_shape);
    let d = p.data();
    for o in 0..outer {
        for i in 0..inner {
            out.data_mut()[o * inner + i] = (0..k)
                .map(|c| {
                    let v = d[(o * k + c) * inner + i];
                    v * (v + eps).ln()
                })
                .sum();
        }
    }
    out
}

/// `D_KL(target ‖ pred)` along axis 1, keeping that axis with extent 1.
/// The target is detached.
fn kl_along_classes(tape: &mut Tape, target: Var, pred: Var, eps: f64) -> Result<Var> {
    same_shape(tape, target, pred)?;
    check_range(tape.value(target), "target distribution", None)?;
    check_range(tape.value(pred), "predicted distribution", None)?;
    let target = tape.detach(target);
    let ent = tape.constant(neg_entropy(tape.value(target), eps));
    let shifted = tape.add_scalar(pred, eps);
    let log_q = tape.log(shifted);
    let cross = tape.mul(target, log_q)?;
    let cross = tape.sum(cross, &[1], true)?;
    tape.sub(ent, cross)
}

/// Batch-mean `D_KL(teacher ‖ student)` over `[N, K]` distributions.
pub fn kl_div(tape: &mut Tape, teacher: Var, student: Var, eps: f64) -> Result<Var> {
    let n = tape.shape(student)[0] as f64;
    let kl = kl_along_classes(tape, teacher, student, eps)?;
    let s = tape.sum_all(kl);
    Ok(tape.scale(s, 1.0 / n))
}

/// Masked spatial KL between the mixed batch's spatial logits and the
/// detached spatial logits of the clean patch sources.
///
/// Every sample averages the per-position divergence over its mask,
/// weighting position `(i, j)` by `mask[n, 0, i, j] / Σ mask[n]`; samples
/// with an empty mask contribute zero. The result is the mean over samples.
pub fn loss_ss2(tape: &mut Tape, spatial_mixed: Var, spatial_source: Var, mask_down: &Tensor, eps: f64) -> Result<Var> {
    let [n, _, h, w] = tape.value(spatial_mixed).dims4()?;
    if mask_down.shape() != [n, 1, h, w] {
        return Err(SaolError::Dimension(format!(
            "mask {:?} does not match spatial logits {:?}",
            mask_down.shape(),
            tape.shape(spatial_mixed)
        )));
    }
    check_range(mask_down, "mask", Some(1.0))?;
    let kl = kl_along_classes(tape, spatial_source, spatial_mixed, eps)?;
    let plane = h * w;
    let mut weights = mask_down.clone();
    for chunk in weights.data_mut().chunks_mut(plane) {
        let total: f64 = chunk.iter().sum();
        let scale = if total > 0.0 { 1.0 / total } else { 0.0 };
        chunk.iter_mut().for_each(|v| *v *= scale);
    }
    let weights = tape.constant(weights);
    let weighted = tape.mul(kl, weights)?;
    let s = tape.sum_all(weighted);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// `D_KL(ŷ_SAOL ‖ ŷ_GAP-FC) + β·CE(ŷ_GAP-FC, y)`, teacher detached.
pub fn loss_sd(tape: &mut Tape, teacher: Var, student: Var, labels: Var, beta: f64, eps: f64) -> Result<Var> {
    let kl = kl_div(tape, teacher, student, eps)?;
    let ce = loss_ce(tape, student, labels, eps)?;
    let ce = tape.scale(ce, beta);
    tape.add(kl, ce)
}

/// Individual loss terms of one step; absent terms were not computed.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub sl: Var,
    pub ss1: Option<Var>,
    pub ss2: Option<Var>,
    pub sd: Option<Var>,
    /// Plain GAP-FC cross-entropy, used when distillation is off.
    pub gapfc_ce: Option<Var>,
}

/// Weighted sum of the enabled terms.
pub fn loss_total(tape: &mut Tape, parts: &LossParts, config: &LossConfig) -> Result<Var> {
    let mut total = tape.scale(parts.sl, config.weight_sl);
    let terms = [
        (parts.ss1, config.enable_ss1, config.weight_ss1),
        (parts.ss2, config.enable_ss2, config.weight_ss2),
        (parts.sd, config.enable_sd, config.weight_sd),
        (parts.gapfc_ce, !config.enable_sd && config.gapfc_ce, 1.0),
    ];
    for (term, enabled, weight) in terms {
        if let (Some(v), true) = (term, enabled) {
            let scaled = tape.scale(v, weight);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}
