//! Weakly-supervised localization: turn SAOL outputs into bounding boxes and
//! score them against ground truth.
//!
//! Pipeline per image: class-wise map `A ∘ Y_k`, min-max normalization,
//! optional bilinear upsampling to image size, binarization, largest
//! 4-connected component, tight box in image coordinates.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::Path;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaolError};
use crate::kernels;
use crate::tensor::Tensor;

/// Pixel box `[x_min, x_max) × [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(SaolError::Argument(format!(
                "empty box ({x_min},{y_min})-({x_max},{y_max})"
            )));
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        BoundingBox {
            x_min: 0,
            y_min: 0,
            x_max: width,
            y_max: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn within(&self, height: usize, width: usize) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max && self.x_max <= width && self.y_max <= height
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})x[{},{})", self.x_min, self.x_max, self.y_min, self.y_max)
    }
}

/// Intersection over union. Areas are integers, so the result is symmetric
/// bit for bit.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x_max.min(b.x_max).saturating_sub(a.x_min.max(b.x_min));
    let h = a.y_max.min(b.y_max).saturating_sub(a.y_min.max(b.y_min));
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Trailing `(H, W)` of a map-like tensor.
fn plane(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(SaolError::Dimension(format!("expected a spatial map, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// `A ∘ Y_k` for a single image. `attention` is `[.., H, W]` with one plane,
/// `spatial_logits` is `[.., K, H, W]` with one image.
pub fn class_score_map(attention: &Tensor, spatial_logits: &Tensor, class: usize) -> Result<Tensor> {
    let (h, w) = plane(attention)?;
    if attention.numel() != h * w {
        return Err(SaolError::Dimension(format!(
            "attention {:?} holds more than one map",
            attention.shape()
        )));
    }
    let s = spatial_logits.shape();
    if s.len() < 3 || plane(spatial_logits)? != (h, w) {
        return Err(SaolError::Dimension(format!(
            "spatial logits {s:?} do not match attention {:?}",
            attention.shape()
        )));
    }
    let k = s[s.len() - 3];
    if spatial_logits.numel() != k * h * w {
        return Err(SaolError::Dimension(format!("spatial logits {s:?} hold more than one image")));
    }
    if class >= k {
        return Err(SaolError::Argument(format!("class {class} out of range for {k} classes")));
    }
    let y = &spatial_logits.data()[class * h * w..(class + 1) * h * w];
    let data = attention.data().iter().zip(y).map(|(a, y)| a * y).collect();
    Tensor::new([h, w], data)
}

/// Rescales to `[0, 1]`. A constant map becomes all zeros.
pub fn min_max_normalize(map: &Tensor) -> Tensor {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = map.clone();
    if hi > lo {
        let span = hi - lo;
        out.data_mut().iter_mut().for_each(|v| *v = (*v - lo) / span);
    } else {
        debug!("constant score map normalized to zeros");
        out.data_mut().fill(0.0);
    }
    out
}

/// Bilinear resize of an `[H, W]` map.
pub fn upsample_map(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = plane(map)?;
    Tensor::new(
        [height, width],
        kernels::bilinear_forward(map.data(), 1, (h, w), (height, width)),
    )
}

/// One connected region of a binary mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Component {
    pub size: usize,
    /// Tight bounds in mask cells, exclusive upper ends.
    pub bounds: BoundingBox,
}

/// Largest 4-connected component of a row-major `h × w` mask. Ties go to the
/// component whose first pixel comes first in raster order.
pub fn largest_component(mask: &[bool], h: usize, w: usize) -> Option<Component> {
    assert_eq!(mask.len(), h * w, "mask length does not match {h}x{w}");
    let mut seen = vec![false; h * w];
    let mut best: Option<Component> = None;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut size, mut y0, mut x0, mut y1, mut x1) = (0, h, w, 0, 0);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            size += 1;
            (y0, x0, y1, x1) = (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1));
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        if best.is_none_or(|b| size > b.size) {
            best = Some(Component {
                size,
                bounds: BoundingBox {
                    x_min: x0,
                    y_min: y0,
                    x_max: x1,
                    y_max: y1,
                },
            });
        }
    }
    best
}

/// Box of the largest component of `norm_map ≥ threshold`, scaled from map
/// cells to an `image_h × image_w` image. An empty mask yields the whole
/// image.
pub fn extract_box(norm_map: &Tensor, threshold: f64, (image_h, image_w): (usize, usize)) -> Result<BoundingBox> {
    let (h, w) = plane(norm_map)?;
    if norm_map.numel() != h * w {
        return Err(SaolError::Dimension(format!("expected one map, got {:?}", norm_map.shape())));
    }
    let mask: Vec<bool> = norm_map.data().iter().map(|&v| v >= threshold).collect();
    let Some(c) = largest_component(&mask, h, w) else {
        debug!("empty localization mask, falling back to the full image");
        return Ok(BoundingBox::full(image_h, image_w));
    };
    let b = c.bounds;
    Ok(BoundingBox {
        x_min: b.x_min * image_w / w,
        y_min: b.y_min * image_h / h,
        x_max: (b.x_max * image_w).div_ceil(w).min(image_w),
        y_max: (b.y_max * image_h).div_ceil(h).min(image_h),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WsolConfig {
    pub threshold: f64,
    /// Resize maps to image resolution before thresholding.
    pub upsample: bool,
    pub iou_threshold: f64,
}

impl Default for WsolConfig {
    fn default() -> Self {
        WsolConfig {
            threshold: 0.2,
            upsample: false,
            iou_threshold: 0.5,
        }
    }
}

impl WsolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(SaolError::Config(format!(
                "localization threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(SaolError::Config(format!(
                "IoU threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Normalized map (at map or image resolution) and its box for one class.
pub fn localize(
    attention: &Tensor,
    spatial_logits: &Tensor,
    class: usize,
    image_size: (usize, usize),
    config: &WsolConfig,
) -> Result<(Tensor, BoundingBox)> {
    let mut map = min_max_normalize(&class_score_map(attention, spatial_logits, class)?);
    if config.upsample {
        map = upsample_map(&map, image_size.0, image_size.1)?;
    }
    let b = extract_box(&map, config.threshold, image_size)?;
    Ok((map, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocMode {
    /// Correct class and IoU above threshold.
    Top1,
    /// IoU above threshold using the ground-truth class's map.
    GtKnown,
}

/// Localization outcome of one image. `pred_box` comes from the
/// ground-truth class's map; for a correctly classified image that is also
/// the predicted class's map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocRecord {
    pub image_id: usize,
    pub gt_label: usize,
    pub pred_label: usize,
    pub gt_box: Option<BoundingBox>,
    pub pred_box: BoundingBox,
}

impl LocRecord {
    pub fn iou(&self) -> Option<f64> {
        self.gt_box.map(|g| iou(&g, &self.pred_box))
    }

    pub fn passes(&self, mode: LocMode, iou_threshold: f64) -> Option<bool> {
        let hit = self.iou()? >= iou_threshold;
        Some(match mode {
            LocMode::Top1 => hit && self.pred_label == self.gt_label,
            LocMode::GtKnown => hit,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocSummary {
    pub accuracy: f64,
    pub evaluated: usize,
    /// Records without a ground-truth box.
    pub skipped: usize,
}

pub fn loc_accuracy(records: &[LocRecord], mode: LocMode, iou_threshold: f64) -> LocSummary {
    let outcomes: Vec<bool> = records.iter().filter_map(|r| r.passes(mode, iou_threshold)).collect();
    let skipped = records.len() - outcomes.len();
    if skipped > 0 {
        warn!("{skipped} localization records lack a ground-truth box");
    }
    let hits = outcomes.iter().filter(|&&p| p).count();
    LocSummary {
        accuracy: if outcomes.is_empty() {
            0.0
        } else {
            hits as f64 / outcomes.len() as f64
        },
        evaluated: outcomes.len(),
        skipped,
    }
}

/// Monte Carlo estimate of the hit rate of guessing another image's
/// ground-truth box: draws ordered pairs of distinct images and counts
/// `IoU ≥ iou_threshold`.
pub fn random_box_baseline(gt_boxes: &[BoundingBox], trials: usize, iou_threshold: f64, seed: u64) -> Result<f64> {
    let n = gt_boxes.len();
    if n < 2 || trials == 0 {
        return Err(SaolError::Argument("random-box baseline needs two boxes and one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        if iou(&gt_boxes[i], &gt_boxes[j]) >= iou_threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}

/// Binary 8-bit PGM of a map in `[0, 1]`; values outside are clamped.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = plane(map)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| SaolError::io(path, e))
}

/// Raw map values, one CSV row per map row.
pub fn write_map_csv(path: &Path, map: &Tensor) -> Result<()> {
    let (_, w) = plane(map)?;
    let mut wr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in map.data().chunks(w) {
        wr.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_error(path, e))?;
    }
    wr.flush().map_err(|e| SaolError::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> SaolError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SaolError::io(path, io),
        other => SaolError::Format(format!("{}: {other:?}", path.display())),
    }
}

/// `image_id,gt_label,pred_label,iou,pass_top1,pass_gtknown` per record.
pub fn write_report(path: &Path, records: &[LocRecord], iou_threshold: f64) -> Result<()> {
    let mut wr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wr.write_record(["image_id", "gt_label", "pred_label", "iou", "pass_top1", "pass_gtknown"])
        .map_err(|e| csv_error(path, e))?;
    let flag = |p: Option<bool>| match p {
        Some(true) => "1".to_string(),
        Some(false) => "0".to_string(),
        None => String::new(),
    };
    for r in records {
        wr.write_record([
            r.image_id.to_string(),
            r.gt_label.to_string(),
            r.pred_label.to_string(),
            r.iou().map(|v| v.to_string()).unwrap_or_default(),
            flag(r.passes(LocMode::Top1, iou_threshold)),
            flag(r.passes(LocMode::GtKnown, iou_threshold)),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    wr.flush().map_err(|e| SaolError::io(path, e))
}
