//! Output layers: the conventional GAP-FC head and the spatially attentive
//! head, which pools per-location class distributions with a learned
//! spatial attention map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{PadMode, Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Result, SaolError};
use crate::params::{conv_flops, he_uniform, Bound, Conv2d, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaolConfig {
    pub num_classes: usize,
    /// `(H_o, W_o)`; the last block's resolution when absent.
    pub output_size: Option<(usize, usize)>,
    /// 1-based block indices fused into the spatial logits; all when absent.
    pub fused_blocks: Option<Vec<usize>>,
    /// Width of the intermediate head layers; `ceil(C_L / 2)` when absent.
    pub mid_channels: Option<usize>,
}

impl Default for SaolConfig {
    fn default() -> Self {
        SaolConfig {
            num_classes: 10,
            output_size: None,
            fused_blocks: None,
            mid_channels: None,
        }
    }
}

/// Graph handles for everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct SaolOutput {
    /// `A`: `[N, 1, H_o, W_o]`, sums to one over space.
    pub attention: Var,
    /// `Y`: `[N, K, H_o, W_o]`, sums to one over classes at every location.
    pub spatial_logits: Var,
    /// `ŷ_SAOL`: `[N, K]`.
    pub final_logits: Var,
    /// `M̂`: `[N, 1, H_o, W_o]`, per-pixel sigmoid.
    pub mask_pred: Var,
    /// `ŷ_GAP-FC`: `[N, K]`.
    pub gapfc_logits: Var,
    pub pyramid: Vec<Var>,
}

/// `softmax(GAP(X_L) · W_FC)`.
pub fn gap_fc_forward(tape: &mut Tape, features: Var, w_fc: Var) -> Result<Var> {
    let [_, c, _, _] = tape.value(features).dims4()?;
    let ws = tape.shape(w_fc);
    if ws.len() != 2 || ws[0] != c {
        return Err(SaolError::Dimension(format!(
            "FC weight {ws:?} does not match {c} feature channels"
        )));
    }
    let pooled = tape.global_avg_pool(features)?;
    let logits = tape.matmul(pooled, w_fc)?;
    tape.softmax(logits, &[1])
}

/// `ŷ_k = Σ_ij A_ij (Y_k)_ij`. No further normalization is applied.
pub fn saol_aggregate(tape: &mut Tape, attention: Var, spatial_logits: Var) -> Result<Var> {
    let [n, one, h, w] = tape.value(attention).dims4()?;
    let [ny, _, hy, wy] = tape.value(spatial_logits).dims4()?;
    if one != 1 || n != ny || h != hy || w != wy {
        return Err(SaolError::Dimension(format!(
            "attention {:?} incompatible with spatial logits {:?}",
            tape.shape(attention),
            tape.shape(spatial_logits)
        )));
    }
    let weighted = tape.mul(attention, spatial_logits)?;
    tape.sum(weighted, &[2, 3], false)
}

/// 3×3 conv → relu → 1×1 conv to a single channel.
#[derive(Clone, Debug)]
struct MapHead {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl MapHead {
    /// The output conv starts at zero: uniform attention, mask 0.5.
    fn new(store: &mut ParamStore, name: &str, c_in: usize, mid: usize, rng: &mut impl Rng) -> Self {
        let head = MapHead {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, mid, 3, 1, 1, rng)
                .with_pad_mode(PadMode::Replicate),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), mid, 1, 1, 1, 0, rng),
        };
        head.conv2.zero(store);
        head
    }

    fn raw(&self, tape: &mut Tape, p: &Bound, x: Var, out: (usize, usize)) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h)?;
        resize_if_needed(tape, h, out)
    }
}

fn resize_if_needed(tape: &mut Tape, v: Var, (h, w): (usize, usize)) -> Result<Var> {
    let s = tape.shape(v);
    if s[2] == h && s[3] == w {
        Ok(v)
    } else {
        tape.bilinear_resize(v, h, w)
    }
}

#[derive(Clone, Debug)]
pub struct SaolHead {
    config: SaolConfig,
    output_size: (usize, usize),
    attention: MapHead,
    mask: MapHead,
    projections: Vec<(usize, Conv2d)>,
    fusion: Conv2d,
    fc: ParamId,
    block_shapes: Vec<(usize, usize, usize)>,
}

impl SaolHead {
    pub fn new(
        config: SaolConfig,
        backbone: &BackboneConfig,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shapes = backbone.block_shapes();
        let &(c_last, h_last, w_last) = shapes
            .last()
            .ok_or_else(|| SaolError::Config("backbone has no blocks".into()))?;
        if config.num_classes == 0 {
            return Err(SaolError::Config("num_classes must be at least 1".into()));
        }
        let output_size = config.output_size.unwrap_or((h_last, w_last));
        if output_size.0 == 0 || output_size.1 == 0 {
            return Err(SaolError::Config("output resolution must be at least 1x1".into()));
        }
        let fused: Vec<usize> = match &config.fused_blocks {
            Some(b) => b.clone(),
            None => (1..=shapes.len()).collect(),
        };
        if fused.is_empty() {
            return Err(SaolError::Config("no blocks selected for logit fusion".into()));
        }
        for (i, &b) in fused.iter().enumerate() {
            if b == 0 || b > shapes.len() || fused[..i].contains(&b) {
                return Err(SaolError::Config(format!(
                    "invalid fused block {b} for a {}-block backbone",
                    shapes.len()
                )));
            }
        }
        let mid = config.mid_channels.unwrap_or(c_last.div_ceil(2));
        if mid == 0 {
            return Err(SaolError::Config("mid_channels must be positive".into()));
        }
        let k = config.num_classes;
        let attention = MapHead::new(store, "head.attention", c_last, mid, rng);
        let mask = MapHead::new(store, "head.mask", c_last, mid, rng);
        let projections = fused
            .iter()
            .map(|&b| {
                let c = shapes[b - 1].0;
                (b, Conv2d::new(store, &format!("head.logits.block{b}"), c, mid, 1, 1, 0, rng))
            })
            .collect::<Vec<_>>();
        let fusion = Conv2d::new(store, "head.logits.fusion", mid * projections.len(), k, 1, 1, 0, rng);
        let fc = store.add("head.gapfc.weight", he_uniform(&[c_last, k], c_last, rng));
        Ok(SaolHead {
            config,
            output_size,
            attention,
            mask,
            projections,
            fusion,
            fc,
            block_shapes: shapes,
        })
    }

    pub fn config(&self) -> &SaolConfig {
        &self.config
    }

    pub fn output_size(&self) -> (usize, usize) {
        self.output_size
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Selected 1-based block indices, in fusion order.
    pub fn fused_blocks(&self) -> Vec<usize> {
        self.projections.iter().map(|(b, _)| *b).collect()
    }

    pub fn fc_weight(&self) -> ParamId {
        self.fc
    }

    /// Spatial attention `A`: softmax over all output positions.
    pub fn attention_forward(&self, tape: &mut Tape, p: &Bound, last: Var) -> Result<Var> {
        let raw = self.attention.raw(tape, p, last, self.output_size)?;
        tape.softmax(raw, &[2, 3])
    }

    /// CutMix mask prediction `M̂`: per-pixel sigmoid.
    pub fn mask_forward(&self, tape: &mut Tape, p: &Bound, last: Var) -> Result<Var> {
        let raw = self.mask.raw(tape, p, last, self.output_size)?;
        Ok(tape.sigmoid(raw))
    }

    /// Spatial logits `Y`: project each selected block, resize, concatenate,
    /// fuse, then softmax over classes.
    pub fn spatial_logits_forward(&self, tape: &mut Tape, p: &Bound, pyramid: &[Var]) -> Result<Var> {
        if pyramid.len() != self.block_shapes.len() {
            return Err(SaolError::Dimension(format!(
                "pyramid has {} blocks, head was built for {}",
                pyramid.len(),
                self.block_shapes.len()
            )));
        }
        let mut branches = Vec::with_capacity(self.projections.len());
        for (b, conv) in &self.projections {
            let z = conv.forward(tape, p, pyramid[b - 1])?;
            branches.push(resize_if_needed(tape, z, self.output_size)?);
        }
        let cat = if branches.len() == 1 {
            branches[0]
        } else {
            tape.concat(&branches, 1)?
        };
        let logits = self.fusion.forward(tape, p, cat)?;
        tape.softmax(logits, &[1])
    }

    pub fn gapfc_forward(&self, tape: &mut Tape, p: &Bound, last: Var) -> Result<Var> {
        gap_fc_forward(tape, last, p.var(self.fc))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, pyramid: Vec<Var>) -> Result<SaolOutput> {
        let last = *pyramid
            .last()
            .ok_or_else(|| SaolError::Dimension("empty pyramid".into()))?;
        let attention = self.attention_forward(tape, p, last)?;
        let spatial_logits = self.spatial_logits_forward(tape, p, &pyramid)?;
        let final_logits = saol_aggregate(tape, attention, spatial_logits)?;
        let mask_pred = self.mask_forward(tape, p, last)?;
        let gapfc_logits = self.gapfc_forward(tape, p, last)?;
        Ok(SaolOutput {
            attention,
            spatial_logits,
            final_logits,
            mask_pred,
            gapfc_logits,
            pyramid,
        })
    }

    /// Sets every head parameter to zero: uniform attention, uniform spatial
    /// logits, `M̂ = 0.5`, uniform GAP-FC output.
    pub fn zero(&self, store: &mut ParamStore) {
        for c in self.convs() {
            c.zero(store);
        }
        store.get_mut(self.fc).data_mut().fill(0.0);
    }

    pub(crate) fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        [
            &self.attention.conv1,
            &self.attention.conv2,
            &self.mask.conv1,
            &self.mask.conv2,
            &self.fusion,
        ]
        .into_iter()
        .chain(self.projections.iter().map(|(_, c)| c))
    }

    /// Mutable access to one projection branch, by 1-based block index.
    pub fn projection(&self, block: usize) -> Option<&Conv2d> {
        self.projections.iter().find(|(b, _)| *b == block).map(|(_, c)| c)
    }

    pub fn fusion(&self) -> &Conv2d {
        &self.fusion
    }

    pub fn flops(&self) -> usize {
        let (ho, wo) = self.output_size;
        let (c_last, h_last, w_last) = *self.block_shapes.last().expect("nonempty");
        let map_head = |h: &MapHead| h.conv1.flops(h_last, w_last) + h.conv2.flops(h_last, w_last);
        let proj: usize = self
            .projections
            .iter()
            .map(|(b, c)| {
                let (_, h, w) = self.block_shapes[b - 1];
                c.flops(h, w)
            })
            .sum();
        map_head(&self.attention)
            + map_head(&self.mask)
            + proj
            + self.fusion.flops(ho, wo)
            + conv_flops(c_last, self.config.num_classes, 1, 1, 1, false)
    }
}

/// Backbone plus both output layers, with their parameters.
#[derive(Clone, Debug)]
pub struct SaolModel {
    pub backbone: Backbone,
    pub head: SaolHead,
    pub params: ParamStore,
}

impl SaolModel {
    pub fn new(backbone: BackboneConfig, head: SaolConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let bb = Backbone::new(backbone, &mut params, rng)?;
        let head = SaolHead::new(head, bb.config(), &mut params, rng)?;
        Ok(SaolModel {
            backbone: bb,
            head,
            params,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<SaolOutput> {
        let pyramid = self.backbone.forward(tape, p, x)?;
        self.head.forward(tape, p, pyramid)
    }

    /// Backbone and spatial-logit branch only.
    pub fn spatial_logits(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let pyramid = self.backbone.forward(tape, p, x)?;
        self.head.spatial_logits_forward(tape, p, &pyramid)
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn flops(&self) -> usize {
        self.backbone.flops() + self.head.flops()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn tiny(k: usize, fused: Option<Vec<usize>>) -> SaolModel {
        let bb = BackboneConfig {
            base_channels: vec![3, 4, 6],
            input_size: (8, 8),
            ..Default::default()
        };
        let cfg = SaolConfig {
            num_classes: k,
            fused_blocks: fused,
            ..Default::default()
        };
        SaolModel::new(bb, cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn input(n: usize) -> Tensor {
        Tensor::from_fn([n, 3, 8, 8], |i| ((i * 7919) % 101) as f64 / 101.0)
    }

    #[test]
    fn gap_fc_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let w = tape.constant(Tensor::new([1, 1], vec![1.0]).unwrap());
        let y = gap_fc_forward(&mut tape, x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);

        let x = tape.constant(Tensor::from_fn([2, 4, 3, 3], |i| i as f64));
        let w = tape.constant(Tensor::zeros([4, 3]));
        let y = gap_fc_forward(&mut tape, x, w).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let bad = tape.constant(Tensor::zeros([5, 3]));
        assert!(matches!(gap_fc_forward(&mut tape, x, bad), Err(SaolError::Dimension(_))));
    }

    #[test]
    fn aggregate_examples() {
        let mut tape = Tape::new();
        // one-hot attention at (0,0), Y at (0,0) one-hot on class 2
        let mut a = Tensor::zeros([1, 1, 2, 2]);
        a.set(&[0, 0, 0, 0], 1.0);
        let mut y = Tensor::full([1, 3, 2, 2], 1.0 / 3.0);
        for k in 0..3 {
            y.set(&[0, k, 0, 0], if k == 2 { 1.0 } else { 0.0 });
        }
        let (av, yv) = (tape.constant(a), tape.constant(y));
        let out = saol_aggregate(&mut tape, av, yv).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 1.0]);

        // two-term convex combination
        let a = Tensor::new([1, 1, 2, 2], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let y = Tensor::new([1, 2, 2, 2], vec![1.0, 0.0, 0.3, 0.3, 0.0, 1.0, 0.7, 0.7]).unwrap();
        let (av, yv) = (tape.constant(a), tape.constant(y));
        let out = saol_aggregate(&mut tape, av, yv).unwrap();
        assert_eq!(tape.value(out).data()[0], 0.5);

        let bad = tape.constant(Tensor::zeros([1, 2, 2, 2]));
        assert!(saol_aggregate(&mut tape, bad, yv).is_err());
    }

    #[test]
    fn zero_heads_give_uniform_outputs() {
        let mut m = tiny(4, None);
        m.head.zero(&mut m.params);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        let x = tape.constant(input(2));
        let out = m.forward(&mut tape, &p, x).unwrap();
        let hw = 4.0;
        assert!(tape.value(out.attention).data().iter().all(|&v| (v - 1.0 / hw).abs() < 1e-15));
        assert!(tape.value(out.spatial_logits).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(tape.value(out.final_logits).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(tape.value(out.mask_pred).data().iter().all(|&v| v == 0.5));
        assert!(tape.value(out.gapfc_logits).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_class_is_certain() {
        let m = tiny(1, None);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        let x = tape.constant(input(3));
        let out = m.forward(&mut tape, &p, x).unwrap();
        for &v in tape.value(out.final_logits).data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_head_saturates_with_large_bias() {
        let mut m = tiny(3, None);
        let bias = m.head.mask.conv2.bias;
        m.params.get_mut(bias).data_mut()[0] = 20.0;
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        let x = tape.constant(input(1));
        let last = *m.backbone.forward(&mut tape, &p, x).unwrap().last().unwrap();
        let mask = m.head.mask_forward(&mut tape, &p, last).unwrap();
        assert!(tape.value(mask).data().iter().all(|&v| v > 0.99 && v < 1.0));
    }

    #[test]
    fn constant_features_give_uniform_attention() {
        let m = tiny(3, None);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        let feats = tape.constant(Tensor::full([1, 6, 4, 4], 0.7));
        let a = m.head.attention_forward(&mut tape, &p, feats).unwrap();
        for &v in tape.value(a).data() {
            assert!((v - 0.25).abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn bad_configs() {
        let bb = BackboneConfig {
            base_channels: vec![3, 4],
            strides: vec![1, 2],
            input_size: (8, 8),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [
            SaolConfig { fused_blocks: Some(vec![]), ..Default::default() },
            SaolConfig { fused_blocks: Some(vec![3]), ..Default::default() },
            SaolConfig { fused_blocks: Some(vec![0]), ..Default::default() },
            SaolConfig { num_classes: 0, ..Default::default() },
            SaolConfig { output_size: Some((0, 4)), ..Default::default() },
        ] {
            assert!(matches!(
                SaolModel::new(bb.clone(), cfg, &mut rng),
                Err(SaolError::Config(_))
            ));
        }
    }
}
