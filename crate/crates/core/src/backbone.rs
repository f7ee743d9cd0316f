//! Small residual CNN emitting the feature map of every block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SaolError};
use crate::params::{conv_flops, Bound, Conv2d, ParamStore};

/// Shape of the backbone. Block `ℓ` has `base_channels[ℓ] * width_factor`
/// channels and downsamples by `strides[ℓ]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub base_channels: Vec<usize>,
    pub width_factor: usize,
    pub strides: Vec<usize>,
    pub layers_per_block: usize,
    pub in_channels: usize,
    pub input_size: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            base_channels: vec![16, 32, 64],
            width_factor: 1,
            strides: vec![1, 2, 2],
            layers_per_block: 1,
            in_channels: 3,
            input_size: (32, 32),
        }
    }
}

impl BackboneConfig {
    pub fn num_blocks(&self) -> usize {
        self.base_channels.len()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.base_channels.iter().map(|c| c * self.width_factor).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SaolError::Config(m));
        if self.base_channels.is_empty() {
            return bad("backbone needs at least one block".into());
        }
        if self.strides.len() != self.base_channels.len() {
            return bad(format!(
                "{} strides for {} blocks",
                self.strides.len(),
                self.base_channels.len()
            ));
        }
        if self.base_channels.contains(&0) || self.width_factor == 0 || self.in_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.strides.contains(&0) || self.layers_per_block == 0 {
            return bad("strides and layers per block must be positive".into());
        }
        let total: usize = self.strides.iter().product();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % total != 0 || w % total != 0 {
            return bad(format!(
                "input {h}x{w} not divisible by cumulative stride {total}"
            ));
        }
        Ok(())
    }

    /// `(C_ℓ, H_ℓ, W_ℓ)` for every block.
    pub fn block_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = self.input_size;
        self.channels()
            .into_iter()
            .zip(&self.strides)
            .map(|(c, &s)| {
                h /= s;
                w /= s;
                (c, h, w)
            })
            .collect()
    }
}

/// `x + conv2(relu(conv1(x)))`, with a strided 1×1 projection on the skip
/// path when the shape changes.
#[derive(Clone, Debug)]
struct ResidualUnit {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResidualUnit {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(tape, p, x)?,
            None => x,
        };
        tape.add(h, s)
    }

    #[cfg(test)]
    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        [&self.conv1, &self.conv2].into_iter().chain(self.skip.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    blocks: Vec<Vec<ResidualUnit>>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut c_prev = config.in_channels;
        let mut blocks = Vec::new();
        for (b, (c, &stride)) in config.channels().into_iter().zip(&config.strides).enumerate() {
            let mut units = Vec::new();
            for u in 0..config.layers_per_block {
                let name = format!("backbone.block{}.unit{u}", b + 1);
                let (c_in, s) = if u == 0 { (c_prev, stride) } else { (c, 1) };
                let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c, 3, s, 1, rng);
                let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c, c, 3, 1, 1, rng);
                let skip = (c_in != c || s != 1)
                    .then(|| Conv2d::new(store, &format!("{name}.skip"), c_in, c, 1, s, 0, rng));
                units.push(ResidualUnit { conv1, conv2, skip });
            }
            blocks.push(units);
            c_prev = c;
        }
        Ok(Backbone { config, blocks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Feature maps `X^1 .. X^L`, each passed through a final relu.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        if c != self.config.in_channels || (h, w) != self.config.input_size {
            return Err(SaolError::Dimension(format!(
                "backbone expects [N, {}, {}, {}], got {:?}",
                self.config.in_channels,
                self.config.input_size.0,
                self.config.input_size.1,
                tape.shape(x)
            )));
        }
        let mut pyramid = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for units in &self.blocks {
            for unit in units {
                h = unit.forward(tape, p, h)?;
            }
            h = tape.relu(h);
            pyramid.push(h);
        }
        Ok(pyramid)
    }

    pub fn param_count(&self) -> usize {
        self.convs().map(|(c, _)| c.param_count()).sum()
    }

    pub fn flops(&self) -> usize {
        self.convs()
            .map(|(c, (h, w))| c.flops(h, w))
            .sum()
    }

    /// Every convolution with the spatial size of its input.
    fn convs(&self) -> impl Iterator<Item = (&Conv2d, (usize, usize))> {
        let mut size = self.config.input_size;
        let mut out = Vec::new();
        for units in &self.blocks {
            for unit in units {
                let inner = unit.conv1.output_size(size.0, size.1);
                out.push((&unit.conv1, size));
                out.push((&unit.conv2, inner));
                if let Some(s) = &unit.skip {
                    out.push((s, size));
                }
                size = inner;
            }
        }
        out.into_iter()
    }

    #[cfg(test)]
    pub(crate) fn all_convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.blocks.iter().flatten().flat_map(ResidualUnit::convs)
    }
}

/// Parameter count of the backbone described by `config`.
pub fn count_params(config: &BackboneConfig) -> Result<usize> {
    config.validate()?;
    let mut total = 0;
    let mut c_prev = config.in_channels;
    for (c, &s) in config.channels().into_iter().zip(&config.strides) {
        for u in 0..config.layers_per_block {
            let (c_in, stride) = if u == 0 { (c_prev, s) } else { (c, 1) };
            total += c * c_in * 9 + c + c * c * 9 + c;
            if c_in != c || stride != 1 {
                total += c * c_in + c;
            }
        }
        c_prev = c;
    }
    Ok(total)
}

/// FLOPs of one forward pass over `input_shape = (C, H, W)`, counting
/// convolutions only (2·MACs plus bias adds).
pub fn count_flops(config: &BackboneConfig, input_shape: (usize, usize, usize)) -> Result<usize> {
    let mut cfg = config.clone();
    cfg.in_channels = input_shape.0;
    cfg.input_size = (input_shape.1, input_shape.2);
    cfg.validate()?;
    let mut total = 0;
    let mut c_prev = cfg.in_channels;
    let (mut h, mut w) = cfg.input_size;
    for (c, &s) in cfg.channels().into_iter().zip(&cfg.strides) {
        for u in 0..cfg.layers_per_block {
            let (c_in, stride) = if u == 0 { (c_prev, s) } else { (c, 1) };
            let (oh, ow) = (h / stride, w / stride);
            total += conv_flops(c_in, c, 3, oh, ow, true) + conv_flops(c, c, 3, oh, ow, true);
            if c_in != c || stride != 1 {
                total += conv_flops(c_in, c, 1, oh, ow, true);
            }
            (h, w) = (oh, ow);
        }
        c_prev = c;
    }
    Ok(total)
}
