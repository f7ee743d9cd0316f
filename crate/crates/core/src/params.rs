//! Named parameter storage and the layers built on it.

use rand::Rng;

use crate::autodiff::{Gradients, PadMode, Tape, Var};
use crate::error::{Result, SaolError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn as_slice(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces every tensor by the same-named entry of `other`, checking
    /// that names and shapes line up one to one.
    pub fn load_from(&mut self, other: &[Param]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(SaolError::Format(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| SaolError::Format(format!("missing parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(SaolError::Format(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    /// Puts every parameter on `tape` as a leaf; `trainable` decides whether
    /// the leaves request gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }
}

/// Tape handles for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient of each parameter, in store order. Parameters that did not
    /// receive one get zeros.
    pub fn collect_grads(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                grads
                    .take(self.var(id))
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
            })
            .collect()
    }
}

/// He-uniform initialization: U(-b, b) with b = sqrt(6 / fan_in).
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(&[c_out, c_in, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out]));
        Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            pad_mode: PadMode::Zeros,
        }
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        tape.conv2d_padded(
            x,
            params.var(self.weight),
            Some(params.var(self.bias)),
            self.stride,
            self.padding,
            self.pad_mode,
        )
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }

    /// 2·MACs plus one add per output element for the bias.
    pub fn flops(&self, h: usize, w: usize) -> usize {
        let (oh, ow) = self.output_size(h, w);
        conv_flops(self.c_in, self.c_out, self.kernel, oh, ow, true)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// FLOPs of one convolution producing an `out_h × out_w` map.
pub fn conv_flops(c_in: usize, c_out: usize, kernel: usize, out_h: usize, out_w: usize, bias: bool) -> usize {
    let outputs = c_out * out_h * out_w;
    2 * outputs * c_in * kernel * kernel + if bias { outputs } else { 0 }
}
