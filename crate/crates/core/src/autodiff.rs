//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order. [`Tape::backward`]
//! walks the record in reverse and accumulates adjoints into every node that
//! requires a gradient. Nodes that do not require gradients (constants,
//! detached copies, and anything computed only from those) are skipped
//! entirely, so a detached edge contributes exactly zero.

use crate::error::{Result, SaolError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Border handling for convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Zeros,
    Replicate,
}

/// Element index maps for a broadcasting binary op; `None` when both
/// operands already have the output shape.
type BroadcastMap = Option<(Vec<usize>, Vec<usize>)>;

enum Op {
    Leaf,
    Add(Var, Var, BroadcastMap),
    Mul(Var, Var, BroadcastMap),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    MatMul(Var, Var),
    Concat(Vec<Var>, usize),
    Sum(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, Vec<usize>, usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Resize {
        input: Var,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaves that required gradients, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_axes(rank: usize, axes: &[usize]) -> Result<()> {
    if axes.is_empty() {
        return Err(SaolError::Argument("empty axis set".into()));
    }
    for (i, &a) in axes.iter().enumerate() {
        if a >= rank {
            return Err(SaolError::Argument(format!("axis {a} out of range for rank {rank}")));
        }
        if axes[..i].contains(&a) {
            return Err(SaolError::Argument(format!("duplicate axis {a}")));
        }
    }
    Ok(())
}

/// Shape with `axes` collapsed to 1, plus the collapsed-group index of every
/// element of `shape`.
fn reduction_groups(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(d, &n)| if axes.contains(&d) { 1 } else { n })
        .collect();
    let kept_strides: Vec<usize> = strides(&kept)
        .into_iter()
        .enumerate()
        .map(|(d, s)| if axes.contains(&d) { 0 } else { s })
        .collect();
    let numel: usize = shape.iter().product();
    let mut groups = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut g = 0usize;
    for _ in 0..numel {
        groups.push(g);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            g += kept_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            g -= kept_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    (kept, groups)
}

fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, BroadcastMap)> {
    if a == b {
        return Ok((a.to_vec(), None));
    }
    let mismatch = || SaolError::Dimension(format!("cannot broadcast {a:?} with {b:?}"));
    if a.len() != b.len() {
        return Err(mismatch());
    }
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        if x != y && x != 1 && y != 1 {
            return Err(mismatch());
        }
        out.push(x.max(y));
    }
    let bstr = |s: &[usize]| -> Vec<usize> {
        strides(s)
            .into_iter()
            .zip(s)
            .zip(&out)
            .map(|((st, &n), &o)| if n == 1 && o != 1 { 0 } else { st })
            .collect()
    };
    let (sa, sb) = (bstr(a), bstr(b));
    let numel: usize = out.iter().product();
    let (mut ia, mut ib) = (Vec::with_capacity(numel), Vec::with_capacity(numel));
    let mut idx = vec![0usize; out.len()];
    let (mut pa, mut pb) = (0usize, 0usize);
    for _ in 0..numel {
        ia.push(pa);
        ib.push(pb);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            pa += sa[d];
            pb += sb[d];
            if idx[d] < out[d] {
                break;
            }
            pa -= sa[d] * out[d];
            pb -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
    Ok((out, Some((ia, ib))))
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A new input node.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Smallest `|x|` fed to any relu on the tape: how close the recorded
    /// point lies to a kink. `None` without relus.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(v) => Some(self.nodes[v.0].value.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Same forward value, no adjoint flow back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, map) = broadcast(self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let data = match &map {
            None => x.iter().zip(y).map(|(p, q)| p + q).collect(),
            Some((ia, ib)) => ia.iter().zip(ib).map(|(&i, &j)| x[i] + y[j]).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b, map), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product with same-rank broadcasting over unit extents.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, map) = broadcast(self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let data = match &map {
            None => x.iter().zip(y).map(|(p, q)| p * q).collect(),
            Some((ia, ib)) => ia.iter().zip(ib).map(|(&i, &j)| x[i] * y[j]).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b, map), rg))
    }

    /// `scale * v + shift`.
    pub fn affine(&mut self, v: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(v);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|x| scale * x + shift).collect(),
        )
        .expect("same shape");
        let rg = self.rg(v);
        self.push(out, Op::Affine(v, scale), rg)
    }

    pub fn scale(&mut self, v: Var, s: f64) -> Var {
        self.affine(v, s, 0.0)
    }

    pub fn add_scalar(&mut self, v: Var, s: f64) -> Var {
        self.affine(v, 1.0, s)
    }

    fn map_unary(&mut self, v: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(v);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let rg = self.rg(v);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, v: Var) -> Var {
        self.map_unary(v, Op::Relu(v), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, v: Var) -> Var {
        self.map_unary(v, Op::Sigmoid(v), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    /// Natural log. Inputs must be positive for a finite result.
    pub fn log(&mut self, v: Var) -> Var {
        self.map_unary(v, Op::Log(v), f64::ln)
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(SaolError::Dimension(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        };
        if k != k2 {
            return Err(SaolError::Dimension(format!(
                "matmul inner extents differ: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| SaolError::Argument("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        check_axes(base.len(), &[axis])?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(SaolError::Dimension(format!(
                    "concat along {axis}: {s:?} vs {base:?}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(inputs.to_vec(), axis), rg))
    }

    /// Sum over `axes`; collapsed axes are kept with extent 1 when `keepdim`.
    pub fn sum(&mut self, v: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(v).to_vec();
        check_axes(shape.len(), axes)?;
        let (kept, groups) = reduction_groups(&shape, axes);
        let mut data = vec![0.0; kept.iter().product()];
        for (&g, &x) in groups.iter().zip(self.value(v).data()) {
            data[g] += x;
        }
        let out_shape: Vec<usize> = if keepdim {
            kept
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(d, _)| !axes.contains(d))
                .map(|(_, &n)| n)
                .collect()
        };
        let rg = self.rg(v);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Sum(v, groups), rg))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, v: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(v).rank()).collect();
        if axes.is_empty() {
            return v;
        }
        self.sum(v, &axes, false).expect("valid axes")
    }

    pub fn mean(&mut self, v: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(v);
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let s = self.sum(v, axes, keepdim)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn mean_all(&mut self, v: Var) -> Var {
        let n = self.value(v).numel() as f64;
        let s = self.sum_all(v);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, v: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(v).clone().reshape(shape.to_vec())?;
        let rg = self.rg(v);
        Ok(self.push(t, Op::Reshape(v), rg))
    }

    /// Softmax normalizing jointly over the flattened `axes`, max-subtracted.
    pub fn softmax(&mut self, v: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(v).to_vec();
        check_axes(shape.len(), axes)?;
        let (kept, groups) = reduction_groups(&shape, axes);
        let ng: usize = kept.iter().product();
        let x = self.value(v).data();
        let mut max = vec![f64::NEG_INFINITY; ng];
        for (&g, &xi) in groups.iter().zip(x) {
            max[g] = max[g].max(xi);
        }
        let mut out: Vec<f64> = groups.iter().zip(x).map(|(&g, &xi)| (xi - max[g]).exp()).collect();
        let mut total = vec![0.0; ng];
        for (&g, &e) in groups.iter().zip(&out) {
            total[g] += e;
        }
        for (&g, o) in groups.iter().zip(out.iter_mut()) {
            *o /= total[g];
        }
        let rg = self.rg(v);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(v, groups, ng), rg))
    }

    /// Cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in, k, k]`,
    /// zero padded.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_padded(input, weight, bias, stride, padding, PadMode::Zeros)
    }

    pub fn conv2d_padded(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let [n, c_in, h, w] = self.value(input).dims4()?;
        let [c_out, wc_in, k, k2] = self.value(weight).dims4()?;
        if wc_in != c_in {
            return Err(SaolError::Dimension(format!(
                "conv2d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        if k != k2 || k == 0 {
            return Err(SaolError::Argument(format!("conv2d: kernel must be square, got {k}x{k2}")));
        }
        if stride == 0 {
            return Err(SaolError::Argument("conv2d: stride must be at least 1".into()));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(SaolError::Dimension(format!(
                "conv2d: kernel {k} larger than padded input {h}x{w} (padding {padding})"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(SaolError::Dimension(format!(
                    "conv2d: bias shape {:?}, expected [{c_out}]",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad: padding,
            replicate: mode == PadMode::Replicate,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        };
        let zero_bias;
        let bias_data = match bias {
            Some(b) => self.value(b).data(),
            None => {
                zero_bias = vec![0.0; c_out];
                &zero_bias
            }
        };
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(weight).data(), bias_data);
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let t = Tensor::new([n, c_out, geom.out_h, geom.out_w], out)?;
        Ok(self.push(t, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    /// Align-corners-false bilinear resampling of the two trailing axes.
    pub fn bilinear_resize(&mut self, v: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(v).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(SaolError::Argument("resize target must be at least 1x1".into()));
        }
        let out = kernels::bilinear_forward(self.value(v).data(), n * c, (h, w), (out_h, out_w));
        let rg = self.rg(v);
        let t = Tensor::new([n, c, out_h, out_w], out)?;
        Ok(self.push(
            t,
            Op::Resize {
                input: v,
                planes: n * c,
                from: (h, w),
                to: (out_h, out_w),
            },
            rg,
        ))
    }

    /// Spatial mean of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, v: Var) -> Result<Var> {
        self.value(v).dims4()?;
        self.mean(v, &[2, 3], false)
    }

    /// Populates adjoints for every gradient-requiring leaf reachable from
    /// the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(SaolError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Err(SaolError::Argument(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(self.nodes.len(), || None);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaves[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
                }
                continue;
            };
            self.propagate(node, &g, &mut adj);
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, map) => {
                for (k, &v) in [a, b].into_iter().enumerate() {
                    if !self.rg(v) {
                        continue;
                    }
                    let d = add_into(&mut adj[v.0], len(v));
                    match map {
                        None => d.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                        Some(m) => {
                            let idx = if k == 0 { &m.0 } else { &m.1 };
                            for (&j, &gi) in idx.iter().zip(g) {
                                d[j] += gi;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b, map) => {
                let (xa, xb) = (val(*a), val(*b));
                if self.rg(*a) {
                    let d = add_into(&mut adj[a.0], len(*a));
                    match map {
                        None => d.iter_mut().zip(g.iter().zip(xb)).for_each(|(x, (gi, y))| *x += gi * y),
                        Some((ia, ib)) => {
                            for ((&i, &j), &gi) in ia.iter().zip(ib).zip(g) {
                                d[i] += gi * xb[j];
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    let d = add_into(&mut adj[b.0], len(*b));
                    match map {
                        None => d.iter_mut().zip(g.iter().zip(xa)).for_each(|(x, (gi, y))| *x += gi * y),
                        Some((ia, ib)) => {
                            for ((&i, &j), &gi) in ia.iter().zip(ib).zip(g) {
                                d[j] += gi * xa[i];
                            }
                        }
                    }
                }
            }
            Op::Affine(v, s) => {
                let d = add_into(&mut adj[v.0], len(*v));
                d.iter_mut().zip(g).for_each(|(x, gi)| *x += s * gi);
            }
            Op::Relu(v) => {
                let xv = val(*v);
                let d = add_into(&mut adj[v.0], len(*v));
                for ((x, gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *x += gi;
                    }
                }
            }
            Op::Sigmoid(v) => {
                let y = node.value.data();
                let d = add_into(&mut adj[v.0], len(*v));
                for ((x, gi), &yi) in d.iter_mut().zip(g).zip(y) {
                    *x += gi * yi * (1.0 - yi);
                }
            }
            Op::Log(v) => {
                let xv = val(*v);
                let d = add_into(&mut adj[v.0], len(*v));
                for ((x, gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                    *x += gi / xi;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                if self.rg(*a) {
                    let d = add_into(&mut adj[a.0], m * k);
                    kernels::gemm(m, n, k, 1.0, g, (n, 1), val(*b), (1, n), 1.0, d);
                }
                if self.rg(*b) {
                    let d = add_into(&mut adj[b.0], k * n);
                    kernels::gemm(k, m, n, 1.0, val(*a), (1, k), g, (n, 1), 1.0, d);
                }
            }
            Op::Concat(inputs, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                    if self.rg(v) {
                        let d = add_into(&mut adj[v.0], len(v));
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            d[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Sum(v, groups) => {
                let d = add_into(&mut adj[v.0], len(*v));
                for (x, &gr) in d.iter_mut().zip(groups) {
                    *x += g[gr];
                }
            }
            Op::Reshape(v) => {
                let d = add_into(&mut adj[v.0], len(*v));
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::Softmax(v, groups, ng) => {
                let y = node.value.data();
                let mut dot = vec![0.0; *ng];
                for ((&gr, &gi), &yi) in groups.iter().zip(g).zip(y) {
                    dot[gr] += gi * yi;
                }
                let d = add_into(&mut adj[v.0], len(*v));
                for (((x, &gr), &gi), &yi) in d.iter_mut().zip(groups).zip(g).zip(y) {
                    *x += yi * (gi - dot[gr]);
                }
            }
            Op::Conv2d { input, weight, bias, geom } => {
                let mut dx = self.rg(*input).then(|| adj[input.0].take().unwrap_or_else(|| vec![0.0; len(*input)]));
                let mut dw = self.rg(*weight).then(|| adj[weight.0].take().unwrap_or_else(|| vec![0.0; len(*weight)]));
                let mut db = bias
                    .filter(|b| self.rg(*b))
                    .map(|b| adj[b.0].take().unwrap_or_else(|| vec![0.0; len(b)]));
                kernels::conv2d_backward(
                    geom,
                    val(*input),
                    val(*weight),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    adj[input.0] = Some(d);
                }
                if let Some(d) = dw {
                    adj[weight.0] = Some(d);
                }
                if let (Some(d), Some(b)) = (db, bias) {
                    adj[b.0] = Some(d);
                }
            }
            Op::Resize { input, planes, from, to } => {
                let d = add_into(&mut adj[input.0], len(*input));
                kernels::bilinear_backward(g, *planes, *from, *to, d);
            }
        }
    }
}
