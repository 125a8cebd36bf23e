//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive executed in the forward pass as a node
//! that references its parents by index, so parents always precede children.
//! [`Tape::backward`] walks the nodes in reverse exactly once and returns a
//! [`Gradients`] map for the leaves that were registered with gradients
//! enabled.
//!
//! ```
//! use chansr::autodiff::Tape;
//! use chansr::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(&[2], vec![2.0, 4.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let m = tape.mean(sq);
//! let loss = tape.scale(m, 0.5);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
//! ```

mod conv;
mod gradcheck;

pub use gradcheck::{gradient_check, gradient_check_probes};

use conv::ConvDims;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, dims: ConvDims },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Sqrt(Var),
    Reshape(Var),
    ConcatChannels(Var, Var),
    GlobalAvgPool(Var),
    Linear { input: Var, weight: Var, bias: Var },
    Stack(Vec<Var>),
    BranchSoftmax(Var),
    BranchSelect(Var, usize),
    ChannelScale(Var, Var),
    UpsampleNearest(Var, usize),
    BlockMean(Var, usize),
    MaskedL1 { pred: Var, target: Vec<f64>, mask: Vec<bool>, count: usize },
    MaskedMse { pred: Var, target: Vec<f64>, mask: Vec<bool>, count: usize },
    MaskedCe { logits: Var, labels: Vec<u8>, mask: Vec<bool>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives. Single owner; not shared.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the grad-enabled leaves of a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(&contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf. Gradients are reported only for leaves created with
    /// `grad_enabled = true`.
    pub fn leaf(&mut self, value: Tensor, grad_enabled: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: grad_enabled });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same-size convolution, stride 1, zero padding `(k-1)/2`.
    /// `input` is `[N,Cin,H,W]`, `weight` `[Cout,Cin,k,k]`, `bias` `[Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, cin, h, w] = self.value(input).dims4()?;
        let [cout, wcin, k, k2] = match self.value(weight).shape() {
            &[a, b, c, d] => [a, b, c, d],
            s => return shape_err(format!("conv2d weight must be [Cout,Cin,k,k], got {s:?}")),
        };
        if k != k2 || k % 2 == 0 {
            return shape_err(format!("conv2d kernel must be square with odd size, got {k}x{k2}"));
        }
        if wcin != cin {
            return shape_err(format!(
                "conv2d weight expects {wcin} input channels but input has {cin}"
            ));
        }
        if self.value(bias).shape() != [cout] {
            return shape_err(format!(
                "conv2d bias must be [{cout}], got {:?}",
                self.value(bias).shape()
            ));
        }
        let dims = ConvDims { n, cin, h, w, cout, k };
        let out = conv::forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            dims,
        );
        let value = Tensor::new(&[n, cout, h, w], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, dims }, &[input, weight, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: operand shapes differ ({:?} vs {:?})",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Elementwise square root. The derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::sqrt);
        self.push(value, Op::Sqrt(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return shape_err(format!(
                "concat_channels: [{n},_,{h},{w}] vs [{nb},_,{hb},{wb}]"
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], data)?;
        Ok(self.push(value, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Per-channel spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return shape_err("global_avg_pool on empty spatial extent".into());
        }
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Affine map `x · Wᵀ + b` for `x: [N,Din]`, `W: [Dout,Din]`, `b: [Dout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, din] = self.value(input).dims2()?;
        let [dout, wdin] = self.value(weight).dims2()?;
        if wdin != din {
            return shape_err(format!(
                "fully_connected weight expects {wdin} inputs but input has {din}"
            ));
        }
        if self.value(bias).shape() != [dout] {
            return shape_err(format!(
                "fully_connected bias must be [{dout}], got {:?}",
                self.value(bias).shape()
            ));
        }
        let (x, wt, b) = (self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(n * dout);
        for i in 0..n {
            let row = &x[i * din..(i + 1) * din];
            for o in 0..dout {
                let wrow = &wt[o * din..(o + 1) * din];
                out.push(b[o] + row.iter().zip(wrow).map(|(a, c)| a * c).sum::<f64>());
            }
        }
        let value = Tensor::new(&[n, dout], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    /// Stacks `B` tensors of shape `[N,C]` into `[N,B,C]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("stack of zero tensors".into());
        };
        let [n, c] = self.value(first).dims2()?;
        for &p in parts {
            if self.value(p).shape() != [n, c] {
                return shape_err(format!(
                    "stack: expected [{n},{c}], got {:?}",
                    self.value(p).shape()
                ));
            }
        }
        let b = parts.len();
        let mut data = vec![0.0; n * b * c];
        for (bi, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for i in 0..n {
                data[(i * b + bi) * c..(i * b + bi + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(&[n, b, c], data)?;
        Ok(self.push(value, Op::Stack(parts.to_vec()), parts))
    }

    /// Softmax over the branch axis of `[N,B,C]`.
    pub fn branch_softmax(&mut self, logits: Var) -> Result<Var> {
        let (n, b, c) = match self.value(logits).shape() {
            &[n, b, c] => (n, b, c),
            s => return shape_err(format!("branch_softmax expects [N,B,C], got {s:?}")),
        };
        let x = self.value(logits).data();
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let at = |bi: usize| (i * b + bi) * c + ch;
                let max = (0..b).map(|bi| x[at(bi)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for bi in 0..b {
                    let e = (x[at(bi)] - max).exp();
                    out[at(bi)] = e;
                    total += e;
                }
                for bi in 0..b {
                    out[at(bi)] /= total;
                }
            }
        }
        let value = Tensor::new(&[n, b, c], out)?;
        Ok(self.push(value, Op::BranchSoftmax(logits), &[logits]))
    }

    /// Branch `index` of `[N,B,C]`, as `[N,C]`.
    pub fn branch_select(&mut self, x: Var, index: usize) -> Result<Var> {
        let (n, b, c) = match self.value(x).shape() {
            &[n, b, c] => (n, b, c),
            s => return shape_err(format!("branch_select expects [N,B,C], got {s:?}")),
        };
        if index >= b {
            return shape_err(format!("branch index {index} out of range for {b} branches"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            data.extend_from_slice(&src[(i * b + index) * c..(i * b + index + 1) * c]);
        }
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(value, Op::BranchSelect(x, index), &[x]))
    }

    /// Multiplies every `H×W` plane of `x: [N,C,H,W]` by `scales[n,c]`.
    pub fn channel_scale(&mut self, x: Var, scales: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.value(scales).shape() != [n, c] {
            return shape_err(format!(
                "channel_scale: scales must be [{n},{c}], got {:?}",
                self.value(scales).shape()
            ));
        }
        let hw = h * w;
        let s = self.value(scales).data();
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(s)
            .flat_map(|(plane, &k)| plane.iter().map(move |v| v * k))
            .collect();
        let value = Tensor::new(&[n, c, h, w], data)?;
        Ok(self.push(value, Op::ChannelScale(x, scales), &[x, scales]))
    }

    /// Nearest-neighbour enlargement by a power-of-two `factor`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 2 || !factor.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "upsample factor must be a power of two >= 2, got {factor}"
            )));
        }
        let [n, c, h, w] = self.value(x).dims4()?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut data = vec![0.0; n * c * oh * ow];
        for (plane_in, plane_out) in src.chunks(h * w).zip(data.chunks_mut(oh * ow)) {
            for y in 0..oh {
                let row = &plane_in[(y / factor) * w..(y / factor + 1) * w];
                for (xo, o) in plane_out[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *o = row[xo / factor];
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], data)?;
        Ok(self.push(value, Op::UpsampleNearest(x, factor), &[x]))
    }

    /// Mean over non-overlapping `factor×factor` blocks.
    pub fn block_mean(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return shape_err(format!("block_mean: {h}x{w} not divisible by {factor}"));
        }
        let (oh, ow) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let src = self.value(x).data();
        let mut data = vec![0.0; n * c * oh * ow];
        for (plane_in, plane_out) in src.chunks(h * w).zip(data.chunks_mut(oh * ow)) {
            for y in 0..h {
                for xi in 0..w {
                    plane_out[(y / factor) * ow + xi / factor] += plane_in[y * w + xi];
                }
            }
            for v in plane_out.iter_mut() {
                *v *= norm;
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], data)?;
        Ok(self.push(value, Op::BlockMean(x, factor), &[x]))
    }

    fn check_mask(&self, pred: Var, target_len: usize, mask: &[bool]) -> Result<usize> {
        let len = self.value(pred).len();
        if target_len != len || mask.len() != len {
            return shape_err(format!(
                "masked loss: prediction has {len} elements, target {target_len}, mask {}",
                mask.len()
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(count)
    }

    /// Mean absolute error over the pixels where `mask` is set.
    pub fn masked_l1(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let count = self.check_mask(pred, target.len(), mask)?;
        let p = self.value(pred).data();
        let total: f64 = (0..p.len()).filter(|&i| mask[i]).map(|i| (p[i] - target[i]).abs()).sum();
        let value = Tensor::scalar(total / count as f64);
        let op = Op::MaskedL1 { pred, target: target.to_vec(), mask: mask.to_vec(), count };
        Ok(self.push(value, op, &[pred]))
    }

    /// Mean squared error over the pixels where `mask` is set.
    pub fn masked_mse(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let count = self.check_mask(pred, target.len(), mask)?;
        let p = self.value(pred).data();
        let total: f64 = (0..p.len()).filter(|&i| mask[i]).map(|i| (p[i] - target[i]).powi(2)).sum();
        let value = Tensor::scalar(total / count as f64);
        let op = Op::MaskedMse { pred, target: target.to_vec(), mask: mask.to_vec(), count };
        Ok(self.push(value, op, &[pred]))
    }

    /// Two-class cross-entropy of per-pixel logits `[N,2,H,W]` against
    /// labels `[N,H,W]`, averaged over masked pixels.
    pub fn masked_cross_entropy(&mut self, logits: Var, labels: &[u8], mask: &[bool]) -> Result<Var> {
        let [n, c, h, w] = self.value(logits).dims4()?;
        if c != 2 {
            return shape_err(format!("cross-entropy expects 2 class channels, got {c}"));
        }
        let pixels = n * h * w;
        if labels.len() != pixels || mask.len() != pixels {
            return shape_err(format!(
                "cross-entropy: {pixels} pixels but {} labels and {} mask entries",
                labels.len(),
                mask.len()
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let x = self.value(logits).data();
        let hw = h * w;
        let mut total = 0.0;
        for i in 0..n {
            for p in 0..hw {
                let idx = i * hw + p;
                if !mask[idx] {
                    continue;
                }
                let z0 = x[(i * 2) * hw + p];
                let z1 = x[(i * 2 + 1) * hw + p];
                let m = z0.max(z1);
                let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
                let zt = if labels[idx] == 1 { z1 } else { z0 };
                total += lse - zt;
            }
        }
        let value = Tensor::scalar(total / count as f64);
        let op = Op::MaskedCe { logits, labels: labels.to_vec(), mask: mask.to_vec(), count };
        Ok(self.push(value, op, &[logits]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::InvalidArgument(
                "backward on a loss that does not depend on any grad-enabled leaf".into(),
            ));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        pending[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            for (parent, contribution) in self.local_grads(node, &g) {
                if self.nodes[parent.0].requires_grad {
                    accumulate(&mut pending[parent.0], contribution);
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of one node for each of its parents.
    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, dims } => {
                let grads = conv::backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    *dims,
                    self.wants(*input),
                );
                let mut v = vec![(*weight, grads.weight), (*bias, grads.bias)];
                if let Some(dx) = grads.input {
                    v.push((*input, dx));
                }
                v
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                vec![(*x, xs.iter().zip(g).map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 }).collect())]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(xb).map(|(gi, v)| gi * v).collect()),
                    (*b, g.iter().zip(xa).map(|(gi, v)| gi * v).collect()),
                ]
            }
            Op::Scale(x, k) => vec![(*x, g.iter().map(|v| v * k).collect())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Mean(x) => {
                let len = self.value(*x).len();
                vec![(*x, vec![g[0] / len as f64; len])]
            }
            Op::Sqrt(x) => vec![(
                *x,
                out.iter().zip(g).map(|(&y, &gi)| if y > 0.0 { gi * 0.5 / y } else { 0.0 }).collect(),
            )],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::ConcatChannels(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4().expect("4-D");
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let (mut ga, mut gb) = (Vec::with_capacity(n * ca * hw), Vec::with_capacity(n * cb * hw));
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    ga.extend_from_slice(&g[base..base + ca * hw]);
                    gb.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.value(*x).dims4().expect("4-D");
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                vec![(*x, g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, hw)).collect())]
            }
            Op::Linear { input, weight, bias } => {
                let [n, din] = self.value(*input).dims2().expect("2-D");
                let dout = self.value(*bias).len();
                let (x, wt) = (self.value(*input).data(), self.value(*weight).data());
                let mut dx = vec![0.0; n * din];
                let mut dw = vec![0.0; dout * din];
                let mut db = vec![0.0; dout];
                for i in 0..n {
                    for o in 0..dout {
                        let go = g[i * dout + o];
                        db[o] += go;
                        for d in 0..din {
                            dw[o * din + d] += go * x[i * din + d];
                            dx[i * din + d] += go * wt[o * din + d];
                        }
                    }
                }
                vec![(*input, dx), (*weight, dw), (*bias, db)]
            }
            Op::Stack(parts) => {
                let b = parts.len();
                let [n, c] = self.value(parts[0]).dims2().expect("2-D");
                parts
                    .iter()
                    .enumerate()
                    .map(|(bi, &p)| {
                        let mut gp = Vec::with_capacity(n * c);
                        for i in 0..n {
                            gp.extend_from_slice(&g[(i * b + bi) * c..(i * b + bi + 1) * c]);
                        }
                        (p, gp)
                    })
                    .collect()
            }
            Op::BranchSoftmax(x) => {
                let (n, b, c) = match node.value.shape() {
                    &[n, b, c] => (n, b, c),
                    _ => unreachable!(),
                };
                let mut dx = vec![0.0; out.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let at = |bi: usize| (i * b + bi) * c + ch;
                        let dot: f64 = (0..b).map(|bi| g[at(bi)] * out[at(bi)]).sum();
                        for bi in 0..b {
                            dx[at(bi)] = out[at(bi)] * (g[at(bi)] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::BranchSelect(x, index) => {
                let (n, b, c) = match self.value(*x).shape() {
                    &[n, b, c] => (n, b, c),
                    _ => unreachable!(),
                };
                let mut dx = vec![0.0; n * b * c];
                for i in 0..n {
                    dx[(i * b + index) * c..(i * b + index + 1) * c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                vec![(*x, dx)]
            }
            Op::ChannelScale(x, scales) => {
                let [_, _, h, w] = self.value(*x).dims4().expect("4-D");
                let hw = h * w;
                let (xs, s) = (self.value(*x).data(), self.value(*scales).data());
                let dx = g.chunks(hw).zip(s).flat_map(|(gp, &k)| gp.iter().map(move |v| v * k)).collect();
                let ds = g
                    .chunks(hw)
                    .zip(xs.chunks(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                    .collect();
                vec![(*x, dx), (*scales, ds)]
            }
            Op::UpsampleNearest(x, factor) => {
                let [_, _, h, w] = self.value(*x).dims4().expect("4-D");
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gp, dp) in g.chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
                    for y in 0..oh {
                        for xo in 0..ow {
                            dp[(y / factor) * w + xo / factor] += gp[y * ow + xo];
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::BlockMean(x, factor) => {
                let [_, _, h, w] = self.value(*x).dims4().expect("4-D");
                let (oh, ow) = (h / factor, w / factor);
                let norm = 1.0 / (factor * factor) as f64;
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gp, dp) in g.chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
                    for y in 0..h {
                        for xi in 0..w {
                            dp[y * w + xi] = gp[(y / factor) * ow + xi / factor] * norm;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::MaskedL1 { pred, target, mask, count } => {
                let p = self.value(*pred).data();
                let k = g[0] / *count as f64;
                let dx = (0..p.len())
                    .map(|i| {
                        let e = p[i] - target[i];
                        if !mask[i] || e == 0.0 {
                            0.0
                        } else {
                            k * e.signum()
                        }
                    })
                    .collect();
                vec![(*pred, dx)]
            }
            Op::MaskedMse { pred, target, mask, count } => {
                let p = self.value(*pred).data();
                let k = 2.0 * g[0] / *count as f64;
                let dx = (0..p.len()).map(|i| if mask[i] { k * (p[i] - target[i]) } else { 0.0 }).collect();
                vec![(*pred, dx)]
            }
            Op::MaskedCe { logits, labels, mask, count } => {
                let [n, _, h, w] = self.value(*logits).dims4().expect("4-D");
                let x = self.value(*logits).data();
                let hw = h * w;
                let k = g[0] / *count as f64;
                let mut dx = vec![0.0; x.len()];
                for i in 0..n {
                    for p in 0..hw {
                        let idx = i * hw + p;
                        if !mask[idx] {
                            continue;
                        }
                        let (i0, i1) = ((i * 2) * hw + p, (i * 2 + 1) * hw + p);
                        let m = x[i0].max(x[i1]);
                        let (e0, e1) = ((x[i0] - m).exp(), (x[i1] - m).exp());
                        let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
                        let (t0, t1) = if labels[idx] == 1 { (0.0, 1.0) } else { (1.0, 0.0) };
                        dx[i0] = k * (p0 - t0);
                        dx[i1] = k * (p1 - t1);
                    }
                }
                vec![(*logits, dx)]
            }
        }
    }
}
