//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Graph`] records every primitive as it executes. Each node keeps its
//! output value and whatever intermediates its backward rule needs. Calling
//! [`Graph::backward`] walks the nodes in exact reverse execution order and
//! consumes the record; a second call fails with
//! [`Error::RecordConsumed`].
//!
//! ```
//! use danhar::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new([2], vec![1.0, -2.0]).unwrap().with_requires_grad(true));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0]);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Broadcast, ConvGeometry, Padding};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Running per-channel statistics of a batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average toward a batch's statistics. The variance
    /// folded in is the unbiased estimate.
    pub fn update(&mut self, batch: &BatchMoments) {
        let correction = if batch.count > 1 {
            batch.count as f64 / (batch.count - 1) as f64
        } else {
            1.0
        };
        for (m, &bm) in self.mean.iter_mut().zip(&batch.mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * bm;
        }
        for (v, &bv) in self.var.iter_mut().zip(&batch.var) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * bv * correction;
        }
    }
}

/// Biased batch statistics observed by a train-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    PoolChannelwise {
        input: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    PoolAcrossChannels {
        input: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A computation record: values plus the operations that produced them.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var) -> Option<Tensor> {
        self.get(var)
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.to_vec()))
    }

    /// Stores the gradient of `var` (zeros when it received none) in `target.grad`.
    pub fn write_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        let g = self
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; target.numel()]);
        target.set_grad(g)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// Logistic function clamped into the open interval (0, 1).
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op, value.data())?;
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. It is differentiated when `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that is never differentiated.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Cross-correlation with symmetric zero padding `(ph, pw)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        self.conv2d_padded(input, weight, bias, stride, Padding::symmetric(padding.0, padding.1))
    }

    /// Cross-correlation with independent padding on each side.
    pub fn conv2d_padded(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: Padding,
    ) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let &[n, cin, h, w] = xs else {
            return Err(Error::shape("conv2d", format!("input must be N×C×H×W, got {xs:?}")));
        };
        let &[cout, wcin, kh, kw] = ws else {
            return Err(Error::shape("conv2d", format!("weight must be Cout×Cin×kh×kw, got {ws:?}")));
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match {cout} output channels", self.shape(b)),
                ));
            }
        }
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let span_h = h + pad.top + pad.bottom;
        let span_w = w + pad.left + pad.right;
        if span_h < kh || span_w < kw {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {span_h}×{span_w}"
            )));
        }
        if !(span_h - kh).is_multiple_of(sh) || !(span_w - kw).is_multiple_of(sw) {
            return Err(Error::Config(format!(
                "conv2d output size is not integral for input {h}×{w}, kernel {kh}×{kw}, stride {sh}×{sw}"
            )));
        }
        let geom = ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            sh,
            sw,
            pad,
            ho: (span_h - kh) / sh + 1,
            wo: (span_w - kw) / sw + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_parts(vec![n, cout, geom.ho, geom.wo], out);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        )
    }

    /// Affine map `x·Wᵀ + b` for `x: N×F_in`, `W: F_out×F_in`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let &[n, fin] = xs else {
            return Err(Error::shape("dense", format!("input must be N×F, got {xs:?}")));
        };
        let &[fout, wfin] = ws else {
            return Err(Error::shape("dense", format!("weight must be F_out×F_in, got {ws:?}")));
        };
        if wfin != fin {
            return Err(Error::shape(
                "dense",
                format!("input has {fin} features but weight expects {wfin}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(Error::shape(
                    "dense",
                    format!("bias shape {:?} does not match {fout} outputs", self.shape(b)),
                ));
            }
        }
        let out = kernels::dense_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            n,
            fin,
            fout,
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "dense",
            Tensor::from_parts(vec![n, fout], out),
            Op::Dense {
                input,
                weight,
                bias,
            },
            &inputs,
        )
    }

    /// Batch normalization over axis 1. Train mode normalizes with the
    /// batch's own statistics and returns them so the caller can fold them
    /// into `stats`; eval mode normalizes with `stats`.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
        mode: Mode,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("batchnorm", format!("input must be N×C×…, got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{name} shape {:?} does not match {c} channels", self.shape(v)),
                ));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batchnorm", "running statistics sized for a different channel count"));
        }
        let count = numel(&xs) / c;
        let x = self.value(input).data();
        let (mean, var, moments) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::Config(format!(
                        "train-mode batch normalization needs at least 2 values per channel, got {count}"
                    )));
                }
                let (mean, var) = kernels::channel_moments(x, n, c);
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(moments))
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let xhat = kernels::normalize_channels(x, &mean, &inv_std, n, c);
        let out = kernels::affine_channels(
            &xhat,
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
        );
        let var_out = self.push(
            "batchnorm",
            Tensor::from_parts(xs, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            &[input, gamma, beta],
        )?;
        Ok((var_out, moments))
    }

    /// Global pooling over every axis after the channel axis: `N×C×… → N×C`.
    pub fn pool_channelwise(&mut self, input: Var, kind: PoolKind) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape("pool_channelwise", format!("input must be N×C×H×W, got {xs:?}")));
        }
        let groups = xs[0] * xs[1];
        let extent = numel(&xs[2..]);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(groups);
        let mut argmax = Vec::new();
        for g in 0..groups {
            let group = &x[g * extent..][..extent];
            match kind {
                PoolKind::Avg => out.push(group.iter().sum::<f64>() / extent as f64),
                PoolKind::Max => {
                    let (i, v) = kernels::first_argmax(group.iter().copied());
                    argmax.push(g * extent + i);
                    out.push(v);
                }
            }
        }
        self.push(
            "pool_channelwise",
            Tensor::from_parts(vec![xs[0], xs[1]], out),
            Op::PoolChannelwise {
                input,
                kind,
                argmax,
            },
            &[input],
        )
    }

    /// Pooling over the channel axis only: `N×C×H×W → N×1×H×W`.
    pub fn pool_across_channels(&mut self, input: Var, kind: PoolKind) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape(
                "pool_across_channels",
                format!("input must be N×C×H×W, got {xs:?}"),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        let plane = numel(&xs[2..]);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * plane];
        let mut argmax = Vec::new();
        for i in 0..n {
            for p in 0..plane {
                let column = (0..c).map(|ch| x[(i * c + ch) * plane + p]);
                match kind {
                    PoolKind::Avg => out[i * plane + p] = column.sum::<f64>() / c as f64,
                    PoolKind::Max => {
                        let (ch, v) = kernels::first_argmax(column);
                        argmax.push((i * c + ch) * plane + p);
                        out[i * plane + p] = v;
                    }
                }
            }
        }
        let mut shape = xs;
        shape[1] = 1;
        self.push(
            "pool_across_channels",
            Tensor::from_parts(shape, out),
            Op::PoolAcrossChannels {
                input,
                kind,
                argmax,
            },
            &[input],
        )
    }

    /// Non-overlapping max pooling with window `(kh, kw)`; trailing
    /// positions that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, input: Var, window: (usize, usize)) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let &[n, c, h, w] = xs.as_slice() else {
            return Err(Error::shape("max_pool2d", format!("input must be N×C×H×W, got {xs:?}")));
        };
        let (kh, kw) = window;
        if kh == 0 || kw == 0 || h < kh || w < kw {
            return Err(Error::Config(format!(
                "max_pool2d window {kh}×{kw} does not fit input {h}×{w}"
            )));
        }
        let (ho, wo) = (h / kh, w / kw);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let cells = (0..kh).flat_map(|i| (0..kw).map(move |j| (oh * kh + i) * w + ow * kw + j));
                    let (best, v) = kernels::first_argmax(cells.clone().map(|p| x[base + p]));
                    let offset = cells.clone().nth(best).expect("window is non-empty");
                    argmax.push(base + offset);
                    out.push(v);
                }
            }
        }
        self.push(
            "max_pool2d",
            Tensor::from_parts(vec![n, c, ho, wo], out),
            Op::MaxPool2d { input, argmax },
            &[input],
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect());
        self.push("relu", value, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid(v)).collect());
        self.push("sigmoid", value, Op::Sigmoid(input), &[input])
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        Broadcast::new(self.shape(a), self.shape(b)).ok_or_else(|| {
            Error::shape(
                op,
                format!(
                    "shapes {:?} and {:?} are not broadcast-compatible",
                    self.shape(a),
                    self.shape(b)
                ),
            )
        })
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<(Tensor, Broadcast)> {
        let bc = self.broadcast(op, a, b)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = if self.shape(a) == self.shape(b) {
            xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect()
        } else {
            bc.offsets().map(|(i, j)| f(xa[i], xb[j])).collect()
        };
        Ok((Tensor::from_parts(bc.out_shape.clone(), out), bc))
    }

    /// Element-wise sum with size-1 axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bc) = self.binary("add", a, b, |p, q| p + q)?;
        self.push("add", value, Op::Add(a, b, bc), &[a, b])
    }

    /// Element-wise product with size-1 axis broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bc) = self.binary("mul", a, b, |p, q| p * q)?;
        self.push("mul", value, Op::Mul(a, b, bc), &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v * factor).collect());
        self.push("scale", value, Op::Scale(input, factor), &[input])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::shape("concat", "nothing to concatenate"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", format!("cannot join {base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..][..chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(input), &[input])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(input), &[input])
    }

    /// Mean softmax cross-entropy of `logits: N×K` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        let &[n, k] = ls else {
            return Err(Error::shape("cross_entropy", format!("logits must be N×K, got {ls:?}")));
        };
        if k < 2 {
            return Err(Error::Config(format!("cross_entropy needs at least 2 classes, got {k}")));
        }
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..][..k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            total += denom.ln() + max - row[label];
            probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Propagates d(loss)/d(node) back to every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        let mut leaves: Vec<Option<Vec<f64>>> = vec![None; count];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Vec<f64>>>, target: Var, contribution: Vec<f64>| {
                if self.nodes[target.0].needs_grad {
                    accumulate(&mut grads[target.0], contribution);
                }
            };
            match &node.op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    if self.needs(*input) {
                        let gx = kernels::conv2d_backward_input(&g, self.value(*weight).data(), geom);
                        send(&mut grads, *input, gx);
                    }
                    if self.needs(*weight) {
                        let gw = kernels::conv2d_backward_weight(&g, self.value(*input).data(), geom);
                        send(&mut grads, *weight, gw);
                    }
                    if let Some(b) = bias {
                        send(&mut grads, *b, kernels::channel_sums(&g, geom.n, geom.cout));
                    }
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let (n, fin) = (self.shape(*input)[0], self.shape(*input)[1]);
                    let fout = self.shape(*weight)[0];
                    if self.needs(*input) {
                        let gx = kernels::dense_backward_input(&g, self.value(*weight).data(), n, fin, fout);
                        send(&mut grads, *input, gx);
                    }
                    if self.needs(*weight) {
                        let gw = kernels::dense_backward_weight(&g, self.value(*input).data(), n, fin, fout);
                        send(&mut grads, *weight, gw);
                    }
                    if let Some(b) = bias {
                        send(&mut grads, *b, kernels::channel_sums(&g, n, fout));
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c) = (self.shape(*input)[0], self.shape(*input)[1]);
                    let gamma_v = self.value(*gamma).data();
                    if self.needs(*input) {
                        let gx = if *batch_stats {
                            kernels::batchnorm_train_backward_input(&g, xhat, gamma_v, inv_std, n, c)
                        } else {
                            let factor: Vec<f64> = gamma_v.iter().zip(inv_std).map(|(a, b)| a * b).collect();
                            kernels::scale_channels(&g, &factor, n, c)
                        };
                        send(&mut grads, *input, gx);
                    }
                    send(&mut grads, *gamma, kernels::channel_dot(&g, xhat, n, c));
                    send(&mut grads, *beta, kernels::channel_sums(&g, n, c));
                }
                Op::PoolChannelwise {
                    input,
                    kind,
                    argmax,
                } => {
                    let len = self.value(*input).numel();
                    let mut gx = vec![0.0; len];
                    match kind {
                        PoolKind::Avg => {
                            let extent = len / g.len();
                            for (k, v) in gx.iter_mut().enumerate() {
                                *v = g[k / extent] / extent as f64;
                            }
                        }
                        PoolKind::Max => {
                            for (&pos, &gv) in argmax.iter().zip(&g) {
                                gx[pos] += gv;
                            }
                        }
                    }
                    send(&mut grads, *input, gx);
                }
                Op::PoolAcrossChannels {
                    input,
                    kind,
                    argmax,
                } => {
                    let xs = self.shape(*input);
                    let (n, c) = (xs[0], xs[1]);
                    let plane = numel(&xs[2..]);
                    let mut gx = vec![0.0; n * c * plane];
                    match kind {
                        PoolKind::Avg => {
                            for i in 0..n {
                                for ch in 0..c {
                                    for p in 0..plane {
                                        gx[(i * c + ch) * plane + p] = g[i * plane + p] / c as f64;
                                    }
                                }
                            }
                        }
                        PoolKind::Max => {
                            for (&pos, &gv) in argmax.iter().zip(&g) {
                                gx[pos] += gv;
                            }
                        }
                    }
                    send(&mut grads, *input, gx);
                }
                Op::MaxPool2d { input, argmax } => {
                    let mut gx = vec![0.0; self.value(*input).numel()];
                    for (&pos, &gv) in argmax.iter().zip(&g) {
                        gx[pos] += gv;
                    }
                    send(&mut grads, *input, gx);
                }
                Op::Relu(input) => {
                    let x = self.value(*input).data();
                    let gx = g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                    send(&mut grads, *input, gx);
                }
                Op::Sigmoid(input) => {
                    let y = node.value.data();
                    let gx = g.iter().zip(y).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                    send(&mut grads, *input, gx);
                }
                Op::Add(a, b, bc) => {
                    for side in [*a, *b] {
                        if !self.needs(side) {
                            continue;
                        }
                        let gx = if self.shape(side) == bc.out_shape.as_slice() {
                            g.clone()
                        } else {
                            let mut gx = vec![0.0; self.value(side).numel()];
                            for ((ia, ib), &gv) in bc.offsets().zip(&g) {
                                gx[if side == *a { ia } else { ib }] += gv;
                            }
                            gx
                        };
                        send(&mut grads, side, gx);
                    }
                }
                Op::Mul(a, b, bc) => {
                    let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                    if self.needs(*a) {
                        let mut ga = vec![0.0; xa.len()];
                        for ((ia, ib), &gv) in bc.offsets().zip(&g) {
                            ga[ia] += gv * xb[ib];
                        }
                        send(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; xb.len()];
                        for ((ia, ib), &gv) in bc.offsets().zip(&g) {
                            gb[ib] += gv * xa[ia];
                        }
                        send(&mut grads, *b, gb);
                    }
                }
                Op::Scale(input, factor) => {
                    send(&mut grads, *input, g.iter().map(|&v| v * factor).collect());
                }
                Op::Concat { inputs, axis } => {
                    let shape = node.value.shape();
                    let outer = numel(&shape[..*axis]);
                    let inner = numel(&shape[axis + 1..]);
                    let row = shape[*axis] * inner;
                    let mut offset = 0;
                    for &v in inputs {
                        let chunk = self.shape(v)[*axis] * inner;
                        if self.needs(v) {
                            let mut gx = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                gx.extend_from_slice(&g[o * row + offset..][..chunk]);
                            }
                            send(&mut grads, v, gx);
                        }
                        offset += chunk;
                    }
                }
                Op::Reshape(input) => send(&mut grads, *input, g),
                Op::Sum(input) => {
                    let len = self.value(*input).numel();
                    send(&mut grads, *input, vec![g[0]; len]);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        gx[i * k + l] -= scale;
                    }
                    send(&mut grads, *logits, gx);
                }
            }
        }

        Ok(Gradients {
            grads: leaves,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn param(shape: &[usize], data: &[f64]) -> Tensor {
        t(shape, data).with_requires_grad(true)
    }

    #[test]
    fn conv_of_ones_counts_overlap() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([1, 1, 1, 5]));
        let w = g.constant(Tensor::ones([1, 1, 1, 3]));
        let y = g.conv2d(x, w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 3]);
        assert_eq!(g.value(y).data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn conv_zero_kernel_yields_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2, 3], &[0.3, -1.0, 2.0, 4.0, 5.0, 6.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = g.constant(Tensor::zeros([3, 2, 1, 2]));
        let b = g.constant(t(&[3], &[0.5, -1.5, 2.0]));
        let y = g.conv2d(x, w, Some(b), (1, 1), (0, 0)).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 3, 2, 2]);
        for (i, &val) in v.data().iter().enumerate() {
            assert_eq!(val, [0.5, -1.5, 2.0][i / 4]);
        }
    }

    #[test]
    fn conv_difference_kernel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[1, 1, 1, 2], &[1.0, -1.0]));
        let y = g.conv2d(x, w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([1, 2, 1, 5]));
        let w = g.constant(Tensor::ones([1, 3, 1, 3]));
        assert!(matches!(g.conv2d(x, w, None, (1, 1), (0, 0)), Err(Error::Shape { .. })));
        let w = g.constant(Tensor::ones([1, 2, 1, 2]));
        // (5 - 2) / 2 is not integral.
        assert!(matches!(g.conv2d(x, w, None, (1, 2), (0, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn dense_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]));
        let y = g.dense(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0]);

        let eye = g.constant(Tensor::eye(2));
        let y = g.dense(x, eye, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let zw = g.constant(Tensor::zeros([3, 2]));
        let b = g.constant(Tensor::full([3], 7.0));
        let y = g.dense(x, zw, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, 7.0, 7.0]);

        let bad = g.constant(Tensor::zeros([3, 4]));
        assert!(g.dense(x, bad, None).is_err());
    }

    #[test]
    fn batchnorm_train_fixture() {
        // Direct formula: gamma * (x - 2.5) / sqrt(1.25 + 1e-5) + beta.
        let mut g = Graph::new();
        let x = g.constant(t(&[4, 1, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let gamma = g.constant(t(&[1], &[2.0]));
        let beta = g.constant(t(&[1], &[1.0]));
        let stats = RunningStats::new(1);
        let (y, moments) = g.batchnorm(x, gamma, beta, &stats, Mode::Train).unwrap();
        let expected = [-1.683_270_84, 0.105_576_39, 1.894_423_61, 3.683_270_84];
        for (a, b) in g.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        let m = moments.unwrap();
        assert_eq!(m.mean, vec![2.5]);
        assert_eq!(m.var, vec![1.25]);
        assert_eq!(m.count, 4);
    }

    #[test]
    fn batchnorm_running_update_uses_momentum() {
        let mut stats = RunningStats::new(1);
        stats.update(&BatchMoments {
            mean: vec![2.5],
            var: vec![1.25],
            count: 4,
        });
        assert!((stats.mean[0] - 0.25).abs() < 1e-15);
        // unbiased 1.25 * 4/3
        assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_eval_is_near_identity_at_unit_stats() {
        let mut g = Graph::new();
        let data = [0.3, -1.2, 4.0, 2.0, 0.0, 7.5];
        let x = g.constant(t(&[3, 2, 1, 1], &data));
        let gamma = g.constant(Tensor::ones([2]));
        let beta = g.constant(Tensor::zeros([2]));
        let (y, m) = g.batchnorm(x, gamma, beta, &RunningStats::new(2), Mode::Eval).unwrap();
        assert!(m.is_none());
        for (a, b) in g.value(y).data().iter().zip(data) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batchnorm_constant_channel_is_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([4, 1, 1, 2], 3.0));
        let gamma = g.constant(Tensor::ones([1]));
        let beta = g.constant(Tensor::zeros([1]));
        let (y, _) = g.batchnorm(x, gamma, beta, &RunningStats::new(1), Mode::Train).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_train_needs_two_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([1, 1, 1, 1]));
        let gamma = g.constant(Tensor::ones([1]));
        let beta = g.constant(Tensor::zeros([1]));
        assert!(g.batchnorm(x, gamma, beta, &RunningStats::new(1), Mode::Train).is_err());
    }

    #[test]
    fn channelwise_pool_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let avg = g.pool_channelwise(x, PoolKind::Avg).unwrap();
        let max = g.pool_channelwise(x, PoolKind::Max).unwrap();
        assert_eq!(g.value(avg).data(), &[1.5, 3.5]);
        assert_eq!(g.value(max).data(), &[2.0, 4.0]);

        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let avg = g.pool_channelwise(x, PoolKind::Avg).unwrap();
        let max = g.pool_channelwise(x, PoolKind::Max).unwrap();
        assert_eq!(g.value(avg).data(), &[2.5]);
        assert_eq!(g.value(max).data(), &[4.0]);

        let x = g.constant(t(&[1, 1, 1, 2], &[-5.0, -1.0]));
        let avg = g.pool_channelwise(x, PoolKind::Avg).unwrap();
        let max = g.pool_channelwise(x, PoolKind::Max).unwrap();
        assert_eq!(g.value(avg).data(), &[-3.0]);
        assert_eq!(g.value(max).data(), &[-1.0]);

        let x = g.constant(Tensor::full([2, 3, 2, 2], 1.75));
        let avg = g.pool_channelwise(x, PoolKind::Avg).unwrap();
        let max = g.pool_channelwise(x, PoolKind::Max).unwrap();
        assert!(g.value(avg).data().iter().all(|&v| v == 1.75));
        assert!(g.value(max).data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn across_channel_pool_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1, 3], &[1.0, -2.0, 0.5]));
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let y = g.pool_across_channels(x, kind).unwrap();
            assert_eq!(g.value(y).data(), &[1.0, -2.0, 0.5]);
        }
        let x = g.constant(t(&[1, 2, 1, 2], &[2.0, 2.0, 4.0, 4.0]));
        let avg = g.pool_across_channels(x, PoolKind::Avg).unwrap();
        let max = g.pool_across_channels(x, PoolKind::Max).unwrap();
        assert_eq!(g.shape(avg), &[1, 1, 1, 2]);
        assert_eq!(g.value(avg).data(), &[3.0, 3.0]);
        assert_eq!(g.value(max).data(), &[4.0, 4.0]);

        let x = g.constant(t(&[1, 2, 1, 1], &[1.0, -1.0]));
        let avg = g.pool_across_channels(x, PoolKind::Avg).unwrap();
        let max = g.pool_across_channels(x, PoolKind::Max).unwrap();
        assert_eq!(g.value(avg).data(), &[0.0]);
        assert_eq!(g.value(max).data(), &[1.0]);
    }

    #[test]
    fn max_gradient_goes_to_first_tie() {
        let mut g = Graph::new();
        let x = g.leaf(param(&[1, 1, 1, 4], &[1.0, 3.0, 3.0, 0.0]));
        let m = g.pool_channelwise(x, PoolKind::Max).unwrap();
        let loss = g.sum(m).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);

        let mut g = Graph::new();
        let x = g.leaf(param(&[1, 1, 1, 4], &[2.0, 2.0, 5.0, 5.0]));
        let m = g.max_pool2d(x, (1, 2)).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 5.0]);
        let loss = g.sum(m).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, -3.0, 3.0]));
        let s = g.sigmoid(x).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        assert!((sigmoid(2.0) - 0.880_797).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_stays_open_interval_at_extremes() {
        for x in [-1e6, -800.0, -40.0, 40.0, 800.0, 1e6] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
    }

    #[test]
    fn broadcast_mul_and_add() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let w = g.constant(t(&[2, 2, 1, 1], &[0.5, 2.0, 1.0, 0.0]));
        let y = g.mul(a, w).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 1.0, 6.0, 8.0, 5.0, 6.0, 0.0, 0.0]);
        let p = g.constant(t(&[2, 1, 1, 2], &[10.0, 20.0, 30.0, 40.0]));
        let y = g.add(a, p).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0, 35.0, 46.0, 37.0, 48.0]);
        let bad = g.constant(Tensor::ones([3, 1, 1, 1]));
        assert!(g.mul(a, bad).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full([2, 3, 1], 0.7).with_requires_grad(true));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_consumes_record() {
        let mut g = Graph::new();
        let x = g.leaf(param(&[2], &[1.0, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0]);
        assert!(matches!(g.backward(loss), Err(Error::RecordConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(param(&[2], &[1.0, -2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.leaf(param(&[2], &[3.0, 4.0]));
        let y = g.mul(x, w).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([2, 6]));
        let l = g.cross_entropy(z, &[0, 5]).unwrap();
        assert!((g.value(l).item().unwrap() - 6f64.ln()).abs() < 1e-12);

        let z = g.constant(t(&[1, 2], &[2.0, 0.0]));
        let l = g.cross_entropy(z, &[0]).unwrap();
        assert!((g.value(l).item().unwrap() - 0.126_928).abs() < 1e-6);

        let z = g.constant(t(&[1, 3], &[1000.0, 0.0, -3.0]));
        let l = g.cross_entropy(z, &[0]).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-12);

        let z = g.constant(t(&[1, 1], &[0.0]));
        assert!(matches!(g.cross_entropy(z, &[0]), Err(Error::Config(_))));
    }

    #[test]
    fn concat_and_reshape_route_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(param(&[1, 1, 1, 2], &[1.0, 2.0]));
        let b = g.leaf(param(&[1, 1, 1, 2], &[3.0, 4.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 2, 1, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = g.reshape(c, &[4]).unwrap();
        let weights = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.mul(r, weights).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0, 2.0]);
        assert_eq!(grads.get(b).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1e308, 1e308]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }
}
