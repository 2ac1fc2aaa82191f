//! Dynamic reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on
//! the tape and are addressed by [`Var`] handles; parameters are read from a
//! [`ParamStore`] and receive their gradients when [`Tape::backward`]
//! consumes the tape.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::param::{BufferId, ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Whether normalisation layers use batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Keypoints of one person, as `(keypoint type, flat grid index)`.
pub type InstanceCells = Vec<(usize, usize)>;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Option<Vec<f64>>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    GlobalAvgPool(Var),
    UpsampleNearest {
        input: Var,
        factor: usize,
    },
    ResizeBilinear(Var),
    Matmul(Var, Var),
    Concat(Vec<Var>),
    SliceChannels {
        input: Var,
        start: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale {
        input: Var,
        factor: f64,
    },
    Reshape(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Sum(Var),
    Mean(Var),
    Index {
        input: Var,
        index: usize,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    AssocEmbed {
        tags: Var,
        grad_pull: Vec<f64>,
        grad_push: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of non-parameter leaves, returned by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(|g| g.as_slice())
    }
}

/// Record of one forward computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: BTreeMap<ParamId, Var>,
    buffer_updates: Vec<(BufferId, Vec<f64>)>,
    conv_weight_fault: Option<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            params: BTreeMap::new(),
            buffer_updates: Vec::new(),
            conv_weight_fault: None,
        }
    }

    /// A tape that records values only; nothing on it can be differentiated.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Test fixture: scales every convolution weight gradient by `factor`,
    /// producing a deliberately wrong backward pass.
    #[doc(hidden)]
    pub fn inject_conv_weight_fault(&mut self, factor: f64) {
        self.conv_weight_fault = Some(factor);
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

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.needs(*v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. It is differentiable iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = self.grad_enabled && tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor.detached(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor.detached(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter onto the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let value = store.get(id).tensor.detached();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        let var = Var(self.nodes.len() - 1);
        self.params.insert(id, var);
        var
    }

    /// Running-statistic updates produced by train-mode normalisation.
    pub fn take_buffer_updates(&mut self) -> Vec<(BufferId, Vec<f64>)> {
        core::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn defer_buffer_update(&mut self, id: BufferId, values: Vec<f64>) {
        self.buffer_updates.push((id, values));
    }

    // ---------------------------------------------------------------- ops

    /// 2-D cross-correlation over NCHW input with an `[out, in, kh, kw]`
    /// weight.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected rank-4 input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but weight expects {}", xs[1], ws[1]),
            ));
        }
        if !(ws[2] == 1 || ws[2] == 3) || !(ws[3] == 1 || ws[3] == 3) {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} unsupported (1 or 3 only)", ws[2], ws[3]),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::shape("conv2d", format!("stride {stride} unsupported")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} for {} output channels", self.shape(b), ws[0]),
                ));
            }
        }
        let (ph, pw) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        // Output size is floored, as in the usual stride-2 "same" convolution.
        if ph < ws[2] || pw < ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "spatial size {}x{} with padding {padding} is smaller than the {}x{} kernel",
                    xs[2], xs[3], ws[2], ws[3]
                ),
            ));
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
        };
        let keep = self.grad_enabled && self.needs(weight);
        let (out, cols) = kernels::conv2d_forward(
            self.data(input),
            self.data(weight),
            bias.map(|b| self.data(b)),
            &geom,
            keep,
        );
        let shape = [geom.batch, geom.out_channels, geom.out_height(), geom.out_width()];
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = libm::exp(src[at(j)] - max);
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { input: x, axis }, &[x]))
    }

    /// Spatial mean per channel: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.rank4(x, "global_avg_pool")?;
        let plane = s[2] * s[3];
        let data = self
            .data(x)
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&[s[0], s[1], 1, 1], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.rank4(x, "upsample_nearest")?;
        if factor == 0 {
            return Err(Error::shape("upsample_nearest", "factor must be positive"));
        }
        let data = kernels::upsample_nearest(self.data(x), s[0] * s[1], s[2], s[3], factor);
        let value = Tensor::new(&[s[0], s[1], s[2] * factor, s[3] * factor], data)?;
        Ok(self.push(value, Op::UpsampleNearest { input: x, factor }, &[x]))
    }

    /// Bilinear resize (half-pixel centres) to an explicit spatial size.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.rank4(x, "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", "empty output size"));
        }
        let data = kernels::resize_bilinear(self.data(x), s[0] * s[1], s[2], s[3], out_h, out_w);
        let value = Tensor::new(&[s[0], s[1], out_h, out_w], data)?;
        Ok(self.push(value, Op::ResizeBilinear(x), &[x]))
    }

    /// Matrix product over the last two axes; rank 2 or batched rank 3.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == sb.len()
            && (sa.len() == 2 || sa.len() == 3)
            && sa[..sa.len() - 2] == sb[..sb.len() - 2]
            && sa[sa.len() - 1] == sb[sb.len() - 2];
        if !ok {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch = if r == 3 { sa[0] } else { 1 };
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            kernels::gemm_acc(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend_from_slice(&[m, n]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Matmul(a, b), &[a, b]))
    }

    /// Concatenation along axis 1.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(Error::shape("concat_channels", "inputs must have rank >= 2"));
        }
        let mut channels = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{s:?} incompatible with {base:?}"),
                ));
            }
            channels += s[1];
        }
        let inner: usize = base[2..].iter().product();
        let mut out = Vec::with_capacity(base[0] * channels * inner);
        for n in 0..base[0] {
            for &x in xs {
                let c = self.shape(x)[1];
                out.extend_from_slice(&self.data(x)[n * c * inner..(n + 1) * c * inner]);
            }
        }
        let mut shape = base.clone();
        shape[1] = channels;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }

    /// Channels `start..start + len` of a rank >= 2 tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} of {s:?}", start + len),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(s[0] * len * inner);
        for n in 0..s[0] {
            let off = (n * s[1] + start) * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::SliceChannels { input: x, start }, &[x]))
    }

    /// Elementwise sum with singleton broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product with singleton broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Scale { input: x, factor }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Per-channel batch normalisation of an NCHW tensor.
    ///
    /// In [`Mode::Train`] the batch statistics are used and the running
    /// statistics are updated in place; in [`Mode::Eval`] the running
    /// statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        mode: Mode,
    ) -> Result<Var> {
        let s = self.rank4(x, "batch_norm")?;
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("per-channel parameters must have length {c}"),
            ));
        }
        let plane = s[2] * s[3];
        let count = s[0] * plane;
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match mode {
            Mode::Train => {
                for n in 0..s[0] {
                    for ch in 0..c {
                        let off = (n * c + ch) * plane;
                        mean[ch] += src[off..off + plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for n in 0..s[0] {
                    for ch in 0..c {
                        let off = (n * c + ch) * plane;
                        var[ch] += src[off..off + plane]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<f64>();
                    }
                }
                let unbias = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                var.iter_mut().for_each(|v| *v /= count as f64);
                for ch in 0..c {
                    running_mean[ch] = (1.0 - BN_MOMENTUM) * running_mean[ch] + BN_MOMENTUM * mean[ch];
                    running_var[ch] =
                        (1.0 - BN_MOMENTUM) * running_var[ch] + BN_MOMENTUM * var[ch] * unbias;
                }
            }
            Mode::Eval => {
                mean.copy_from_slice(running_mean);
                var.copy_from_slice(running_var);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for n in 0..s[0] {
            for ch in 0..c {
                let off = (n * c + ch) * plane;
                for i in off..off + plane {
                    let h = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Selects one element (flat index) as a scalar.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let v = *t.data().get(index).ok_or_else(|| {
            Error::shape("index", format!("index {index} out of {} elements", t.numel()))
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Index { input: x, index }, &[x]))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let n = p.numel() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
        ))
    }

    /// Associative-embedding grouping loss. Returns a length-2 tensor
    /// `[pull, push]`, each averaged over the batch.
    ///
    /// `tags` is `[N, K * tag_dim, H, W]`; `instances[n]` lists the persons of
    /// image `n`, each as the `(keypoint type, flat grid index)` cells its
    /// tags are read from. For person `i` with mean tag `m_i`:
    /// `pull = mean_i mean_k |h_ik - m_i|^2` and
    /// `push = mean_{i<j} exp(-|m_i - m_j|^2 / (2 sigma^2))`.
    pub fn assoc_embed_loss(
        &mut self,
        tags: Var,
        tag_dim: usize,
        instances: &[Vec<InstanceCells>],
        sigma: f64,
    ) -> Result<Var> {
        let s = self.rank4(tags, "assoc_embed_loss")?;
        if tag_dim == 0 || s[1] % tag_dim != 0 || instances.len() != s[0] {
            return Err(Error::shape(
                "assoc_embed_loss",
                format!(
                    "tagmap {s:?} with tag_dim {tag_dim} and {} annotated images",
                    instances.len()
                ),
            ));
        }
        let k_types = s[1] / tag_dim;
        let plane = s[2] * s[3];
        let data = self.data(tags);
        let mut grad_pull = vec![0.0; data.len()];
        let mut grad_push = vec![0.0; data.len()];
        let (mut pull_total, mut push_total) = (0.0, 0.0);
        let batch = s[0] as f64;
        let addr = |n: usize, k: usize, d: usize, cell: usize| ((n * s[1] + k * tag_dim + d) * plane) + cell;

        for (n, people) in instances.iter().enumerate() {
            let people: Vec<&InstanceCells> = people.iter().filter(|p| !p.is_empty()).collect();
            for p in &people {
                for &(k, cell) in p.iter() {
                    if k >= k_types || cell >= plane {
                        return Err(Error::shape(
                            "assoc_embed_loss",
                            format!("keypoint ({k}, {cell}) outside tagmap {s:?}"),
                        ));
                    }
                }
            }
            if people.is_empty() {
                continue;
            }
            let means: Vec<Vec<f64>> = people
                .iter()
                .map(|p| {
                    let mut m = vec![0.0; tag_dim];
                    for &(k, cell) in p.iter() {
                        for (d, md) in m.iter_mut().enumerate() {
                            *md += data[addr(n, k, d, cell)];
                        }
                    }
                    m.iter_mut().for_each(|v| *v /= p.len() as f64);
                    m
                })
                .collect();
            let count = people.len() as f64;
            let mut pull = 0.0;
            for (p, m) in people.iter().zip(&means) {
                let size = p.len() as f64;
                for &(k, cell) in p.iter() {
                    for d in 0..tag_dim {
                        let i = addr(n, k, d, cell);
                        let diff = data[i] - m[d];
                        pull += diff * diff / size;
                        grad_pull[i] += 2.0 * diff / (size * count * batch);
                    }
                }
            }
            pull_total += pull / count;

            if people.len() > 1 {
                let pairs = count * (count - 1.0) / 2.0;
                let mut push = 0.0;
                // d push / d mean_i accumulated per person before spreading
                let mut grad_mean = vec![vec![0.0; tag_dim]; people.len()];
                for i in 0..people.len() {
                    for j in i + 1..people.len() {
                        let dist2: f64 = (0..tag_dim)
                            .map(|d| (means[i][d] - means[j][d]) * (means[i][d] - means[j][d]))
                            .sum();
                        let e = libm::exp(-dist2 / (2.0 * sigma * sigma));
                        push += e;
                        for d in 0..tag_dim {
                            let g = -e * (means[i][d] - means[j][d]) / (sigma * sigma);
                            grad_mean[i][d] += g;
                            grad_mean[j][d] -= g;
                        }
                    }
                }
                push_total += push / pairs;
                for (p, gm) in people.iter().zip(&grad_mean) {
                    let size = p.len() as f64;
                    for &(k, cell) in p.iter() {
                        for d in 0..tag_dim {
                            grad_push[addr(n, k, d, cell)] += gm[d] / (pairs * size * batch);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[2], vec![pull_total / batch, push_total / batch])?;
        Ok(self.push(
            value,
            Op::AssocEmbed {
                tags,
                grad_pull,
                grad_push,
            },
            &[tags],
        ))
    }

    fn rank4(&self, x: Var, op: &'static str) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape(op, format!("expected rank-4 tensor, got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    fn broadcast_binary(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            return Tensor::new(ta.shape(), data);
        }
        let out_shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())))?;
        let map = BroadcastMap::new(&out_shape, ta.shape(), tb.shape());
        let (da, db) = (ta.data(), tb.data());
        let data = (0..numel(&out_shape))
            .map(|o| {
                let (ia, ib) = map.sources(o);
                f(da[ia], db[ib])
            })
            .collect();
        Tensor::new(&out_shape, data)
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`, consuming the tape.
    ///
    /// Parameter gradients are added to the store's gradient buffers;
    /// gradients of differentiable leaves are returned.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(Error::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = Gradients::default();
        let fault = self.conv_weight_fault;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    leaves.leaves.insert(Var(idx), g);
                }
                Op::Param(id) => store.get_mut(*id).tensor.accumulate_grad(&g),
                op => self.backward_op(op, &node.value, &g, &mut grads, fault),
            }
        }
        Ok(leaves)
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], var: Var) -> Option<&'a mut Vec<f64>> {
        if !self.needs(var) {
            return None;
        }
        let len = self.value(var).numel();
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_op(
        &self,
        op: &Op,
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        fault: Option<f64>,
    ) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let x = self.data(*input);
                let w = self.data(*weight);
                if let Some(gb) = bias.and_then(|b| self.grad_slot(grads, b)) {
                    kernels::conv2d_backward(g, x, None, w, geom, None, None, Some(gb));
                }
                if let Some(gw) = self.grad_slot(grads, *weight) {
                    match fault {
                        None => kernels::conv2d_backward(g, x, cols.as_deref(), w, geom, None, Some(gw), None),
                        Some(f) => {
                            let mut tmp = vec![0.0; gw.len()];
                            kernels::conv2d_backward(g, x, cols.as_deref(), w, geom, None, Some(&mut tmp), None);
                            for (a, t) in gw.iter_mut().zip(tmp) {
                                *a += f * t;
                            }
                        }
                    }
                }
                if let Some(gi) = self.grad_slot(grads, *input) {
                    kernels::conv2d_backward(g, x, None, w, geom, Some(gi), None, None);
                }
            }
            Op::Relu(x) => {
                let src = self.data(*x);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((a, &v), &gv) in gx.iter_mut().zip(src).zip(g) {
                        if v > 0.0 {
                            *a += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((a, &y), &gv) in gx.iter_mut().zip(out.data()).zip(g) {
                        *a += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { input, axis } => {
                if let Some(gx) = self.grad_slot(grads, *input) {
                    let (outer, len, inner) = axis_split(out.shape(), *axis);
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (chunk, &gv) in gx.chunks_mut(plane).zip(g) {
                        chunk.iter_mut().for_each(|a| *a += gv / plane as f64);
                    }
                }
            }
            Op::UpsampleNearest { input, factor } => {
                let s = self.shape(*input).to_vec();
                if let Some(gx) = self.grad_slot(grads, *input) {
                    kernels::upsample_nearest_backward(g, s[0] * s[1], s[2], s[3], *factor, gx);
                }
            }
            Op::ResizeBilinear(x) => {
                let s = self.shape(*x).to_vec();
                let os = out.shape();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    kernels::resize_bilinear_backward(g, s[0] * s[1], s[2], s[3], os[2], os[3], gx);
                }
            }
            Op::Matmul(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b);
                let r = sa.len();
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch = if r == 3 { sa[0] } else { 1 };
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for bi in 0..batch {
                        kernels::gemm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &db[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for bi in 0..batch {
                        kernels::gemm_tn_acc(
                            &da[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Concat(xs) => {
                let s = out.shape();
                let inner: usize = s[2..].iter().product();
                let total = s[1];
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if let Some(gx) = self.grad_slot(grads, x) {
                        for n in 0..s[0] {
                            let src = &g[(n * total + offset) * inner..(n * total + offset + c) * inner];
                            for (a, v) in gx[n * c * inner..(n + 1) * c * inner].iter_mut().zip(src) {
                                *a += v;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { input, start } => {
                let s = self.shape(*input).to_vec();
                let inner: usize = s[2..].iter().product();
                let len = out.shape()[1];
                if let Some(gx) = self.grad_slot(grads, *input) {
                    for n in 0..s[0] {
                        let dst = &mut gx[(n * s[1] + start) * inner..(n * s[1] + start + len) * inner];
                        for (a, v) in dst.iter_mut().zip(&g[n * len * inner..(n + 1) * len * inner]) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                let map = BroadcastMap::new(out.shape(), self.shape(*a), self.shape(*b));
                for (side, var) in [(0, *a), (1, *b)] {
                    let same = self.shape(var) == out.shape();
                    if let Some(gx) = self.grad_slot(grads, var) {
                        if same {
                            gx.iter_mut().zip(g).for_each(|(x, v)| *x += v);
                        } else {
                            for (o, &gv) in g.iter().enumerate() {
                                let src = map.sources(o);
                                gx[if side == 0 { src.0 } else { src.1 }] += gv;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let map = BroadcastMap::new(out.shape(), self.shape(*a), self.shape(*b));
                let (da, db) = (self.data(*a), self.data(*b));
                if self.shape(*a) == self.shape(*b) {
                    if let Some(ga) = self.grad_slot(grads, *a) {
                        for ((x, gv), bv) in ga.iter_mut().zip(g).zip(db) {
                            *x += gv * bv;
                        }
                    }
                    if let Some(gb) = self.grad_slot(grads, *b) {
                        for ((x, gv), av) in gb.iter_mut().zip(g).zip(da) {
                            *x += gv * av;
                        }
                    }
                    return;
                }
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, &gv) in g.iter().enumerate() {
                        let (ia, ib) = map.sources(o);
                        ga[ia] += gv * db[ib];
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for (o, &gv) in g.iter().enumerate() {
                        let (ia, ib) = map.sources(o);
                        gb[ib] += gv * da[ia];
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(gx) = self.grad_slot(grads, *input) {
                    for (a, v) in gx.iter_mut().zip(g) {
                        *a += v * factor;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (a, v) in gx.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*input).to_vec();
                let (c, plane) = (s[1], s[2] * s[3]);
                let count = (s[0] * plane) as f64;
                let gam = self.data(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for n in 0..s[0] {
                    for ch in 0..c {
                        let off = (n * c + ch) * plane;
                        for i in off..off + plane {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for (a, v) in gg.iter_mut().zip(&sum_gx) {
                        *a += v;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for (a, v) in gb.iter_mut().zip(&sum_g) {
                        *a += v;
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *input) {
                    for n in 0..s[0] {
                        for ch in 0..c {
                            let off = (n * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + plane {
                                gx[i] += if *train {
                                    k * (g[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            Op::Index { input, index } => {
                if let Some(gx) = self.grad_slot(grads, *input) {
                    gx[*index] += g[0];
                }
            }
            Op::Mse { pred, target } => {
                let p = self.data(*pred);
                let n = p.len() as f64;
                if let Some(gp) = self.grad_slot(grads, *pred) {
                    for ((a, &pv), &tv) in gp.iter_mut().zip(p).zip(target) {
                        *a += g[0] * 2.0 * (pv - tv) / n;
                    }
                }
            }
            Op::AssocEmbed {
                tags,
                grad_pull,
                grad_push,
            } => {
                if let Some(gt) = self.grad_slot(grads, *tags) {
                    for ((a, p), q) in gt.iter_mut().zip(grad_pull).zip(grad_push) {
                        *a += g[0] * p + g[1] * q;
                    }
                }
            }
        }
    }
}

/// Logistic function, kept inside the open interval `(0, 1)` even where
/// the exact value rounds to an endpoint.
pub fn sigmoid(v: f64) -> f64 {
    let y = if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `(prod(shape[..axis]), shape[axis], prod(shape[axis+1..]))`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Maps flat output indices of a broadcast op back to both operands.
struct BroadcastMap {
    out_strides: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(out: &[usize], a: &[usize], b: &[usize]) -> Self {
        let strides = |s: &[usize]| {
            let mut st = vec![0; s.len()];
            let mut acc = 1;
            for i in (0..s.len()).rev() {
                st[i] = if s[i] == 1 && out[i] != 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        let mut out_strides = vec![0; out.len()];
        let mut acc = 1;
        for i in (0..out.len()).rev() {
            out_strides[i] = acc;
            acc *= out[i];
        }
        BroadcastMap {
            out_strides,
            a_strides: strides(a),
            b_strides: strides(b),
        }
    }

    fn sources(&self, mut o: usize) -> (usize, usize) {
        let (mut ia, mut ib) = (0, 0);
        for ((os, as_), bs) in self.out_strides.iter().zip(&self.a_strides).zip(&self.b_strides) {
            let coord = o / os;
            o %= os;
            ia += coord * as_;
            ib += coord * bs;
        }
        (ia, ib)
    }
}
