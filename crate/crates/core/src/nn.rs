//! Layers shared by the network modules.

use alloc::format;
use alloc::string::String;

use rand::Rng;

use crate::error::Result;
use crate::param::{BufferId, ParamId, ParamStore};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Everything a module needs during one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Ctx { tape, store, mode }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Parameter registration helper with hierarchical names.
pub struct Builder<'a, R: Rng + ?Sized> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<'a, R: Rng + ?Sized> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Builder { store, rng }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// 2-D convolution with Kaiming-uniform weights and zero bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        b: &mut Builder<'_, R>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = b.store.add(
            join(name, "weight"),
            Tensor::kaiming_uniform(&[out_ch, in_ch, kernel, kernel], b.rng),
        );
        let bias = bias.then(|| b.store.add(join(name, "bias"), Tensor::zeros(&[out_ch])));
        Conv {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|id| cx.param(id));
        cx.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Batch normalisation with learned affine terms and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: b.store.add(join(name, "gamma"), Tensor::ones(&[channels])),
            beta: b.store.add(join(name, "beta"), Tensor::zeros(&[channels])),
            running_mean: b
                .store
                .add_buffer(join(name, "running_mean"), Tensor::zeros(&[channels])),
            running_var: b
                .store
                .add_buffer(join(name, "running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        let mut mean = cx.store.buffer(self.running_mean).data().to_vec();
        let mut var = cx.store.buffer(self.running_var).data().to_vec();
        let out = cx.tape.batch_norm(x, gamma, beta, &mut mean, &mut var, cx.mode)?;
        if cx.mode == Mode::Train {
            cx.tape.defer_buffer_update(self.running_mean, mean);
            cx.tape.defer_buffer_update(self.running_var, var);
        }
        Ok(out)
    }
}

/// Convolution (no bias) followed by batch norm and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        b: &mut Builder<'_, R>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        ConvBn {
            conv: Conv::new(b, &join(name, "conv"), in_ch, out_ch, kernel, stride, false),
            bn: BatchNorm::new(b, &join(name, "bn"), out_ch),
            relu,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(if self.relu { cx.tape.relu(y) } else { y })
    }
}

/// Residual basic block: two 3x3 conv/norm layers and an identity skip.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub first: ConvBn,
    pub second: ConvBn,
}

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, name: &str, channels: usize) -> Self {
        BasicBlock {
            first: ConvBn::new(b, &join(name, "conv1"), channels, channels, 3, 1, true),
            second: ConvBn::new(b, &join(name, "conv2"), channels, channels, 3, 1, false),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.first.forward(cx, x)?;
        let y = self.second.forward(cx, y)?;
        let y = cx.tape.add(y, x)?;
        Ok(cx.tape.relu(y))
    }
}

/// Applies deferred running-statistic updates from a train-mode tape.
pub fn apply_buffer_updates(store: &mut ParamStore, tape: &mut Tape) {
    for (id, values) in tape.take_buffer_updates() {
        store.buffer_mut(id).data_mut().copy_from_slice(&values);
    }
}

/// Zero-mean, unit-variance running statistics (the initial state).
pub fn reset_running_stats(store: &mut ParamStore) {
    for b in store.buffers_mut() {
        let fill = if b.name.ends_with("running_var") { 1.0 } else { 0.0 };
        b.tensor = Tensor::full(b.tensor.shape(), fill);
    }
}
