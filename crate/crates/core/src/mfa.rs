//! Multi-branch feature align: a four-branch dense step block.
//!
//! A 1x1 convolution mixes the input, which is then split channel-wise into
//! four contiguous slices of `C/4`. Branch `b` (1-based) first receives its
//! slice plus the previous branch's output, then runs `b` densely connected
//! 3x3 layers: layer `l` sees the concatenation of the branch input and all
//! earlier layer outputs (`l * C/4` channels) and emits `C/4` channels. The
//! last layer's output is the branch output. The four branch outputs are
//! concatenated and mixed by a final 1x1 convolution.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Builder, Conv, ConvBn, Ctx};
use crate::tape::Var;

pub const BRANCHES: usize = 4;

/// Input width of dense layer `layer` in branch `branch` (both 1-based).
pub fn dense_layer_input_width(branch: usize, layer: usize, channels: usize) -> Result<usize> {
    if layer == 0 || layer > branch || branch > BRANCHES {
        return Err(Error::config(format!(
            "dense layer {layer} of branch {branch} is outside 1 <= layer <= branch <= {BRANCHES}"
        )));
    }
    if channels % BRANCHES != 0 {
        return Err(Error::config(format!(
            "channel count {channels} is not divisible by {BRANCHES}"
        )));
    }
    Ok(layer * channels / BRANCHES)
}

#[derive(Debug, Clone)]
pub struct Mfa {
    pub channels: usize,
    pub entry: Conv,
    /// `branches[b]` holds `b + 1` dense layers.
    pub branches: Vec<Vec<ConvBn>>,
    pub exit: Conv,
}

/// Intermediate values of one forward pass, for inspection in tests.
#[derive(Debug, Clone)]
pub struct MfaTrace {
    pub slices: Vec<Var>,
    /// Branch inputs `slice_b + o_{b-1}`.
    pub branch_inputs: Vec<Var>,
    pub branch_outputs: Vec<Var>,
    pub output: Var,
}

impl Mfa {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, name: &str, channels: usize) -> Result<Self> {
        if channels == 0 || channels % BRANCHES != 0 {
            return Err(Error::config(format!(
                "dense step block needs channels divisible by {BRANCHES}, got {channels}"
            )));
        }
        let growth = channels / BRANCHES;
        let entry = Conv::new(b, &join(name, "entry"), channels, channels, 1, 1, true);
        let mut branches = Vec::with_capacity(BRANCHES);
        for br in 1..=BRANCHES {
            let mut layers = Vec::with_capacity(br);
            for l in 1..=br {
                let width = dense_layer_input_width(br, l, channels)?;
                layers.push(ConvBn::new(
                    b,
                    &join(name, &format!("branch{br}.layer{l}")),
                    width,
                    growth,
                    3,
                    1,
                    true,
                ));
            }
            branches.push(layers);
        }
        let exit = Conv::new(b, &join(name, "exit"), channels, channels, 1, 1, true);
        Ok(Mfa {
            channels,
            entry,
            branches,
            exit,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(cx, x)?.output)
    }

    pub fn forward_traced(&self, cx: &mut Ctx<'_>, x: Var) -> Result<MfaTrace> {
        let s = cx.tape.shape(x);
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape(
                "mfa_forward",
                format!("expected [N, {}, H, W], got {s:?}", self.channels),
            ));
        }
        let growth = self.channels / BRANCHES;
        let mixed = self.entry.forward(cx, x)?;
        let mut slices = Vec::with_capacity(BRANCHES);
        for b in 0..BRANCHES {
            slices.push(cx.tape.slice_channels(mixed, b * growth, growth)?);
        }
        let mut branch_inputs = Vec::with_capacity(BRANCHES);
        let mut branch_outputs: Vec<Var> = Vec::with_capacity(BRANCHES);
        for (b, layers) in self.branches.iter().enumerate() {
            let input = match branch_outputs.last() {
                Some(&prev) => cx.tape.add(slices[b], prev)?,
                None => slices[b],
            };
            branch_inputs.push(input);
            let mut features = alloc::vec![input];
            for layer in layers {
                let joined = if features.len() == 1 {
                    features[0]
                } else {
                    cx.tape.concat_channels(&features)?
                };
                features.push(layer.forward(cx, joined)?);
            }
            branch_outputs.push(*features.last().expect("non-empty"));
        }
        let joined = cx.tape.concat_channels(&branch_outputs)?;
        let output = self.exit.forward(cx, joined)?;
        Ok(MfaTrace {
            slices,
            branch_inputs,
            branch_outputs,
            output,
        })
    }
}
