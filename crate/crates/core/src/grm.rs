//! Global relation modeling over the stage outputs.
//!
//! The two earlier pyramid levels go through a recalibration block and a
//! 3x3 convolution each; their sum is concatenated with the last level and
//! reduced back to `C` channels by a 1x1 convolution. The fused map `X` is
//! then reweighted by a channel-only and a spatial-only attention branch in
//! parallel: `F = A_ch(X) * X + A_sp(X) * X`.

use alloc::format;

use rand::Rng;

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{join, Builder, Conv, Ctx};
use crate::tape::Var;

/// Global-pool recalibration, in the additive form
/// `conv1x1(p + sigmoid(fc(relu(gap(p)))))`.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub channels: usize,
    /// Fully connected `C -> C`, stored as a 1x1 convolution on `[N, C, 1, 1]`.
    pub fc: Conv,
    pub post: Conv,
}

impl SeBlock {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, name: &str, channels: usize) -> Self {
        SeBlock {
            channels,
            fc: Conv::new(b, &join(name, "fc"), channels, channels, 1, 1, true),
            post: Conv::new(b, &join(name, "post"), channels, channels, 1, 1, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, p: Var) -> Result<Var> {
        check_channels(cx, p, self.channels, "se_block")?;
        let pooled = cx.tape.global_avg_pool(p)?;
        let pooled = cx.tape.relu(pooled);
        let s = self.fc.forward(cx, pooled)?;
        let s = cx.tape.sigmoid(s);
        let recal = cx.tape.add(p, s)?;
        self.post.forward(cx, recal)
    }
}

/// Channel-only attention: a `C/2`-wide value projection is pooled over
/// space with softmax weights from a one-channel query, lifted back to `C`
/// and squashed, giving `[N, C, 1, 1]`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub value: Conv,
    pub query: Conv,
    pub lift: Conv,
}

/// Spatial-only attention: a globally pooled `C/2` query, softmaxed over
/// channels, weights a `C/2` value projection at every position, giving
/// `[N, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub value: Conv,
    pub query: Conv,
}

/// An attention map together with the softmax weights that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub map: Var,
    pub weights: Var,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, name: &str, channels: usize) -> Self {
        let half = channels / 2;
        ChannelAttention {
            value: Conv::new(b, &join(name, "value"), channels, half, 1, 1, true),
            query: Conv::new(b, &join(name, "query"), channels, 1, 1, 1, true),
            lift: Conv::new(b, &join(name, "lift"), half, channels, 1, 1, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Attention> {
        let [n, c, h, w] = even_channels(cx, x, "channel_attention")?;
        let hw = h * w;
        let v = self.value.forward(cx, x)?;
        let v = cx.tape.reshape(v, &[n, c / 2, hw])?;
        let q = self.query.forward(cx, x)?;
        let q = cx.tape.reshape(q, &[n, 1, hw])?;
        let weights = cx.tape.softmax(q, 2)?;
        let q = cx.tape.reshape(weights, &[n, hw, 1])?;
        let pooled = cx.tape.matmul(v, q)?;
        let pooled = cx.tape.reshape(pooled, &[n, c / 2, 1, 1])?;
        let lifted = self.lift.forward(cx, pooled)?;
        Ok(Attention {
            map: cx.tape.sigmoid(lifted),
            weights,
        })
    }
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, name: &str, channels: usize) -> Self {
        let half = channels / 2;
        SpatialAttention {
            value: Conv::new(b, &join(name, "value"), channels, half, 1, 1, true),
            query: Conv::new(b, &join(name, "query"), channels, half, 1, 1, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Attention> {
        let [n, c, h, w] = even_channels(cx, x, "spatial_attention")?;
        let q = self.query.forward(cx, x)?;
        let q = cx.tape.global_avg_pool(q)?;
        let q = cx.tape.reshape(q, &[n, 1, c / 2])?;
        let weights = cx.tape.softmax(q, 2)?;
        let v = self.value.forward(cx, x)?;
        let v = cx.tape.reshape(v, &[n, c / 2, h * w])?;
        let m = cx.tape.matmul(weights, v)?;
        let m = cx.tape.reshape(m, &[n, 1, h, w])?;
        Ok(Attention {
            map: cx.tape.sigmoid(m),
            weights,
        })
    }
}

/// `a_ch * x + a_sp * x` with broadcasting.
pub fn compose_attention(cx: &mut Ctx<'_>, x: Var, a_ch: Var, a_sp: Var) -> Result<Var> {
    let by_channel = cx.tape.mul(a_ch, x)?;
    let by_position = cx.tape.mul(a_sp, x)?;
    cx.tape.add(by_channel, by_position)
}

#[derive(Debug, Clone)]
pub struct Grm {
    pub channels: usize,
    pub se1: SeBlock,
    pub se2: SeBlock,
    pub conv_a: Conv,
    pub conv_b: Conv,
    /// `2C -> C` reduction of the concatenated map.
    pub fuse: Conv,
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GrmTrace {
    pub fused: Var,
    pub channel: Attention,
    pub spatial: Attention,
    pub output: Var,
}

impl Grm {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, name: &str, channels: usize) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::config(format!(
                "relation module needs an even channel count, got {channels}"
            )));
        }
        Ok(Grm {
            channels,
            se1: SeBlock::new(b, &join(name, "se1"), channels),
            se2: SeBlock::new(b, &join(name, "se2"), channels),
            conv_a: Conv::new(b, &join(name, "conv_a"), channels, channels, 3, 1, true),
            conv_b: Conv::new(b, &join(name, "conv_b"), channels, channels, 3, 1, true),
            fuse: Conv::new(b, &join(name, "fuse"), 2 * channels, channels, 1, 1, true),
            channel: ChannelAttention::new(b, &join(name, "channel"), channels),
            spatial: SpatialAttention::new(b, &join(name, "spatial"), channels),
        })
    }

    /// `fuse(concat(conv_a(se1(p1)) + conv_b(se2(p2)), p3))`.
    pub fn fuse_stages(&self, cx: &mut Ctx<'_>, pyramid: &FeaturePyramid) -> Result<Var> {
        let s1 = cx.tape.shape(pyramid.p1).to_vec();
        for p in [pyramid.p2, pyramid.p3] {
            if cx.tape.shape(p) != s1.as_slice() {
                return Err(Error::shape(
                    "fuse_stages",
                    format!("pyramid levels differ: {s1:?} vs {:?}", cx.tape.shape(p)),
                ));
            }
        }
        let a = self.se1.forward(cx, pyramid.p1)?;
        let a = self.conv_a.forward(cx, a)?;
        let b = self.se2.forward(cx, pyramid.p2)?;
        let b = self.conv_b.forward(cx, b)?;
        let prior = cx.tape.add(a, b)?;
        let joined = cx.tape.concat_channels(&[prior, pyramid.p3])?;
        self.fuse.forward(cx, joined)
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, pyramid: &FeaturePyramid) -> Result<Var> {
        Ok(self.forward_traced(cx, pyramid)?.output)
    }

    pub fn forward_traced(&self, cx: &mut Ctx<'_>, pyramid: &FeaturePyramid) -> Result<GrmTrace> {
        let fused = self.fuse_stages(cx, pyramid)?;
        let channel = self.channel.forward(cx, fused)?;
        let spatial = self.spatial.forward(cx, fused)?;
        let output = compose_attention(cx, fused, channel.map, spatial.map)?;
        Ok(GrmTrace {
            fused,
            channel,
            spatial,
            output,
        })
    }
}

fn check_channels(cx: &Ctx<'_>, x: Var, channels: usize, op: &'static str) -> Result<()> {
    let s = cx.tape.shape(x);
    if s.len() != 4 || s[1] != channels {
        return Err(Error::shape(
            op,
            format!("expected [N, {channels}, H, W], got {s:?}"),
        ));
    }
    Ok(())
}

fn even_channels(cx: &Ctx<'_>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    let s = cx.tape.shape(x);
    if s.len() != 4 || s[1] % 2 != 0 || s[1] == 0 {
        return Err(Error::shape(
            op,
            format!("expected [N, C, H, W] with even C, got {s:?}"),
        ));
    }
    Ok([s[0], s[1], s[2], s[3]])
}
