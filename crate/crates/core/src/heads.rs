//! 1x1 prediction heads.

use alloc::format;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Builder, Conv, Ctx};
use crate::tape::Var;

/// Initial heatmap logit, so that untrained maps start near background
/// level instead of 0.5.
pub const HEATMAP_PRIOR_LOGIT: f64 = -2.0;
/// Scale applied to the initial head weights.
pub const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Heads {
    pub channels: usize,
    pub keypoints: usize,
    pub tag_dim: usize,
    pub heatmap: Conv,
    pub tag: Conv,
}

/// Heatmaps `[N, K, H, W]` in (0, 1) and tagmaps `[N, K * tag_dim, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub heatmaps: Var,
    pub tags: Var,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(
        b: &mut Builder<'_, R>,
        name: &str,
        channels: usize,
        keypoints: usize,
        tag_dim: usize,
    ) -> Self {
        let heatmap = Conv::new(b, &join(name, "heatmap"), channels, keypoints, 1, 1, true);
        let tag = Conv::new(b, &join(name, "tag"), channels, keypoints * tag_dim, 1, 1, true);
        for conv in [&heatmap, &tag] {
            for w in b.store.get_mut(conv.weight).tensor.data_mut() {
                *w *= HEAD_INIT_SCALE;
            }
        }
        if let Some(bias) = heatmap.bias {
            b.store.get_mut(bias).tensor.data_mut().fill(HEATMAP_PRIOR_LOGIT);
        }
        Heads {
            channels,
            keypoints,
            tag_dim,
            heatmap,
            tag,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, features: Var) -> Result<HeadOutput> {
        let s = cx.tape.shape(features);
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape(
                "head_forward",
                format!("heads expect {} channels, got {s:?}", self.channels),
            ));
        }
        let logits = self.heatmap.forward(cx, features)?;
        let heatmaps = cx.tape.sigmoid(logits);
        let tags = self.tag.forward(cx, features)?;
        Ok(HeadOutput { heatmaps, tags })
    }
}
