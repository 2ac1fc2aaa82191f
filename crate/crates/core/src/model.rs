//! The full network: backbone, relation module and heads over one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, FeaturePyramid};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::grm::Grm;
use crate::heads::{HeadOutput, Heads};
use crate::nn::{Builder, Ctx};
use crate::param::ParamStore;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PoseNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub grm: Option<Grm>,
    pub heads: Heads,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    /// Input to the heads.
    pub features: Var,
    pub heads: HeadOutput,
}

/// Detached network predictions for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[N, K, H, W]`.
    pub heatmaps: Tensor,
    /// `[N, K * tag_dim, H, W]`.
    pub tags: Tensor,
}

impl PoseNet {
    /// Builds a network with weights drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut b, &config)?;
        let grm = if config.use_grm {
            Some(Grm::new(&mut b, "grm", config.base_width)?)
        } else {
            None
        };
        let heads = Heads::new(&mut b, "head", config.base_width, config.keypoints, config.tag_dim);
        Ok(PoseNet {
            config,
            store,
            backbone,
            grm,
            heads,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Records a forward pass of `images` (`[N, 3, H, W]`) on `tape`.
    pub fn forward(&self, tape: &mut Tape, images: Var, mode: Mode) -> Result<ForwardOutput> {
        self.forward_with(&self.store, tape, images, mode)
    }

    /// Like [`PoseNet::forward`] but reading parameters from `store`, which
    /// must have the layout of `self.store`.
    pub fn forward_with(&self, store: &ParamStore, tape: &mut Tape, images: Var, mode: Mode) -> Result<ForwardOutput> {
        let mut cx = Ctx::new(tape, store, mode);
        let pyramid = self.backbone.forward(&mut cx, images)?;
        let features = match &self.grm {
            Some(g) => g.forward(&mut cx, &pyramid)?,
            None => pyramid.p3,
        };
        let heads = self.heads.forward(&mut cx, features)?;
        Ok(ForwardOutput {
            pyramid,
            features,
            heads,
        })
    }

    /// Eval-mode inference. Accepts `[N, 3, H, W]` or a single `[3, H, W]`
    /// image (returned with a batch axis of one).
    pub fn predict(&self, images: &Tensor) -> Result<Prediction> {
        let batch = match images.rank() {
            4 => images.detached(),
            3 => {
                let s = images.shape();
                images.reshape(&[1, s[0], s[1], s[2]])?
            }
            _ => {
                return Err(Error::shape(
                    "predict",
                    alloc::format!("expected an image or a batch, got {:?}", images.shape()),
                ))
            }
        };
        let mut tape = Tape::inference();
        let x = tape.constant(batch);
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(Prediction {
            heatmaps: tape.value(out.heads.heatmaps).clone(),
            tags: tape.value(out.heads.tags).clone(),
        })
    }
}
