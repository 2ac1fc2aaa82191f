//! Mini-batch training with Adam and a step learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::Annotation;
use crate::error::{Error, Result};
use crate::loss::{encode_targets, stack_targets, total_loss, LossWeights, DEFAULT_SIGMA};
use crate::model::PoseNet;
use crate::nn::apply_buffer_updates;
use crate::optim::Adam;
use crate::postprocess::FlipPairs;
use crate::synth::{augment, AugmentRanges};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs (0-based) from which the rate is multiplied by `decay` again.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Target Gaussian width in heatmap cells.
    pub sigma: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    pub augment: bool,
    pub augmentation: AugmentRanges,
    /// Emit a checkpoint every this many epochs; 0 for only the last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-3,
            milestones: alloc::vec![18, 24],
            decay: 0.1,
            seed: 0,
            loss_weights: LossWeights::default(),
            sigma: DEFAULT_SIGMA,
            clip_grad_norm: Some(5.0),
            augment: true,
            augmentation: AugmentRanges::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("decay must lie in (0, 1]"));
        }
        for w in self.milestones.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::config("milestones must be strictly increasing"));
            }
        }
        if self.milestones.iter().any(|&m| m >= self.epochs) {
            return Err(Error::config("milestones must be below the epoch count"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("sigma must be positive"));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_grad_norm must be positive"));
            }
        }
        self.augmentation.validate()
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        let mut lr = self.learning_rate;
        for _ in 0..drops {
            lr *= self.decay;
        }
        lr
    }
}

/// One training image with its people.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// `[3, H, W]`.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub heatmap_loss: f64,
    pub pull: f64,
    pub push: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

/// Progress notifications from [`train`].
pub enum TrainEvent<'a> {
    Epoch(&'a EpochRecord),
    /// The model after `epoch` completed, at the configured cadence and
    /// after the final epoch.
    Checkpoint { epoch: usize, model: &'a PoseNet },
}

/// Loss values of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub heatmap: f64,
    pub pull: f64,
    pub push: f64,
}

fn batch_tensors(model: &PoseNet, samples: &[TrainSample], sigma: f64) -> Result<(Tensor, Tensor, Vec<Vec<crate::tape::InstanceCells>>)> {
    let cfg = &model.config;
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let images = Tensor::stack(&images)?;
    let expect = [samples.len(), 3, cfg.input_height, cfg.input_width];
    if images.shape() != expect {
        return Err(Error::shape(
            "train_batch",
            format!("images {:?}, model expects {:?}", images.shape(), expect),
        ));
    }
    let grid = cfg.output_size();
    let enc: Vec<_> = samples
        .iter()
        .map(|s| encode_targets(&s.annotations, cfg.keypoints, grid, cfg.heatmap_stride, sigma))
        .collect();
    let (heat, inst) = stack_targets(&enc)?;
    Ok((images, heat, inst))
}

/// Forward pass and loss on one batch without touching the parameters.
pub fn batch_loss(model: &PoseNet, samples: &[TrainSample], cfg: &TrainConfig) -> Result<StepLoss> {
    let (images, heat, inst) = batch_tensors(model, samples, cfg.sigma)?;
    let mut tape = Tape::inference();
    let x = tape.constant(images);
    let out = model.forward(&mut tape, x, Mode::Train)?;
    let parts = total_loss(&mut tape, &out.heads, &heat, &inst, model.config.tag_dim, cfg.loss_weights)?;
    let v = |t: &Tape, var| t.value(var).data()[0];
    Ok(StepLoss {
        total: v(&tape, parts.total),
        heatmap: v(&tape, parts.heatmap),
        pull: v(&tape, parts.pull),
        push: v(&tape, parts.push),
    })
}

/// One forward/backward/Adam step. `position` is reported if the loss is
/// not finite, in which case the parameters are left untouched.
pub fn train_step(
    model: &mut PoseNet,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    lr: f64,
    position: (usize, usize),
) -> Result<StepLoss> {
    let (images, heat, inst) = batch_tensors(model, samples, cfg.sigma)?;
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let out = model.forward(&mut tape, x, Mode::Train)?;
    let parts = total_loss(&mut tape, &out.heads, &heat, &inst, model.config.tag_dim, cfg.loss_weights)?;
    let v = |t: &Tape, var| t.value(var).data()[0];
    let loss = StepLoss {
        total: v(&tape, parts.total),
        heatmap: v(&tape, parts.heatmap),
        pull: v(&tape, parts.pull),
        push: v(&tape, parts.push),
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: position.0,
            batch: position.1,
            heatmap: loss.heatmap,
            pull: loss.pull,
            push: loss.push,
        });
    }
    apply_buffer_updates(&mut model.store, &mut tape);
    model.store.zero_grad();
    tape.backward(parts.total, &mut model.store)?;
    if let Some(max) = cfg.clip_grad_norm {
        model.store.clip_grad_norm(max);
    }
    Adam::new(lr).step(&mut model.store);
    Ok(loss)
}

/// Visiting order of the samples in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

fn augmented(sample: &TrainSample, cfg: &TrainConfig, pairs: &FlipPairs, epoch: usize, index: usize) -> Result<TrainSample> {
    if !cfg.augment {
        return Ok(sample.clone());
    }
    // a key distinct from the shuffling key; one stream per (epoch, sample)
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    let width = sample.image.shape().get(2).copied().unwrap_or(0);
    let params = cfg.augmentation.sample(width, &mut rng);
    let (image, annotations) = augment(&sample.image, &sample.annotations, &params, pairs)?;
    Ok(TrainSample { image, annotations })
}

/// Trains for epochs `start_epoch .. cfg.epochs`. Optimiser state lives in
/// the model's parameter store, so a resumed run continues where a saved
/// one stopped.
pub fn train(
    model: &mut PoseNet,
    data: &[TrainSample],
    cfg: &TrainConfig,
    pairs: &FlipPairs,
    start_epoch: usize,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut log = TrainingLog::default();
    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| augmented(&data[i], cfg, pairs, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let l = train_step(model, &batch, cfg, lr, (epoch, b))?;
            sums[0] += l.total;
            sums[1] += l.heatmap;
            sums[2] += l.pull;
            sums[3] += l.push;
            batches += 1;
        }
        let n = batches as f64;
        let record = EpochRecord {
            epoch,
            mean_loss: sums[0] / n,
            heatmap_loss: sums[1] / n,
            pull: sums[2] / n,
            push: sums[3] / n,
            lr,
        };
        log.epochs.push(record);
        on_event(TrainEvent::Epoch(&record))?;
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
        if last || due {
            on_event(TrainEvent::Checkpoint { epoch, model })?;
        }
    }
    Ok(log)
}

/// Loss before and after repeated steps on a single fixed batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub initial: f64,
    pub final_loss: f64,
    /// Loss at every step, before that step's update.
    pub trace: Vec<f64>,
}

/// Takes `steps` optimisation steps on `batch` at the base learning rate
/// (no augmentation) and reports the loss before and after.
pub fn overfit_probe(model: &mut PoseNet, batch: &[TrainSample], steps: usize, cfg: &TrainConfig) -> Result<ProbeResult> {
    if batch.is_empty() {
        return Err(Error::config("probe batch is empty"));
    }
    let initial = batch_loss(model, batch, cfg)?.total;
    let mut trace = Vec::with_capacity(steps);
    for s in 0..steps {
        trace.push(train_step(model, batch, cfg, cfg.learning_rate, (0, s))?.total);
    }
    let final_loss = if steps == 0 { initial } else { batch_loss(model, batch, cfg)?.total };
    Ok(ProbeResult {
        initial,
        final_loss,
        trace,
    })
}
