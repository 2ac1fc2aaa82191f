//! Multi-stage, multi-branch high-resolution backbone.
//!
//! Stage `n` runs `n` parallel branches; branch `b` has `C * 2^b` channels at
//! `1 / 2^b` of the stem resolution. Each stage appends one branch (a
//! stride-2 transition from the previous lowest-resolution branch), runs
//! its residual blocks, and ends with a fusion unit that sums resampled
//! features across all branches. The top-branch output after stages 2, 3
//! and 4 forms the feature pyramid; the last one is refined by the final
//! block (the dense step block by default).

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mfa::Mfa;
use crate::nn::{join, BasicBlock, Builder, ConvBn, Ctx};
use crate::tape::Var;

/// Top-branch outputs of stages 2, 3 and 4, all `[N, C, H/4, W/4]`.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub p1: Var,
    pub p2: Var,
    pub p3: Var,
}

/// One resampling edge of a fusion unit.
#[derive(Debug, Clone)]
pub enum FusionPath {
    /// Lower-resolution source: 1x1 conv + norm for channel matching, then
    /// nearest upsampling by `factor`.
    Up { conv: ConvBn, factor: usize },
    /// Higher-resolution source: a chain of stride-2 3x3 conv + norm steps,
    /// ReLU between steps.
    Down { steps: Vec<ConvBn> },
}

impl FusionPath {
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            // A pointwise conv and a norm commute with nearest upsampling
            // (the norm sees identical statistics), so they run at the
            // source resolution.
            FusionPath::Up { conv, factor } => {
                let y = conv.forward(cx, x)?;
                cx.tape.upsample_nearest(y, *factor)
            }
            FusionPath::Down { steps } => {
                let mut y = x;
                for s in steps {
                    y = s.forward(cx, y)?;
                }
                Ok(y)
            }
        }
    }
}

/// Exchange unit: output `j` is `relu(sum_i path_{i->j}(x_i))`, with the
/// identity for `i == j`.
#[derive(Debug, Clone)]
pub struct FusionUnit {
    pub branches: usize,
    /// `paths[j][i]`, `None` on the diagonal.
    pub paths: Vec<Vec<Option<FusionPath>>>,
}

impl FusionUnit {
    pub fn new<R: Rng + ?Sized>(
        b: &mut Builder<'_, R>,
        name: &str,
        config: &ModelConfig,
        branches: usize,
        outputs: usize,
    ) -> Self {
        let mut paths = Vec::with_capacity(outputs);
        for j in 0..outputs {
            let mut row = Vec::with_capacity(branches);
            for i in 0..branches {
                let edge = join(name, &format!("{i}_to_{j}"));
                row.push(match i.cmp(&j) {
                    core::cmp::Ordering::Equal => None,
                    core::cmp::Ordering::Greater => Some(FusionPath::Up {
                        conv: ConvBn::new(
                            b,
                            &edge,
                            config.branch_channels(i),
                            config.branch_channels(j),
                            1,
                            1,
                            false,
                        ),
                        factor: 1 << (i - j),
                    }),
                    core::cmp::Ordering::Less => {
                        let steps = (i..j)
                            .map(|k| {
                                let last = k + 1 == j;
                                let out = if last {
                                    config.branch_channels(j)
                                } else {
                                    config.branch_channels(i)
                                };
                                ConvBn::new(
                                    b,
                                    &join(&edge, &format!("step{}", k - i)),
                                    config.branch_channels(i),
                                    out,
                                    3,
                                    2,
                                    !last,
                                )
                            })
                            .collect();
                        Some(FusionPath::Down { steps })
                    }
                });
            }
            paths.push(row);
        }
        FusionUnit { branches, paths }
    }

    pub fn outputs(&self) -> usize {
        self.paths.len()
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, xs: &[Var]) -> Result<Vec<Var>> {
        fuse_branches(cx, self, xs)
    }
}

/// Runs a fusion unit over per-branch features. A single branch passes
/// through unchanged.
pub fn fuse_branches(cx: &mut Ctx<'_>, unit: &FusionUnit, xs: &[Var]) -> Result<Vec<Var>> {
    if xs.len() != unit.branches {
        return Err(Error::shape(
            "fuse_branches",
            format!("unit joins {} branches, got {}", unit.branches, xs.len()),
        ));
    }
    if unit.branches == 1 {
        return Ok(xs.to_vec());
    }
    let mut out = Vec::with_capacity(unit.outputs());
    for (j, row) in unit.paths.iter().enumerate() {
        let mut acc = xs[j];
        for (i, path) in row.iter().enumerate() {
            if let Some(p) = path {
                let y = p.forward(cx, xs[i])?;
                acc = cx.tape.add(acc, y)?;
            }
        }
        out.push(cx.tape.relu(acc));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Stage {
    /// Creates this stage's new branch from the previous lowest-resolution
    /// branch (absent for the first stage).
    pub transition: Option<ConvBn>,
    pub blocks: Vec<Vec<BasicBlock>>,
    pub fusion: FusionUnit,
}

#[derive(Debug, Clone)]
pub enum FinalBlock {
    Mfa(Mfa),
    Basic(BasicBlock),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: [ConvBn; 2],
    pub stages: Vec<Stage>,
    pub final_block: FinalBlock,
    pub config: ModelConfig,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_width;
        let stem = [
            ConvBn::new(b, "stem.0", 3, c, 3, 2, true),
            ConvBn::new(b, "stem.1", c, c, 3, 2, true),
        ];
        let mut stages = Vec::with_capacity(config.num_stages);
        for (s, counts) in config.block_counts.iter().enumerate() {
            let name = format!("stage{}", s + 1);
            let branches = s + 1;
            let transition = (s > 0).then(|| {
                ConvBn::new(
                    b,
                    &join(&name, "transition"),
                    config.branch_channels(s - 1),
                    config.branch_channels(s),
                    3,
                    2,
                    true,
                )
            });
            let blocks = counts
                .iter()
                .enumerate()
                .map(|(br, &n)| {
                    (0..n)
                        .map(|k| {
                            BasicBlock::new(
                                b,
                                &join(&name, &format!("branch{br}.block{k}")),
                                config.branch_channels(br),
                            )
                        })
                        .collect()
                })
                .collect();
            // The last stage only feeds the top branch onward.
            let outputs = if s + 1 == config.num_stages { 1 } else { branches };
            let fusion = FusionUnit::new(b, &join(&name, "fuse"), config, branches, outputs);
            stages.push(Stage {
                transition,
                blocks,
                fusion,
            });
        }
        let final_block = if config.use_mfa {
            FinalBlock::Mfa(Mfa::new(b, "mfa", c)?)
        } else {
            FinalBlock::Basic(BasicBlock::new(b, "final_block", c))
        };
        Ok(Backbone {
            stem,
            stages,
            final_block,
            config: config.clone(),
        })
    }

    /// Image batch `[N, 3, H, W]` to the feature pyramid.
    pub fn forward(&self, cx: &mut Ctx<'_>, image: Var) -> Result<FeaturePyramid> {
        let s = cx.tape.shape(image).to_vec();
        let d = self.config.size_divisor();
        if s.len() != 4 || s[1] != 3 || s[2] % d != 0 || s[3] % d != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape(
                "backbone_forward",
                format!("expected [N, 3, H, W] with H, W multiples of {d}, got {s:?}"),
            ));
        }
        let mut x = image;
        for conv in &self.stem {
            x = conv.forward(cx, x)?;
        }
        let mut branches = alloc::vec![x];
        let mut tops = Vec::with_capacity(3);
        for (si, stage) in self.stages.iter().enumerate() {
            if let Some(t) = &stage.transition {
                let last = *branches.last().expect("at least one branch");
                branches.push(t.forward(cx, last)?);
            }
            for (br, blocks) in stage.blocks.iter().enumerate() {
                for block in blocks {
                    branches[br] = block.forward(cx, branches[br])?;
                }
            }
            branches = stage.fusion.forward(cx, &branches)?;
            if si > 0 {
                tops.push(branches[0]);
            }
        }
        // Refine the fused top-branch output of the last stage.
        let fused = tops[2];
        let p3 = match &self.final_block {
            FinalBlock::Mfa(m) => m.forward(cx, fused)?,
            FinalBlock::Basic(blk) => blk.forward(cx, fused)?,
        };
        Ok(FeaturePyramid {
            p1: tops[0],
            p2: tops[1],
            p3,
        })
    }
}
