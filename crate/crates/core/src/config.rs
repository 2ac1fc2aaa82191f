//! Network architecture description.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which per-branch block layouts are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockSchema {
    /// Only the newest (lowest-resolution) branch of each stage may carry
    /// blocks; all earlier branches must be zero.
    #[default]
    Shrunken,
    /// Any branch may carry blocks (the original multi-branch layout).
    Full,
}

/// Full architecture description.
///
/// `block_counts[n]` lists the residual blocks of each branch in stage
/// `n + 1`, so entry `n` has `n + 1` counts. The stem counts as stage 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_stages: usize,
    pub block_counts: Vec<Vec<usize>>,
    /// Channels of the top (highest-resolution) branch; branch `b` has
    /// `base_width * 2^b`.
    pub base_width: usize,
    pub keypoints: usize,
    pub input_width: usize,
    pub input_height: usize,
    pub tag_dim: usize,
    pub heatmap_stride: usize,
    pub schema: BlockSchema,
    /// Fuse the stage outputs with global relation modeling before the
    /// heads; when off the heads read the last stage output directly.
    pub use_grm: bool,
    /// Use the dense step block as the final top-branch block; when off a
    /// plain residual block takes its place.
    pub use_mfa: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_stages: 4,
            block_counts: vec![vec![1], vec![0, 1], vec![0, 0, 1], vec![0, 0, 0, 1]],
            base_width: 16,
            keypoints: 5,
            input_width: 64,
            input_height: 64,
            tag_dim: 1,
            heatmap_stride: 4,
            schema: BlockSchema::Shrunken,
            use_grm: true,
            use_mfa: true,
        }
    }
}

impl ModelConfig {
    /// `{[4], [0, 4], [0, 0, 4], [0, 0, 0, 4]}`.
    pub fn shrunken_blocks() -> Vec<Vec<usize>> {
        vec![vec![4], vec![0, 4], vec![0, 0, 4], vec![0, 0, 0, 4]]
    }

    /// `{[4], [4, 4], [4, 4, 4], [4, 4, 4, 4]}`.
    pub fn original_blocks() -> Vec<Vec<usize>> {
        vec![vec![4], vec![4, 4], vec![4, 4, 4], vec![4, 4, 4, 4]]
    }

    pub fn num_branches(&self) -> usize {
        self.num_stages
    }

    pub fn branch_channels(&self, branch: usize) -> usize {
        self.base_width << branch
    }

    /// Spatial size `(height, width)` of the heatmaps for an input of the
    /// configured size.
    pub fn output_size(&self) -> (usize, usize) {
        (
            self.input_height / self.heatmap_stride,
            self.input_width / self.heatmap_stride,
        )
    }

    /// Inputs must be divisible by this on both axes.
    pub fn size_divisor(&self) -> usize {
        self.heatmap_stride << (self.num_branches() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages != 4 {
            return Err(Error::config(format!(
                "num_stages must be 4, got {}",
                self.num_stages
            )));
        }
        if self.block_counts.len() != self.num_stages {
            return Err(Error::config(format!(
                "block_counts needs {} stages, got {}",
                self.num_stages,
                self.block_counts.len()
            )));
        }
        for (n, stage) in self.block_counts.iter().enumerate() {
            if stage.len() != n + 1 {
                return Err(Error::config(format!(
                    "stage {} must list {} branch block counts, got {:?}",
                    n + 1,
                    n + 1,
                    stage
                )));
            }
            let last = stage[n];
            if last == 0 {
                return Err(Error::config(format!(
                    "stage {}: the last branch must carry at least one block",
                    n + 1
                )));
            }
            if self.schema == BlockSchema::Shrunken && stage[..n].iter().any(|&c| c != 0) {
                return Err(Error::config(format!(
                    "stage {}: shrunken schema allows blocks only in the last branch, got {:?}",
                    n + 1,
                    stage
                )));
            }
        }
        if self.base_width < 4 || self.base_width % 4 != 0 {
            return Err(Error::config(format!(
                "base_width must be a positive multiple of 4, got {}",
                self.base_width
            )));
        }
        if self.keypoints == 0 || self.tag_dim == 0 {
            return Err(Error::config("keypoints and tag_dim must be positive"));
        }
        if self.heatmap_stride != 4 {
            return Err(Error::config(format!(
                "heatmap_stride is fixed at 4 by the two stride-2 stem convolutions, got {}",
                self.heatmap_stride
            )));
        }
        let d = self.size_divisor();
        if self.input_width == 0
            || self.input_height == 0
            || self.input_width % d != 0
            || self.input_height % d != 0
        {
            return Err(Error::config(format!(
                "input size {}x{} must be a positive multiple of {d}",
                self.input_width, self.input_height
            )));
        }
        Ok(())
    }
}
