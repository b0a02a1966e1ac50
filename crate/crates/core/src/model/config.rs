use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::EdgeOperator;

/// How the edge response is combined with the conv layers in a boundary block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CablStructure {
    /// `conv + edge`
    #[serde(rename = "I")]
    Additive,
    /// `Conv(edge ⊙ F_prev)`
    #[serde(rename = "II")]
    GatedInput,
    /// `edge ⊙ conv + conv`
    #[default]
    #[serde(rename = "III")]
    MultiplyResidual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub patch_size: usize,
    /// Spatial stride of the stem convolution.
    pub stem_stride: usize,
    pub num_blocks: usize,
    pub channels: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Blocks `1..=cabl_depth` carry the edge path; 0 disables it.
    pub cabl_depth: usize,
    pub cabl_structure: CablStructure,
    pub edge_operator: EdgeOperator,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            patch_size: 8,
            stem_stride: 4,
            num_blocks: 6,
            channels: 16,
            token_dim: 64,
            heads: 4,
            mlp_ratio: 2,
            cabl_depth: 6,
            cabl_structure: CablStructure::MultiplyResidual,
            edge_operator: EdgeOperator::Sobel,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("input_size", self.input_size),
            ("patch_size", self.patch_size),
            ("stem_stride", self.stem_stride),
            ("num_blocks", self.num_blocks),
            ("channels", self.channels),
            ("token_dim", self.token_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.token_dim.is_multiple_of(self.heads) {
            return bad(format!("token_dim {} not divisible by heads {}", self.token_dim, self.heads));
        }
        if self.cabl_depth > self.num_blocks {
            return bad(format!("cabl_depth {} exceeds num_blocks {}", self.cabl_depth, self.num_blocks));
        }
        if !self.patch_size.is_multiple_of(self.stem_stride) {
            return bad(format!(
                "patch_size {} must be a multiple of stem_stride {}",
                self.patch_size, self.stem_stride
            ));
        }
        self.check_input(self.input_size)?;
        Ok(())
    }

    /// Conv-grid cells per patch side.
    pub fn pool_factor(&self) -> usize {
        self.patch_size / self.stem_stride
    }

    /// Errors unless `size` tiles into whole patches with a ≥3×3 conv grid.
    pub fn check_input(&self, size: usize) -> Result<()> {
        if !size.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidArgument(format!(
                "input size {size} not divisible by patch size {}",
                self.patch_size
            )));
        }
        if size / self.stem_stride < 3 {
            return Err(Error::InvalidArgument(format!("input size {size} too small for the edge operator")));
        }
        Ok(())
    }

    pub fn is_cabl(&self, block: usize) -> bool {
        block < self.cabl_depth
    }
}
