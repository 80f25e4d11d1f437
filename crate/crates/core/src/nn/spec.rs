use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One MBConv block. Blocks sharing a `stage` index form a stage, which is
/// the unit depth scaling repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub stage: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion_ratio: f64,
    pub se_ratio: f64,
    pub survival_prob: f64,
    pub stride: usize,
}

impl BlockConfig {
    pub fn expanded_channels(&self) -> usize {
        (self.in_channels as f64 * self.expansion_ratio).round() as usize
    }

    pub fn se_hidden(&self) -> usize {
        ((self.in_channels as f64 * self.se_ratio).round() as usize).max(1)
    }

    /// Ratio 1 blocks run the depthwise conv directly on the input.
    pub fn has_expansion(&self) -> bool {
        self.expansion_ratio != 1.0
    }

    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail("block channel counts must be >= 1".into());
        }
        if !(self.expansion_ratio >= 1.0) || self.expanded_channels() < 1 {
            return fail(format!("expansion_ratio {} must be >= 1", self.expansion_ratio));
        }
        if !(self.se_ratio > 0.0 && self.se_ratio <= 1.0) {
            return fail(format!("se_ratio {} must lie in (0, 1]", self.se_ratio));
        }
        if !(0.0..=1.0).contains(&self.survival_prob) {
            return fail(format!("survival_prob {} must lie in [0, 1]", self.survival_prob));
        }
        if self.stride != 1 && self.stride != 2 {
            return fail(format!("stride {} must be 1 or 2", self.stride));
        }
        Ok(())
    }

    /// Weights plus biases of expand, depthwise, SE and project layers.
    pub fn parameter_count(&self) -> usize {
        let (cin, cout) = (self.in_channels, self.out_channels);
        let e = self.expanded_channels();
        let h = self.se_hidden();
        let expand = if self.has_expansion() { cin * e + e } else { 0 };
        let depthwise = e * 9 + e;
        let se = e * h + h + h * e + e;
        let project = e * cout + cout;
        expand + depthwise + se + project
    }
}

/// Compact stage description expanded into [`BlockConfig`]s; the first
/// block of a stage carries the stride and channel change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub repeats: usize,
    pub out_channels: usize,
    pub expansion_ratio: f64,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub stem_channels: usize,
    pub blocks: Vec<BlockConfig>,
    pub dropout_prob: f64,
    pub num_classes: usize,
    pub input_resolution: usize,
}

pub const DEFAULT_SURVIVAL_PROB: f64 = 0.8;
pub const DEFAULT_SE_RATIO: f64 = 0.25;

impl ModelSpec {
    pub fn from_stages(
        stem_channels: usize,
        stages: &[StageConfig],
        num_classes: usize,
        input_resolution: usize,
    ) -> Self {
        let mut blocks = Vec::new();
        let mut channels = stem_channels;
        for (stage, s) in stages.iter().enumerate() {
            for r in 0..s.repeats {
                blocks.push(BlockConfig {
                    stage,
                    in_channels: channels,
                    out_channels: s.out_channels,
                    expansion_ratio: s.expansion_ratio,
                    se_ratio: DEFAULT_SE_RATIO,
                    survival_prob: DEFAULT_SURVIVAL_PROB,
                    stride: if r == 0 { s.stride } else { 1 },
                });
                channels = s.out_channels;
            }
        }
        Self {
            stem_channels,
            blocks,
            dropout_prob: 0.0,
            num_classes,
            input_resolution,
        }
    }

    /// The small two-stage network used for the synthetic 32x32 experiments.
    pub fn desk_scale() -> Self {
        Self::from_stages(
            8,
            &[
                StageConfig {
                    repeats: 1,
                    out_channels: 8,
                    expansion_ratio: 2.0,
                    stride: 1,
                },
                StageConfig {
                    repeats: 1,
                    out_channels: 16,
                    expansion_ratio: 4.0,
                    stride: 2,
                },
            ],
            4,
            32,
        )
    }

    pub fn with_noise(mut self, dropout_prob: f64, survival_prob: f64) -> Self {
        self.dropout_prob = dropout_prob;
        for b in &mut self.blocks {
            b.survival_prob = survival_prob;
        }
        self
    }

    pub fn final_channels(&self) -> usize {
        self.blocks
            .last()
            .map_or(self.stem_channels, |b| b.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 {
            return Err(Error::InvalidSpec("stem_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "num_classes {} must be >= 2",
                self.num_classes
            )));
        }
        if self.input_resolution < 1 {
            return Err(Error::InvalidSpec("input_resolution must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidSpec(format!(
                "dropout_prob {} must lie in [0, 1)",
                self.dropout_prob
            )));
        }
        let mut channels = self.stem_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.in_channels != channels {
                return Err(Error::InvalidSpec(format!(
                    "block {i} expects {} input channels but receives {channels}",
                    b.in_channels
                )));
            }
            channels = b.out_channels;
        }
        Ok(())
    }

    /// Closed-form parameter count: stem conv, blocks, dense head.
    pub fn parameter_count(&self) -> usize {
        let stem = 3 * self.stem_channels * 9 + self.stem_channels;
        let blocks: usize = self.blocks.iter().map(BlockConfig::parameter_count).sum();
        let head = self.final_channels() * self.num_classes + self.num_classes;
        stem + blocks + head
    }

    /// Number of blocks in each stage, in stage order.
    pub fn stage_counts(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for b in &self.blocks {
            match out.last_mut() {
                Some((stage, count)) if *stage == b.stage => *count += 1,
                _ => out.push((b.stage, 1)),
            }
        }
        out
    }
}
