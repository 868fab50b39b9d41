//! Residual encoder-decoder for multi-channel volumes.
//!
//! Encoder level `l` holds `init_filters * 2^l` channels; every level past the
//! first starts with a stride-2 convolution. Each decoder level halves the
//! channels with a pointwise convolution, upsamples 2x and adds the matching
//! encoder output before a single residual block.

mod model;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{forward, forward_traced, ForwardTrace};
pub(crate) use params::zero_model;
pub use params::{build_model, count_parameters, ParamKind, Parameter, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NormConfig {
    /// Group normalization with `size` channels per group.
    Group { size: usize },
    /// Group normalization with a fixed number of groups per layer.
    GroupCount { groups: usize },
    Instance,
    Batch { momentum: f64 },
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig::Group { size: 8 }
    }
}

impl NormConfig {
    /// Number of groups for a layer of `channels`, or `None` for batch norm.
    pub fn groups(&self, channels: usize) -> Result<Option<usize>> {
        let groups = match *self {
            NormConfig::Group { size } => {
                if size == 0 || channels % size != 0 {
                    return Err(Error::Config(format!("{channels} channels are not divisible into groups of {size}")));
                }
                channels / size
            }
            NormConfig::GroupCount { groups } => {
                if groups == 0 || channels % groups != 0 {
                    return Err(Error::Config(format!("{channels} channels are not divisible into {groups} groups")));
                }
                groups
            }
            NormConfig::Instance => channels,
            NormConfig::Batch { .. } => return Ok(None),
        };
        Ok(Some(groups))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub init_filters: usize,
    /// Residual blocks per encoder level; the level count is its length.
    pub blocks_per_level: Vec<usize>,
    pub norm: NormConfig,
    pub norm_eps: f64,
    pub dropout_rate: f64,
    pub input_crop: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 4,
            out_channels: 3,
            init_filters: 32,
            blocks_per_level: vec![1, 2, 2, 4],
            norm: NormConfig::default(),
            norm_eps: 1e-5,
            dropout_rate: 0.2,
            input_crop: [160, 192, 128],
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.blocks_per_level.len()
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.init_filters << level
    }

    /// Required divisor of every input spatial extent.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.levels().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.init_filters == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.blocks_per_level.is_empty() || self.blocks_per_level.contains(&0) {
            return Err(Error::Config(format!("blocks_per_level must be non-empty and positive, got {:?}", self.blocks_per_level)));
        }
        if self.levels() > 8 {
            return Err(Error::Config(format!("at most 8 levels supported, got {}", self.levels())));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config(format!("norm_eps must be > 0, got {}", self.norm_eps)));
        }
        if let NormConfig::Batch { momentum } = self.norm {
            if !(0.0..=1.0).contains(&momentum) {
                return Err(Error::Config(format!("batch norm momentum {momentum} outside [0, 1]")));
            }
        }
        for level in 0..self.levels() {
            self.norm.groups(self.channels_at(level))?;
        }
        self.check_extents(self.input_crop)
    }

    pub fn check_extents(&self, extents: [usize; 3]) -> Result<()> {
        let k = self.spatial_divisor();
        if extents.iter().any(|&e| e == 0 || e % k != 0) {
            return Err(Error::Config(format!("spatial extents {extents:?} must be positive multiples of {k}")));
        }
        Ok(())
    }
}

/// One row of a [`shape_plan`]: layer name and `[C, D, H, W]` output size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRow {
    pub layer: String,
    pub shape: [usize; 4],
}

pub(crate) fn encoder_block_name(level: usize) -> String {
    format!("EncoderBlock{level}")
}

/// Per-layer output sizes for an input of `[C, D, H, W]`, without allocating
/// any tensors.
pub fn shape_plan(config: &ModelConfig, input: [usize; 4]) -> Result<Vec<PlanRow>> {
    config.validate()?;
    if input[0] != config.in_channels {
        return Err(Error::Config(format!("input has {} channels, model expects {}", input[0], config.in_channels)));
    }
    let extents = [input[1], input[2], input[3]];
    config.check_extents(extents)?;
    let at = |level: usize| {
        let f = 1 << level;
        [config.channels_at(level), extents[0] / f, extents[1] / f, extents[2] / f]
    };
    let row = |layer: String, shape: [usize; 4]| PlanRow { layer, shape };
    let mut rows = vec![row("Input".into(), input), row("InitConv".into(), at(0))];
    for level in 0..config.levels() {
        if level > 0 {
            rows.push(row(format!("EncoderDown{level}"), at(level)));
        }
        rows.push(row(encoder_block_name(level), at(level)));
    }
    for level in (0..config.levels() - 1).rev() {
        rows.push(row(format!("DecoderUp{level}"), at(level)));
        rows.push(row(format!("DecoderBlock{level}"), at(level)));
    }
    rows.push(row("DecoderEnd".into(), [config.out_channels, extents[0], extents[1], extents[2]]));
    Ok(rows)
}
