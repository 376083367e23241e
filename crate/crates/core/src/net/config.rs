use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wtconv::WtMode;

/// Topology of the fully dense classifier.
///
/// `blocks[m]` is the number of dense layers in stage `m`; each of them adds
/// `base_growth * 2^m` feature maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub blocks: Vec<usize>,
    pub base_growth: usize,
    /// Channels produced by the 3x3x3 stem; `0` means `2 * base_growth`.
    pub stem_channels: usize,
    pub wt_levels: usize,
    pub wt_kernel: usize,
    pub wt_mode: WtMode,
    pub wt_residual: bool,
    /// Groups of the 1x1x1 bottleneck, reduced to the largest divisor of both
    /// channel counts when they do not divide evenly.
    pub bottleneck_groups: usize,
    /// Bottleneck width as a multiple of the growth rate.
    pub bottleneck_width: usize,
    /// Channel factor of the 1x1x1 transition between stages; `1.0` keeps
    /// every feature map and skips the transition conv entirely.
    pub compression: f64,
    pub classes: usize,
    /// Patch extent `[bands, height, width]`.
    pub input: [usize; 3],
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            blocks: vec![4, 6, 8],
            base_growth: 8,
            stem_channels: 0,
            wt_levels: 2,
            wt_kernel: 3,
            wt_mode: WtMode::Spatial2d,
            wt_residual: true,
            bottleneck_groups: 4,
            bottleneck_width: 4,
            compression: 1.0,
            classes: 16,
            input: [200, 11, 11],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl NetworkConfig {
    /// Small network used for the synthetic benchmark.
    pub fn desk(classes: usize, input: [usize; 3]) -> Self {
        Self {
            blocks: vec![2, 2],
            base_growth: 4,
            stem_channels: 8,
            wt_levels: 2,
            bottleneck_width: 2,
            classes,
            input,
            ..Self::default()
        }
    }

    pub fn growth(&self, stage: usize) -> usize {
        self.base_growth << stage
    }

    pub fn growth_rates(&self) -> Vec<usize> {
        (0..self.blocks.len()).map(|m| self.growth(m)).collect()
    }

    pub fn stem_out(&self) -> usize {
        if self.stem_channels == 0 {
            2 * self.base_growth
        } else {
            self.stem_channels
        }
    }

    /// Spatial extent `[D, H, W]` of stage `s`; each transition halves every
    /// axis, rounding up.
    pub fn stage_extent(&self, stage: usize) -> [usize; 3] {
        let mut e = self.input;
        for _ in 0..stage {
            e = e.map(|n| n.div_ceil(2));
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return bad("every stage needs at least one dense layer");
        }
        if self.base_growth == 0 || self.bottleneck_width == 0 || self.bottleneck_groups == 0 {
            return bad("growth, bottleneck width and bottleneck groups must be positive");
        }
        if self.classes < 2 {
            return bad("at least two classes are required");
        }
        if self.input.contains(&0) {
            return bad("input extent must be positive");
        }
        if self.wt_kernel % 2 == 0 {
            return bad("wavelet conv kernel must be odd");
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad("compression must lie in (0, 1]");
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be positive and bn_momentum in [0, 1]");
        }
        for s in 0..self.blocks.len() {
            let e = self.stage_extent(s);
            let axes: &[usize] = match self.wt_mode {
                WtMode::Spatial2d => &e[1..],
                WtMode::Volumetric3d => &e,
            };
            let max = axes
                .iter()
                .map(|&n| {
                    let (mut n, mut l) = (n, 0);
                    while n >= 2 {
                        n = n.div_ceil(2);
                        l += 1;
                    }
                    l
                })
                .min()
                .unwrap_or(0);
            if self.wt_levels > max {
                return Err(Error::Config(format!(
                    "stage {s} extent {e:?} admits at most {max} wavelet levels, {} requested",
                    self.wt_levels
                )));
            }
        }
        Ok(())
    }
}
