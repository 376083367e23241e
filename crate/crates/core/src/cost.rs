//! Closed-form multiply-accumulate counts.
//!
//! One FLOP here is one multiply-accumulate, the convention under which a
//! single-channel 512x512 input with a 7x7 kernel costs 12,845,056.
//!
//! Halved extents round up (`n_i = ceil(n_{i-1} / 2)`) and the wavelet
//! transform runs on extents padded to even, matching what the layer actually
//! executes. For extents divisible by `2^levels` this is exactly the textbook
//! `N / 2^i` form.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::net::{bottleneck_groups, LayerGraph, NetworkConfig, NodeKind};
use crate::wtconv::WtMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostQuery {
    pub channels: u64,
    pub width: u64,
    pub height: u64,
    pub kernel_w: u64,
    pub kernel_h: u64,
    pub stride_w: u64,
    pub stride_h: u64,
    pub levels: u32,
    /// Depth slices carried through a spatial-2D layer, or the transformed
    /// depth extent in volumetric mode (kernel depth = `kernel_w`).
    pub depth: u64,
    pub mode: WtMode,
}

impl CostQuery {
    /// Square input and kernel, stride 1, one depth slice.
    pub fn square(channels: u64, size: u64, kernel: u64, levels: u32) -> Self {
        Self {
            channels,
            width: size,
            height: size,
            kernel_w: kernel,
            kernel_h: kernel,
            stride_w: 1,
            stride_h: 1,
            levels,
            depth: 1,
            mode: WtMode::Spatial2d,
        }
    }

    pub fn with_stride(mut self, stride: u64) -> Self {
        self.stride_w = stride;
        self.stride_h = stride;
        self
    }

    pub fn with_depth(mut self, depth: u64) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_mode(mut self, mode: WtMode) -> Self {
        self.mode = mode;
        self
    }

    fn volumetric(&self) -> bool {
        self.mode == WtMode::Volumetric3d
    }

    fn bands(&self) -> u64 {
        if self.volumetric() {
            8
        } else {
            4
        }
    }

    fn kernel_volume(&self) -> u64 {
        let k2 = self.kernel_w * self.kernel_h;
        if self.volumetric() {
            k2 * self.kernel_w
        } else {
            k2
        }
    }

    /// Spatial extents `(d, h, w)` at level `i`; depth halves only in
    /// volumetric mode.
    fn extents(&self, level: u32) -> (u64, u64, u64) {
        let (mut d, mut h, mut w) = (self.depth, self.height, self.width);
        for _ in 0..level {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            if self.volumetric() {
                d = d.div_ceil(2);
            }
        }
        (d, h, w)
    }
}

/// `C * K_W * K_H * N_W * N_H / (S_W * S_H)` (output extents round up).
pub fn depthwise_flops(q: &CostQuery) -> u64 {
    let out_w = q.width.div_ceil(q.stride_w);
    let out_h = q.height.div_ceil(q.stride_h);
    q.channels * q.kernel_w * q.kernel_h * out_w * out_h * q.depth
}

/// `C * K_W * K_H * (N_W * N_H + sum_i 4 * N_W * N_H / 4^i)`: the full
/// resolution kernel plus one small kernel per subband and level.
pub fn wtconv_flops(q: &CostQuery) -> u64 {
    let (d, h, w) = q.extents(0);
    let mut cells = d * h * w;
    for i in 1..=q.levels {
        let (d, h, w) = q.extents(i);
        cells += q.bands() * d * h * w;
    }
    q.channels * q.kernel_volume() * cells
}

/// `4C * sum_{i<l} N_W * N_H / 4^i`: `bands` 2x2 kernels at stride 2 on
/// every level's (even-padded) input.
pub fn wt_flops(q: &CostQuery) -> u64 {
    let pad = |n: u64| n + n % 2;
    (0..q.levels)
        .map(|i| {
            let (d, h, w) = q.extents(i);
            let d = if q.volumetric() { pad(d) } else { d };
            q.bands() * q.channels * d * pad(h) * pad(w)
        })
        .sum()
}

/// Same count as [`wt_flops`]: the transposed conv touches every tap once.
pub fn iwt_flops(q: &CostQuery) -> u64 {
    wt_flops(q)
}

/// Wavelet-domain conv plus both transforms.
pub fn wtconv_total_flops(q: &CostQuery) -> u64 {
    wtconv_flops(q) + wt_flops(q) + iwt_flops(q)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostItem {
    pub name: String,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CostReport {
    pub items: Vec<CostItem>,
    pub total_flops: u64,
    pub total_params: u64,
}

impl CostReport {
    pub fn push(&mut self, name: impl Into<String>, flops: u64, params: u64) {
        self.items.push(CostItem {
            name: name.into(),
            flops,
            params,
        });
        self.total_flops += flops;
        self.total_params += params;
    }

    /// Breakdown of one wavelet conv layer: the residual kernel, the
    /// wavelet-domain kernels, both transforms, and the scale factors.
    pub fn wtconv(q: &CostQuery, residual: bool) -> Self {
        let mut r = Self::default();
        let mut base = *q;
        base.levels = 0;
        let base_flops = wtconv_flops(&base);
        let kv = q.kernel_volume();
        if residual {
            r.push("residual", base_flops, q.channels * kv);
        }
        r.push(
            "wavelet_conv",
            wtconv_flops(q) - base_flops,
            q.levels as u64 * q.bands() * q.channels * kv,
        );
        r.push("wt", wt_flops(q), 0);
        r.push("iwt", iwt_flops(q), 0);
        r.push("scales", 0, q.levels as u64 * q.bands() * q.channels);
        r
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: CostReport) {
        for item in other.items {
            self.push(format!("{prefix}.{}", item.name), item.flops, item.params);
        }
    }

    pub fn sum_of_items(&self) -> (u64, u64) {
        self.items
            .iter()
            .fold((0, 0), |(f, p), i| (f + i.flops, p + i.params))
    }
}

/// Per-layer cost of one forward pass of a single patch. FLOPs count the
/// conv and linear layers; parameters are the trainable ones, normalization
/// scales and offsets included.
pub fn model_cost(cfg: &NetworkConfig) -> Result<CostReport> {
    cfg.validate()?;
    let graph = LayerGraph::build(cfg);
    let mut r = CostReport::default();
    let vol = |s: usize| cfg.stage_extent(s).iter().product::<usize>() as u64;
    for node in &graph.nodes {
        let (cin, cout) = (node.in_channels as u64, node.out_channels as u64);
        let v = vol(node.stage);
        match node.kind {
            NodeKind::Stem => r.push("stem.conv", cout * 27 * v, cout * 27),
            NodeKind::Transition => {
                r.push(format!("{}.bn", node.name), 0, 2 * cin);
                r.push(format!("{}.conv", node.name), cout * cin * v, cout * cin);
            }
            NodeKind::Dense => {
                let width = (cfg.bottleneck_width * node.out_channels) as u64;
                let g = bottleneck_groups(cfg, node.in_channels, width as usize) as u64;
                r.push(format!("{}.bn", node.name), 0, 2 * cin);
                r.push(
                    format!("{}.bottleneck", node.name),
                    width * v * (cin / g),
                    width * (cin / g),
                );
                let [d, h, w] = cfg.stage_extent(node.stage);
                let k = cfg.wt_kernel as u64;
                let q = CostQuery {
                    channels: width,
                    width: w as u64,
                    height: h as u64,
                    kernel_w: k,
                    kernel_h: k,
                    stride_w: 1,
                    stride_h: 1,
                    levels: cfg.wt_levels as u32,
                    depth: d as u64,
                    mode: cfg.wt_mode,
                };
                r.extend_prefixed(
                    &format!("{}.wtconv", node.name),
                    CostReport::wtconv(&q, cfg.wt_residual),
                );
                r.push(format!("{}.pointwise", node.name), cout * width * v, cout * width);
            }
        }
    }
    let c = graph.head_channels as u64;
    let k = cfg.classes as u64;
    r.push("head.bn", 0, 2 * c);
    r.push("head.linear", k * c, k * c + k);
    Ok(r)
}
