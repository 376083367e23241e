//! Wavelet-domain depthwise convolution.
//!
//! The input's low band is decomposed `levels` times. At every level the
//! stacked subbands go through a small depthwise kernel and a per-channel
//! scale, and the results are folded back coarse-to-fine: the reconstruction
//! of level `i + 1` is added to the low band of level `i` before that level is
//! inverted. An optional depthwise kernel on the raw input is summed on top.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    channel_dots, conv, conv_kernel_grad, conv_transposed_to, scale_per_channel, ConvSpec, Tensor,
};
use crate::wavelet::{check_levels, iwt_stacked, wt_padded, BankDims, HaarFilterBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WtMode {
    /// Transform `H, W` only; a leading depth axis is carried through.
    #[default]
    Spatial2d,
    /// Transform `D, H, W` with the 8-band filter bank.
    Volumetric3d,
}

impl WtMode {
    pub fn bank_dims(self) -> BankDims {
        match self {
            WtMode::Spatial2d => BankDims::Two,
            WtMode::Volumetric3d => BankDims::Three,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WTConvConfig {
    pub levels: usize,
    pub kernel: usize,
    pub channels: usize,
    #[serde(default)]
    pub mode: WtMode,
    /// Depthwise conv on the untransformed input, summed into the output.
    #[serde(default = "yes")]
    pub residual: bool,
}

fn yes() -> bool {
    true
}

impl WTConvConfig {
    pub fn new(levels: usize, kernel: usize, channels: usize) -> Self {
        Self {
            levels,
            kernel,
            channels,
            mode: WtMode::Spatial2d,
            residual: true,
        }
    }

    pub fn with_mode(mut self, mode: WtMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::InvalidArgument(format!(
                "wavelet conv kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidArgument("wavelet conv needs at least one channel".into()));
        }
        Ok(())
    }

    pub fn bands(&self) -> usize {
        self.mode.bank_dims().bands()
    }

    pub fn bank(&self) -> HaarFilterBank {
        HaarFilterBank::new(self.mode.bank_dims())
    }

    /// Kernel extent without the leading `[C_out, 1]` axes.
    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.kernel; self.mode.bank_dims().axes()]
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.pow(self.mode.bank_dims().axes() as u32)
    }
}

/// Input extent along each transformed axis that can reach one output cell:
/// `2^levels * kernel`.
pub fn receptive_field(cfg: &WTConvConfig) -> usize {
    (1usize << cfg.levels) * cfg.kernel
}

/// Per-axis extents for an input with `spatial_rank` axes. An axis that is
/// not transformed (depth in spatial-2D mode) sees a kernel of extent 1.
pub fn receptive_field_axes(cfg: &WTConvConfig, spatial_rank: usize) -> Vec<usize> {
    let axes = cfg.mode.bank_dims().axes();
    (0..spatial_rank)
        .map(|a| if a + axes >= spatial_rank { receptive_field(cfg) } else { 1 })
        .collect()
}

/// Trainable wavelet-domain kernel weights, `levels * bands * channels *
/// kernel^axes` (`l * 4 * c * k^2` in spatial-2D mode). Scale factors and
/// the residual kernel are counted by [`WTConvParams::scale_count`] and
/// [`WTConvParams::residual_count`].
pub fn param_count(cfg: &WTConvConfig) -> usize {
    cfg.levels * cfg.bands() * cfg.channels * cfg.kernel_volume()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WTConvParams {
    /// Level `i + 1`: `[bands * C, 1, kernel...]`.
    pub level_kernels: Vec<Tensor>,
    /// Level `i + 1`: `[bands * C]`, one factor per subband channel.
    pub level_scales: Vec<Tensor>,
    /// `[C, 1, kernel...]` when the residual path is enabled.
    pub base_kernel: Option<Tensor>,
}

impl WTConvParams {
    /// Kernels uniform in `±1/sqrt(fan_in)`, scales 1.
    pub fn init<R: Rng + ?Sized>(cfg: &WTConvConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let bound = 1.0 / (cfg.kernel_volume() as f64).sqrt();
        let wshape = kernel_tensor_shape(cfg, cfg.bands() * cfg.channels);
        let level_kernels = (0..cfg.levels)
            .map(|_| Tensor::uniform(&wshape, -bound, bound, rng))
            .collect();
        let level_scales = (0..cfg.levels)
            .map(|_| Tensor::full(&[cfg.bands() * cfg.channels], 1.0))
            .collect();
        let base_kernel = cfg.residual.then(|| {
            Tensor::uniform(&kernel_tensor_shape(cfg, cfg.channels), -bound, bound, rng)
        });
        Ok(Self {
            level_kernels,
            level_scales,
            base_kernel,
        })
    }

    /// Zero wavelet kernels and scales with a centred unit residual kernel,
    /// so the layer is the identity map. Requires `cfg.residual`.
    pub fn identity(cfg: &WTConvConfig) -> Result<Self> {
        cfg.validate()?;
        if !cfg.residual {
            return Err(Error::InvalidArgument(
                "the identity configuration needs the residual path".into(),
            ));
        }
        let wshape = kernel_tensor_shape(cfg, cfg.bands() * cfg.channels);
        let mut base = Tensor::zeros(&kernel_tensor_shape(cfg, cfg.channels));
        let centre = cfg.kernel_volume() / 2;
        let kv = cfg.kernel_volume();
        for c in 0..cfg.channels {
            base.data_mut()[c * kv + centre] = 1.0;
        }
        Ok(Self {
            level_kernels: vec![Tensor::zeros(&wshape); cfg.levels],
            level_scales: vec![Tensor::zeros(&[cfg.bands() * cfg.channels]); cfg.levels],
            base_kernel: Some(base),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            level_kernels: self.level_kernels.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            level_scales: self.level_scales.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            base_kernel: self.base_kernel.as_ref().map(|t| Tensor::zeros(t.shape())),
        }
    }

    /// Parameter tensors in a fixed order with stable names.
    pub fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, k) in self.level_kernels.iter().enumerate() {
            out.push((format!("level{}.kernel", i + 1), k));
        }
        for (i, s) in self.level_scales.iter().enumerate() {
            out.push((format!("level{}.scale", i + 1), s));
        }
        if let Some(b) = &self.base_kernel {
            out.push(("base.kernel".to_string(), b));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, k) in self.level_kernels.iter_mut().enumerate() {
            out.push((format!("level{}.kernel", i + 1), k));
        }
        for (i, s) in self.level_scales.iter_mut().enumerate() {
            out.push((format!("level{}.scale", i + 1), s));
        }
        if let Some(b) = &mut self.base_kernel {
            out.push(("base.kernel".to_string(), b));
        }
        out
    }

    /// Walked count of wavelet-domain kernel weights.
    pub fn wavelet_kernel_count(&self) -> usize {
        self.level_kernels.iter().map(Tensor::len).sum()
    }

    pub fn scale_count(&self) -> usize {
        self.level_scales.iter().map(Tensor::len).sum()
    }

    pub fn residual_count(&self) -> usize {
        self.base_kernel.as_ref().map_or(0, Tensor::len)
    }

    pub fn total_count(&self) -> usize {
        self.wavelet_kernel_count() + self.scale_count() + self.residual_count()
    }

    fn check(&self, cfg: &WTConvConfig) -> Result<()> {
        let wshape = kernel_tensor_shape(cfg, cfg.bands() * cfg.channels);
        let ok = self.level_kernels.len() == cfg.levels
            && self.level_scales.len() == cfg.levels
            && self.level_kernels.iter().all(|k| k.shape() == wshape.as_slice())
            && self
                .level_scales
                .iter()
                .all(|s| s.shape() == [cfg.bands() * cfg.channels])
            && match (&self.base_kernel, cfg.residual) {
                (Some(b), true) => b.shape() == kernel_tensor_shape(cfg, cfg.channels).as_slice(),
                (None, false) => true,
                _ => false,
            };
        if ok {
            Ok(())
        } else {
            Err(shape_err!("wavelet conv parameters do not match {cfg:?}"))
        }
    }
}

fn kernel_tensor_shape(cfg: &WTConvConfig, out_channels: usize) -> Vec<usize> {
    let mut s = vec![out_channels, 1];
    s.extend(cfg.kernel_shape());
    s
}

/// Same-padded kernel and spec for an input with `spatial_rank` axes; a 2-D
/// kernel on a volume gains a unit depth axis. Callers set the grouping.
fn depthwise(cfg: &WTConvConfig, kernel: &Tensor, spatial_rank: usize) -> Result<(Tensor, ConvSpec)> {
    let axes = cfg.mode.bank_dims().axes();
    let mut kshape = vec![1; spatial_rank - axes];
    kshape.extend(cfg.kernel_shape());
    let mut full = kernel.shape()[..2].to_vec();
    full.extend_from_slice(&kshape);
    let k = kernel.clone().reshape(&full)?;
    Ok((k, ConvSpec::same(&kshape)))
}

fn check_input(x: &Tensor, cfg: &WTConvConfig) -> Result<usize> {
    cfg.validate()?;
    if x.channels() != cfg.channels {
        return Err(shape_err!(
            "input has {} channels, layer expects {}",
            x.channels(),
            cfg.channels
        ));
    }
    let sp = x.rank() - 1;
    let axes = cfg.mode.bank_dims().axes();
    if sp < axes || sp > 3 {
        return Err(shape_err!(
            "{:?} mode needs {axes}..=3 spatial axes, input is {:?}",
            cfg.mode,
            x.shape()
        ));
    }
    if cfg.levels > 0 {
        check_levels(x.shape(), cfg.mode.bank_dims(), cfg.levels)?;
    }
    Ok(sp)
}

/// Intermediate values of one forward pass, needed by [`wtconv_backward`].
#[derive(Debug, Clone)]
pub struct WTConvCache {
    /// Stacked subbands entering each level's conv.
    stacked: Vec<Tensor>,
    /// Conv outputs before scaling.
    convolved: Vec<Tensor>,
    pads: Vec<Vec<usize>>,
}

pub fn wtconv_forward(x: &Tensor, cfg: &WTConvConfig, params: &WTConvParams) -> Result<Tensor> {
    wtconv_forward_cached(x, cfg, params).map(|(y, _)| y)
}

pub fn wtconv_forward_cached(
    x: &Tensor,
    cfg: &WTConvConfig,
    params: &WTConvParams,
) -> Result<(Tensor, WTConvCache)> {
    let sp = check_input(x, cfg)?;
    params.check(cfg)?;
    let bank = cfg.bank();
    let nb = cfg.bands();

    let mut cache = WTConvCache {
        stacked: Vec::with_capacity(cfg.levels),
        convolved: Vec::with_capacity(cfg.levels),
        pads: Vec::with_capacity(cfg.levels),
    };
    let mut low = x.clone();
    for i in 0..cfg.levels {
        let set = wt_padded(&low, &bank)?;
        let stacked = set.stack()?;
        let (k, spec) = depthwise(cfg, &params.level_kernels[i], sp)?;
        let y = conv(&stacked, &k, &spec.with_groups(nb * cfg.channels))?;
        cache.pads.push(set.pad.clone());
        cache.stacked.push(stacked);
        cache.convolved.push(y);
        low = set.low;
    }

    let mut acc: Option<Tensor> = None;
    for i in (0..cfg.levels).rev() {
        let mut t = scale_per_channel(&cache.convolved[i], params.level_scales[i].data())?;
        if let Some(z) = &acc {
            add_to_low(&mut t, z, nb)?;
        }
        acc = Some(iwt_stacked(&t, &bank, &cache.pads[i])?);
    }

    let mut out = acc.unwrap_or_else(|| Tensor::zeros(x.shape()));
    if let Some(base) = &params.base_kernel {
        let (k, spec) = depthwise(cfg, base, sp)?;
        out.add_assign(&conv(x, &k, &spec.with_groups(cfg.channels))?)?;
    }
    Ok((out, cache))
}

/// Adds `z` (`[C, ...]`) onto the low-band channels of an interleaved stack.
fn add_to_low(stacked: &mut Tensor, z: &Tensor, bands: usize) -> Result<()> {
    if stacked.spatial() != z.spatial() || stacked.channels() != z.channels() * bands {
        return Err(shape_err!(
            "low-band update {:?} does not fit stack {:?}",
            z.shape(),
            stacked.shape()
        ));
    }
    for c in 0..z.channels() {
        stacked
            .channel_mut(c * bands)
            .iter_mut()
            .zip(z.channel(c))
            .for_each(|(a, b)| *a += b);
    }
    Ok(())
}

fn low_channels(stacked: &Tensor, bands: usize) -> Tensor {
    let c = stacked.channels() / bands;
    let mut shape = stacked.shape().to_vec();
    shape[0] = c;
    let mut data = Vec::with_capacity(stacked.len() / bands);
    for ch in 0..c {
        data.extend_from_slice(stacked.channel(ch * bands));
    }
    Tensor::new(&shape, data).expect("low band shape")
}

/// Adjoint of [`iwt_stacked`]: zero-pad, then the strided analysis conv.
fn iwt_adjoint(g: &Tensor, bank: &HaarFilterBank, pad: &[usize]) -> Result<Tensor> {
    let g = g.pad_end(pad)?;
    let (k, spec) = bank.conv_kernels(g.channels(), g.rank() - 1);
    conv(&g, &k, &spec)
}

/// Gradients with respect to the input and every parameter block.
pub fn wtconv_backward(
    x: &Tensor,
    cfg: &WTConvConfig,
    params: &WTConvParams,
    upstream: &Tensor,
) -> Result<(Tensor, WTConvParams)> {
    let (y, cache) = wtconv_forward_cached(x, cfg, params)?;
    if upstream.shape() != y.shape() {
        return Err(shape_err!(
            "upstream gradient {:?} for output {:?}",
            upstream.shape(),
            y.shape()
        ));
    }
    wtconv_backward_cached(x, cfg, params, &cache, upstream)
}

pub fn wtconv_backward_cached(
    x: &Tensor,
    cfg: &WTConvConfig,
    params: &WTConvParams,
    cache: &WTConvCache,
    upstream: &Tensor,
) -> Result<(Tensor, WTConvParams)> {
    let sp = x.rank() - 1;
    let bank = cfg.bank();
    let nb = cfg.bands();
    let mut grads = params.zeros_like();

    let mut gx = Tensor::zeros(x.shape());
    if let Some(base) = &params.base_kernel {
        let (k, spec) = depthwise(cfg, base, sp)?;
        let spec = spec.with_groups(cfg.channels);
        let gk = conv_kernel_grad(x, upstream, k.shape(), &spec)?;
        grads.base_kernel = Some(gk.reshape(base.shape())?);
        gx = conv_transposed_to(upstream, &k, &spec, x.spatial())?;
    }

    // Reconstruction path, fine to coarse.
    let mut g_stacked = Vec::with_capacity(cfg.levels);
    let mut gz = upstream.clone();
    for i in 0..cfg.levels {
        let gt = iwt_adjoint(&gz, &bank, &cache.pads[i])?;
        gz = low_channels(&gt, nb);
        grads.level_scales[i] = Tensor::new(
            &[gt.channels()],
            channel_dots(&cache.convolved[i], &gt)?,
        )?;
        let gy = scale_per_channel(&gt, params.level_scales[i].data())?;
        let (k, spec) = depthwise(cfg, &params.level_kernels[i], sp)?;
        let spec = spec.with_groups(nb * cfg.channels);
        let gk = conv_kernel_grad(&cache.stacked[i], &gy, k.shape(), &spec)?;
        grads.level_kernels[i] = gk.reshape(params.level_kernels[i].shape())?;
        g_stacked.push(conv_transposed_to(&gy, &k, &spec, cache.stacked[i].spatial())?);
    }

    // Decomposition path, coarse to fine.
    let mut g_low: Option<Tensor> = None;
    for i in (0..cfg.levels).rev() {
        let mut gs = g_stacked[i].clone();
        if let Some(gl) = &g_low {
            add_to_low(&mut gs, gl, nb)?;
        }
        g_low = Some(iwt_stacked(&gs, &bank, &cache.pads[i])?);
    }
    if let Some(gl) = g_low {
        gx.add_assign(&gl)?;
    }
    Ok((gx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn receptive_field_values() {
        assert_eq!(receptive_field(&WTConvConfig::new(3, 5, 1)), 40);
        assert_eq!(receptive_field(&WTConvConfig::new(0, 7, 1)), 7);
        assert_eq!(receptive_field(&WTConvConfig::new(1, 3, 1)), 6);
        assert_eq!(receptive_field_axes(&WTConvConfig::new(2, 3, 1), 3), vec![1, 12, 12]);
    }

    #[test]
    fn param_law_values() {
        assert_eq!(param_count(&WTConvConfig::new(1, 3, 1)), 36);
        assert_eq!(param_count(&WTConvConfig::new(3, 5, 16)), 4800);
        assert_eq!(param_count(&WTConvConfig::new(0, 5, 16)), 0);
        let vol = WTConvConfig::new(2, 3, 2).with_mode(WtMode::Volumetric3d);
        assert_eq!(param_count(&vol), 2 * 8 * 2 * 27);
    }

    #[test]
    fn zero_levels_is_plain_depthwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = WTConvConfig::new(0, 3, 2);
        let p = WTConvParams::init(&cfg, &mut rng).unwrap();
        let x = Tensor::uniform(&[2, 6, 5], -1.0, 1.0, &mut rng);
        let y = wtconv_forward(&x, &cfg, &p).unwrap();
        let plain = conv(
            &x,
            p.base_kernel.as_ref().unwrap(),
            &ConvSpec::same(&[3, 3]).with_groups(2),
        )
        .unwrap();
        assert_eq!(y, plain);
    }

    #[test]
    fn identity_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for mode in [WtMode::Spatial2d, WtMode::Volumetric3d] {
            let cfg = WTConvConfig::new(2, 3, 3).with_mode(mode);
            let p = WTConvParams::identity(&cfg).unwrap();
            let x = Tensor::uniform(&[3, 8, 8, 8], -1.0, 1.0, &mut rng);
            assert_eq!(wtconv_forward(&x, &cfg, &p).unwrap(), x);
            let g = Tensor::uniform(x.shape(), -1.0, 1.0, &mut rng);
            let (gx, _) = wtconv_backward(&x, &cfg, &p, &g).unwrap();
            assert_eq!(gx, g);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = WTConvConfig::new(2, 3, 2);
        let p = WTConvParams::init(&cfg, &mut rng).unwrap();
        let x = Tensor::uniform(&[2, 8, 8], -1.0, 1.0, &mut rng);
        let (gx, gp) = wtconv_backward(&x, &cfg, &p, &Tensor::zeros(&[2, 8, 8])).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        for (_, t) in gp.blocks() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shape_is_preserved_for_odd_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cfg = WTConvConfig::new(2, 3, 4);
        let p = WTConvParams::init(&cfg, &mut rng).unwrap();
        let x = Tensor::uniform(&[4, 3, 9, 7], -1.0, 1.0, &mut rng);
        assert_eq!(wtconv_forward(&x, &cfg, &p).unwrap().shape(), x.shape());
    }

    #[test]
    fn too_many_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cfg = WTConvConfig::new(4, 3, 1);
        let p = WTConvParams::init(&cfg, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(
            wtconv_forward(&x, &cfg, &p),
            Err(Error::TooManyLevels { max: 2, .. })
        ));
    }

    #[test]
    fn even_kernel_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        assert!(WTConvParams::init(&WTConvConfig::new(1, 4, 1), &mut rng).is_err());
    }
}
