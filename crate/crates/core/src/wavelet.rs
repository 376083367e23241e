//! Haar analysis and synthesis expressed as stride-2 depthwise convolution
//! and its transpose.
//!
//! A bank of dimensionality `d` transforms the trailing `d` spatial axes of a
//! `[C, spatial...]` tensor. A 2-D bank applied to `[C, D, H, W]` transforms
//! `H` and `W` independently for every depth slice.
//!
//! Subbands are indexed by a bit pattern over the transformed axes, most
//! significant bit first, where a set bit selects the high-pass filter. For
//! the 2-D bank this gives the order `LL, LH, HL, HH`.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{conv, conv_transposed_to, ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum BankDims {
    Two,
    Three,
}

impl BankDims {
    pub fn axes(self) -> usize {
        match self {
            BankDims::Two => 2,
            BankDims::Three => 3,
        }
    }

    /// Subbands produced per level: `2^axes`.
    pub fn bands(self) -> usize {
        1 << self.axes()
    }
}

/// The separable Haar filters for one dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct HaarFilterBank {
    dims: BankDims,
    /// `[bands, 2, 2]` or `[bands, 2, 2, 2]`.
    filters: Tensor,
}

impl HaarFilterBank {
    pub fn new(dims: BankDims) -> Self {
        let axes = dims.axes();
        let taps = 1 << axes;
        let mut shape = vec![dims.bands()];
        shape.extend(std::iter::repeat_n(2, axes));
        // (1/sqrt 2)^axes, kept exact for the 2-D bank.
        let magnitude = 0.5f64.powi(axes as i32 / 2)
            * if axes % 2 == 1 { FRAC_1_SQRT_2 } else { 1.0 };
        // A tap is negated once for every axis on which the band is high-pass
        // and the tap is the second one.
        let filters = Tensor::from_fn(&shape, |i| {
            let (band, tap) = (i / taps, i % taps);
            let flips = (band & tap).count_ones();
            if flips % 2 == 1 {
                -magnitude
            } else {
                magnitude
            }
        });
        Self { dims, filters }
    }

    pub fn two_d() -> Self {
        Self::new(BankDims::Two)
    }

    pub fn three_d() -> Self {
        Self::new(BankDims::Three)
    }

    pub fn dims(&self) -> BankDims {
        self.dims
    }

    pub fn filters(&self) -> &Tensor {
        &self.filters
    }

    /// Replaces the filters, e.g. to check that the property suites detect a
    /// corrupted bank. The shape must stay the same.
    pub fn with_filters(mut self, filters: Tensor) -> Result<Self> {
        if filters.shape() != self.filters.shape() {
            return Err(shape_err!(
                "filter bank {:?} replaced by {:?}",
                self.filters.shape(),
                filters.shape()
            ));
        }
        self.filters = filters;
        Ok(self)
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let sp = shape.len().saturating_sub(1);
        if sp < self.dims.axes() || sp > 3 {
            return Err(shape_err!(
                "{}-D Haar bank needs [C, spatial...] with {}..=3 spatial axes, got {shape:?}",
                self.dims.axes(),
                self.dims.axes()
            ));
        }
        Ok(sp)
    }

    /// Depthwise kernels `[bands * C, 1, kernel...]` and the matching stride-2
    /// spec for an input with `channels` channels and `spatial_rank` axes.
    pub fn conv_kernels(&self, channels: usize, spatial_rank: usize) -> (Tensor, ConvSpec) {
        let untouched = spatial_rank - self.dims.axes();
        let kernel: Vec<usize> = (0..spatial_rank)
            .map(|a| if a < untouched { 1 } else { 2 })
            .collect();
        let per = self.filters.len();
        let mut data = Vec::with_capacity(channels * per);
        for _ in 0..channels {
            data.extend_from_slice(self.filters.data());
        }
        let mut shape = vec![channels * self.dims.bands(), 1];
        shape.extend_from_slice(&kernel);
        let kernels = Tensor::new(&shape, data).expect("bank kernel shape");
        let spec = ConvSpec::new(&kernel)
            .with_stride(&kernel)
            .with_groups(channels);
        (kernels, spec)
    }
}

/// One decomposition level: the low band and the remaining high bands, each
/// at half resolution along the transformed axes.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet {
    pub low: Tensor,
    pub highs: Vec<Tensor>,
    pub level: usize,
    /// Zero cells appended to each spatial axis of the parent before the
    /// transform; removed again by [`iwt`].
    pub pad: Vec<usize>,
}

impl SubbandSet {
    pub fn bands(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.low).chain(self.highs.iter())
    }

    pub fn energy(&self) -> f64 {
        self.bands().map(Tensor::norm_sq).sum()
    }

    /// Interleaves the bands channel-major, `[C * bands, ...]` with channel
    /// `c * bands + b` holding band `b` of input channel `c`. This is the
    /// layout the strided depthwise conv produces.
    pub fn stack(&self) -> Result<Tensor> {
        interleave(&self.bands().collect::<Vec<_>>())
    }

    pub fn from_stacked(stacked: &Tensor, bands: usize, level: usize, pad: Vec<usize>) -> Result<Self> {
        let mut parts = deinterleave(stacked, bands)?;
        let highs = parts.split_off(1);
        Ok(Self {
            low: parts.pop().expect("one low band"),
            highs,
            level,
            pad,
        })
    }

    /// Parent spatial shape the set was computed from.
    pub fn parent_spatial(&self, dims: BankDims) -> Vec<usize> {
        let sp = self.low.spatial();
        let untouched = sp.len() - dims.axes();
        sp.iter()
            .enumerate()
            .map(|(a, &n)| if a < untouched { n } else { 2 * n - self.pad[a] })
            .collect()
    }
}

pub(crate) fn interleave(bands: &[&Tensor]) -> Result<Tensor> {
    let first = bands[0];
    if bands.iter().any(|b| b.shape() != first.shape()) {
        return Err(shape_err!(
            "subbands have inconsistent shapes: {:?}",
            bands.iter().map(|b| b.shape().to_vec()).collect::<Vec<_>>()
        ));
    }
    let (c, nb) = (first.channels(), bands.len());
    let per = first.len() / c;
    let mut shape = first.shape().to_vec();
    shape[0] = c * nb;
    let mut data = Vec::with_capacity(first.len() * nb);
    for ch in 0..c {
        for b in bands {
            data.extend_from_slice(&b.data()[ch * per..(ch + 1) * per]);
        }
    }
    Tensor::new(&shape, data)
}

pub(crate) fn deinterleave(stacked: &Tensor, bands: usize) -> Result<Vec<Tensor>> {
    if stacked.channels() % bands != 0 {
        return Err(shape_err!(
            "{} channels are not a multiple of {bands} subbands",
            stacked.channels()
        ));
    }
    let c = stacked.channels() / bands;
    let per = stacked.len() / stacked.channels();
    let mut shape = stacked.shape().to_vec();
    shape[0] = c;
    (0..bands)
        .map(|b| {
            let mut data = Vec::with_capacity(c * per);
            for ch in 0..c {
                let src = (ch * bands + b) * per;
                data.extend_from_slice(&stacked.data()[src..src + per]);
            }
            Tensor::new(&shape, data)
        })
        .collect()
}

/// Per-axis zero padding that makes each transformed axis even.
pub fn even_padding(shape: &[usize], dims: BankDims) -> Vec<usize> {
    let sp = &shape[1..];
    let untouched = sp.len() - dims.axes();
    sp.iter()
        .enumerate()
        .map(|(a, &n)| usize::from(a >= untouched && n % 2 == 1))
        .collect()
}

/// Single-level transform. Every transformed axis must have even length.
pub fn wt(x: &Tensor, bank: &HaarFilterBank) -> Result<SubbandSet> {
    let sp = bank.check_input(x.shape())?;
    let pad = even_padding(x.shape(), bank.dims);
    if let Some(axis) = pad.iter().position(|&p| p == 1) {
        return Err(Error::OddAxis {
            axis: axis + 1,
            len: x.shape()[axis + 1],
        });
    }
    let (kernels, spec) = bank.conv_kernels(x.channels(), sp);
    let stacked = conv(x, &kernels, &spec)?;
    SubbandSet::from_stacked(&stacked, bank.dims.bands(), 1, pad)
}

/// Single-level transform that first zero-pads odd transformed axes at
/// their end. The padding is recorded so that [`iwt`] restores the shape.
pub fn wt_padded(x: &Tensor, bank: &HaarFilterBank) -> Result<SubbandSet> {
    bank.check_input(x.shape())?;
    let pad = even_padding(x.shape(), bank.dims);
    let mut set = wt(&x.pad_end(&pad)?, bank)?;
    set.pad = pad;
    Ok(set)
}

/// Inverse transform by transposed convolution with the same filters.
pub fn iwt(s: &SubbandSet, bank: &HaarFilterBank) -> Result<Tensor> {
    let expected = bank.dims.bands() - 1;
    if s.highs.len() != expected {
        return Err(shape_err!(
            "{} high bands supplied, {}-D bank needs {expected}",
            s.highs.len(),
            bank.dims.axes()
        ));
    }
    let stacked = s.stack()?;
    iwt_stacked(&stacked, bank, &s.pad)
}

/// [`iwt`] on the interleaved layout of [`SubbandSet::stack`].
pub fn iwt_stacked(stacked: &Tensor, bank: &HaarFilterBank, pad: &[usize]) -> Result<Tensor> {
    let sp = bank.check_input(stacked.shape())?;
    let nb = bank.dims.bands();
    if stacked.channels() % nb != 0 {
        return Err(shape_err!(
            "{} channels are not a multiple of {nb} subbands",
            stacked.channels()
        ));
    }
    if pad.len() != sp {
        return Err(shape_err!("padding record {pad:?} for {sp} spatial axes"));
    }
    let c = stacked.channels() / nb;
    let (kernels, spec) = bank.conv_kernels(c, sp);
    let full: Vec<usize> = stacked
        .spatial()
        .iter()
        .zip(&spec.stride)
        .map(|(n, s)| n * s)
        .collect();
    let out = conv_transposed_to(stacked, &kernels, &spec, &full)?;
    let cropped: Vec<usize> = full.iter().zip(pad).map(|(n, p)| n - p).collect();
    out.crop(&cropped)
}

/// The cascade of low-band decompositions, level 1 first.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid {
    pub levels: Vec<SubbandSet>,
    pub input_shape: Vec<usize>,
}

impl WaveletPyramid {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Deepest low band.
    pub fn coarsest(&self) -> &Tensor {
        &self.levels.last().expect("non-empty pyramid").low
    }

    /// Rebuilds the input bottom-up.
    pub fn reconstruct(&self, bank: &HaarFilterBank) -> Result<Tensor> {
        let mut low: Option<Tensor> = None;
        for set in self.levels.iter().rev() {
            let x = match low {
                None => iwt(set, bank)?,
                Some(l) => {
                    let set = SubbandSet {
                        low: l,
                        ..set.clone()
                    };
                    iwt(&set, bank)?
                }
            };
            low = Some(x);
        }
        low.ok_or_else(|| Error::Empty("wavelet pyramid".into()))
    }
}

/// Number of levels whose input is at least 2 cells along every transformed
/// axis, padding odd axes to even at each level.
pub fn max_levels(shape: &[usize], dims: BankDims) -> usize {
    let sp = &shape[1..];
    let axes = &sp[sp.len().saturating_sub(dims.axes())..];
    axes.iter()
        .map(|&n| {
            let (mut n, mut l) = (n, 0);
            while n >= 2 {
                n = n.div_ceil(2);
                l += 1;
            }
            l
        })
        .min()
        .unwrap_or(0)
}

pub fn check_levels(shape: &[usize], dims: BankDims, levels: usize) -> Result<()> {
    let max = max_levels(shape, dims);
    if levels > max {
        return Err(Error::TooManyLevels {
            requested: levels,
            max,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

/// Recursive decomposition of the low band, `levels >= 1` deep.
pub fn wt_cascade(x: &Tensor, bank: &HaarFilterBank, levels: usize) -> Result<WaveletPyramid> {
    bank.check_input(x.shape())?;
    if levels == 0 {
        return Err(Error::InvalidArgument("a cascade needs at least one level".into()));
    }
    check_levels(x.shape(), bank.dims, levels)?;
    let mut out = Vec::with_capacity(levels);
    let mut current = x.clone();
    for level in 1..=levels {
        let mut set = wt_padded(&current, bank)?;
        set.level = level;
        current = set.low.clone();
        out.push(set);
    }
    Ok(WaveletPyramid {
        levels: out,
        input_shape: x.shape().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_d_bank_matches_closed_form() {
        let f = HaarFilterBank::two_d();
        let expected = [
            0.5, 0.5, 0.5, 0.5, //
            0.5, -0.5, 0.5, -0.5, //
            0.5, 0.5, -0.5, -0.5, //
            0.5, -0.5, -0.5, 0.5,
        ];
        for (a, b) in f.filters().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn banks_are_orthonormal() {
        for bank in [HaarFilterBank::two_d(), HaarFilterBank::three_d()] {
            let nb = bank.dims().bands();
            let taps = bank.filters().len() / nb;
            let f = bank.filters().data();
            for i in 0..nb {
                for j in 0..nb {
                    let ip: f64 = (0..taps).map(|t| f[i * taps + t] * f[j * taps + t]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((ip - want).abs() < 1e-14, "bands {i},{j}: {ip}");
                }
            }
        }
    }

    #[test]
    fn worked_example() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = wt(&x, &HaarFilterBank::two_d()).unwrap();
        assert_eq!(s.low.data(), &[5.0]);
        let highs: Vec<f64> = s.highs.iter().map(|h| h.data()[0]).collect();
        assert_eq!(highs, vec![-1.0, -2.0, 0.0]);
    }

    #[test]
    fn constant_input() {
        let c = 1.75;
        let x = Tensor::full(&[2, 6, 4], c);
        let s = wt(&x, &HaarFilterBank::two_d()).unwrap();
        assert!(s.low.data().iter().all(|&v| (v - 2.0 * c).abs() < 1e-14));
        assert!(s.highs.iter().all(|h| h.data().iter().all(|&v| v == 0.0)));

        let x = Tensor::full(&[1, 4, 4, 4], c);
        let s = wt(&x, &HaarFilterBank::three_d()).unwrap();
        let want = 2.0 * 2f64.sqrt() * c;
        assert!(s.low.data().iter().all(|&v| (v - want).abs() < 1e-14));
        assert_eq!(s.highs.len(), 7);
        assert!(s.highs.iter().all(|h| h.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn inverse_of_constant() {
        let c = -0.5;
        let bank = HaarFilterBank::two_d();
        let s = SubbandSet {
            low: Tensor::full(&[1, 3, 3], 2.0 * c),
            highs: vec![Tensor::zeros(&[1, 3, 3]); 3],
            level: 1,
            pad: vec![0, 0],
        };
        let x = iwt(&s, &bank).unwrap();
        assert_eq!(x.shape(), &[1, 6, 6]);
        assert!(x.data().iter().all(|&v| (v - c).abs() < 1e-15));
    }

    #[test]
    fn odd_axis_rejected_without_padding() {
        let x = Tensor::zeros(&[1, 4, 5]);
        match wt(&x, &HaarFilterBank::two_d()) {
            Err(Error::OddAxis { axis, len }) => assert_eq!((axis, len), (2, 5)),
            other => panic!("expected odd-axis error, got {other:?}"),
        }
    }

    #[test]
    fn padded_roundtrip_restores_odd_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = HaarFilterBank::two_d();
        let x = Tensor::uniform(&[2, 7, 5], -1.0, 1.0, &mut rng);
        let s = wt_padded(&x, &bank).unwrap();
        assert_eq!(s.low.shape(), &[2, 4, 3]);
        assert_eq!(s.parent_spatial(bank.dims()), vec![7, 5]);
        let y = iwt(&s, &bank).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn spatial_only_bank_on_volume_keeps_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = HaarFilterBank::two_d();
        let x = Tensor::uniform(&[3, 5, 8, 6], -1.0, 1.0, &mut rng);
        let s = wt(&x, &bank).unwrap();
        assert_eq!(s.low.shape(), &[3, 5, 4, 3]);
        // Each depth slice transforms exactly like the standalone 2-D case.
        let slice = Tensor::new(&[1, 8, 6], x.data()[2 * 48..3 * 48].to_vec()).unwrap();
        let s2 = wt(&slice, &bank).unwrap();
        assert_eq!(&s.low.data()[2 * 12..3 * 12], s2.low.data());
        let y = iwt(&s, &bank).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn cascade_shapes_and_limits() {
        let bank = HaarFilterBank::two_d();
        let x = Tensor::zeros(&[1, 16, 16]);
        let p = wt_cascade(&x, &bank, 3).unwrap();
        assert_eq!(p.coarsest().shape(), &[1, 2, 2]);
        let one = wt_cascade(&x, &bank, 1).unwrap();
        assert_eq!(one.levels[0], wt(&x, &bank).unwrap());
        match wt_cascade(&x, &bank, 5) {
            Err(Error::TooManyLevels { max, .. }) => assert_eq!(max, 4),
            other => panic!("expected depth error, got {other:?}"),
        }
        assert_eq!(max_levels(&[1, 9, 9], BankDims::Two), 4);
        assert_eq!(max_levels(&[1, 3, 40, 40], BankDims::Three), 2);
    }

    #[test]
    fn cascade_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = HaarFilterBank::two_d();
        let x = Tensor::uniform(&[1, 32, 32], -1.0, 1.0, &mut rng);
        let p = wt_cascade(&x, &bank, 4).unwrap();
        assert!(p.reconstruct(&bank).unwrap().max_abs_diff(&x).unwrap() <= 1e-9);
    }

    #[test]
    fn mismatched_subbands_rejected() {
        let s = SubbandSet {
            low: Tensor::zeros(&[1, 2, 2]),
            highs: vec![Tensor::zeros(&[1, 2, 2]), Tensor::zeros(&[1, 2, 3]), Tensor::zeros(&[1, 2, 2])],
            level: 1,
            pad: vec![0, 0],
        };
        assert!(iwt(&s, &HaarFilterBank::two_d()).is_err());
    }
}
