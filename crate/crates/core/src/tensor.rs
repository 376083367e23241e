//! Dense row-major tensors and the convolution primitives the rest of the
//! crate is assembled from.
//!
//! Layout is channels-first everywhere: a feature map is `[C, spatial...]`
//! with one to three spatial axes. Convolutions use the correlation
//! convention (kernels are not flipped) and zero padding only.

use std::cell::Cell;
use std::fmt;

use rand::Rng;

use crate::error::{shape_err, Error, Result};

thread_local! {
    static MAC_COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates performed by convolution and matmul kernels on this
/// thread since the last [`reset_mac_count`].
pub fn mac_count() -> u64 {
    MAC_COUNTER.with(|c| c.get())
}

pub fn reset_mac_count() {
    MAC_COUNTER.with(|c| c.set(0));
}

fn record_macs(n: u64) {
    MAC_COUNTER.with(|c| c.set(c.get() + n));
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} elements]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err!("dimensions must be positive, got {shape:?}"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {len} elements but {} were supplied",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "dimensions must be positive, got {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Shape after the channel axis.
    pub fn spatial(&self) -> &[usize] {
        &self.shape[1..]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
            acc * n + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(shape_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Contiguous view of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.data.len() / self.shape[0];
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.data.len() / self.shape[0];
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "{op}: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "add")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "sub")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same(other, "axpy")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += alpha * b);
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Zero-pads the end of each spatial axis.
    pub fn pad_end(&self, pads: &[usize]) -> Result<Self> {
        let sp = self.spatial();
        if pads.len() != sp.len() {
            return Err(shape_err!("pad_end: {} pads for {} spatial axes", pads.len(), sp.len()));
        }
        if pads.iter().all(|&p| p == 0) {
            return Ok(self.clone());
        }
        let mut shape = self.shape.clone();
        for (d, p) in shape[1..].iter_mut().zip(pads) {
            *d += p;
        }
        let mut out = Self::zeros(&shape);
        copy_block(self, &mut out, false);
        Ok(out)
    }

    /// Keeps the leading `sizes` cells of each spatial axis.
    pub fn crop(&self, sizes: &[usize]) -> Result<Self> {
        let sp = self.spatial();
        if sizes.len() != sp.len() || sizes.iter().zip(sp).any(|(s, n)| s > n || *s == 0) {
            return Err(shape_err!("crop {:?} to {sizes:?}", self.shape));
        }
        if sizes == sp {
            return Ok(self.clone());
        }
        let mut shape = vec![self.shape[0]];
        shape.extend_from_slice(sizes);
        let mut out = Self::zeros(&shape);
        copy_block(self, &mut out, true);
        Ok(out)
    }
}

/// Copies the overlapping leading block between two tensors of equal rank.
fn copy_block(src: &Tensor, dst: &mut Tensor, src_larger: bool) {
    let (c, s3, d3) = (src.shape[0], to3(src.spatial()), to3(dst.spatial()));
    let small = if src_larger { d3 } else { s3 };
    for ch in 0..c {
        for z in 0..small[0] {
            for y in 0..small[1] {
                let so = ((ch * s3[0] + z) * s3[1] + y) * s3[2];
                let dof = ((ch * d3[0] + z) * d3[1] + y) * d3[2];
                dst.data[dof..dof + small[2]].copy_from_slice(&src.data[so..so + small[2]]);
            }
        }
    }
}

fn to3(sp: &[usize]) -> [usize; 3] {
    let mut out = [1; 3];
    let off = 3 - sp.len();
    out[off..].copy_from_slice(sp);
    out
}

/// Kernel extent, stride, zero padding and channel grouping of a convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, no padding, one group.
    pub fn new(kernel: &[usize]) -> Self {
        Self {
            kernel: kernel.to_vec(),
            stride: vec![1; kernel.len()],
            padding: vec![0; kernel.len()],
            groups: 1,
        }
    }

    /// Stride 1 with `(k - 1) / 2` padding, which preserves odd-sized extents.
    pub fn same(kernel: &[usize]) -> Self {
        let padding = kernel.iter().map(|k| (k - 1) / 2).collect();
        Self {
            padding,
            ..Self::new(kernel)
        }
    }

    pub fn with_stride(mut self, stride: &[usize]) -> Self {
        self.stride = stride.to_vec();
        self
    }

    pub fn with_padding(mut self, padding: &[usize]) -> Self {
        self.padding = padding.to_vec();
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn spatial_rank(&self) -> usize {
        self.kernel.len()
    }

    /// Output extent along each spatial axis for the given input extents.
    pub fn output_size(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        if input.len() != self.kernel.len() {
            return Err(shape_err!(
                "{} spatial axes for a {}-axis kernel",
                input.len(),
                self.kernel.len()
            ));
        }
        input
            .iter()
            .enumerate()
            .map(|(a, &n)| {
                let padded = n + 2 * self.padding[a];
                if padded < self.kernel[a] {
                    Err(shape_err!(
                        "axis {a}: kernel {} exceeds padded extent {padded}; output would be empty",
                        self.kernel[a]
                    ))
                } else {
                    Ok((padded - self.kernel[a]) / self.stride[a] + 1)
                }
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let r = self.kernel.len();
        if r == 0 || r > 3 {
            return Err(Error::InvalidArgument(format!(
                "convolutions support 1 to 3 spatial axes, got {r}"
            )));
        }
        if self.stride.len() != r || self.padding.len() != r {
            return Err(Error::InvalidArgument(
                "kernel, stride and padding must have one entry per spatial axis".into(),
            ));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) || self.groups == 0 {
            return Err(Error::InvalidArgument(
                "kernel sizes, strides and groups must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

struct ConvPlan {
    c_out: usize,
    in_per_group: usize,
    out_per_group: usize,
    n: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    o: [usize; 3],
}

impl ConvPlan {
    fn new(input: &[usize], kernels: &[usize], spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let r = spec.spatial_rank();
        if input.len() != r + 1 {
            return Err(shape_err!(
                "input {input:?} must be [C, {r} spatial axes]"
            ));
        }
        if kernels.len() != r + 2 || kernels[2..] != spec.kernel[..] {
            return Err(shape_err!(
                "kernel tensor {kernels:?} must be [C_out, C_in/groups, {:?}]",
                spec.kernel
            ));
        }
        let (c_in, c_out, g) = (input[0], kernels[0], spec.groups);
        if c_in % g != 0 || c_out % g != 0 {
            return Err(shape_err!(
                "channels in={c_in} out={c_out} not divisible by {g} groups"
            ));
        }
        if kernels[1] != c_in / g {
            return Err(shape_err!(
                "kernel expects {} input channels per group, input supplies {}",
                kernels[1],
                c_in / g
            ));
        }
        let out = spec.output_size(&input[1..])?;
        let pad3 = |v: &[usize], fill: usize| {
            let mut a = [fill; 3];
            a[3 - r..].copy_from_slice(v);
            a
        };
        Ok(Self {
            c_out,
            in_per_group: c_in / g,
            out_per_group: c_out / g,
            n: pad3(&input[1..], 1),
            k: pad3(&spec.kernel, 1),
            s: pad3(&spec.stride, 1),
            p: pad3(&spec.padding, 0),
            o: pad3(&out, 1),
        })
    }

    fn in_vol(&self) -> usize {
        self.n.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.o.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.k.iter().product()
    }

    fn macs(&self) -> u64 {
        (self.c_out * self.out_vol() * self.in_per_group * self.k_vol()) as u64
    }

    /// Output indices `[lo, hi)` along `axis` whose tap `kk` lands inside the input.
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize) {
        let (n, s, p, o) = (self.n[axis], self.s[axis], self.p[axis], self.o[axis]);
        let lo = if p > kk { (p - kk).div_ceil(s) } else { 0 };
        if n + p < kk + 1 {
            return (0, 0);
        }
        let hi = ((n - 1 + p - kk) / s + 1).min(o);
        (lo, hi.max(lo))
    }

    /// Visits every (weight, output row, input row) triple. The callback
    /// receives the flat weight index, the output row base, the input row
    /// base, the valid output column range, and the input column offset of
    /// the first valid column.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let (ivol, ovol, kvol) = (self.in_vol(), self.out_vol(), self.k_vol());
        for oc in 0..self.c_out {
            let g = oc / self.out_per_group;
            for icl in 0..self.in_per_group {
                let ic = g * self.in_per_group + icl;
                let wbase = (oc * self.in_per_group + icl) * kvol;
                for kd in 0..self.k[0] {
                    let (d0, d1) = self.valid(0, kd);
                    for kh in 0..self.k[1] {
                        let (h0, h1) = self.valid(1, kh);
                        for kw in 0..self.k[2] {
                            let (w0, w1) = self.valid(2, kw);
                            if w0 >= w1 {
                                continue;
                            }
                            let widx = wbase + (kd * self.k[1] + kh) * self.k[2] + kw;
                            for od in d0..d1 {
                                let id = od * self.s[0] + kd - self.p[0];
                                for oh in h0..h1 {
                                    let ih = oh * self.s[1] + kh - self.p[1];
                                    let orow = oc * ovol + (od * self.o[1] + oh) * self.o[2];
                                    let irow = ic * ivol + (id * self.n[1] + ih) * self.n[2];
                                    let iw0 = w0 * self.s[2] + kw - self.p[2];
                                    f(widx, orow, irow, w0, w1, iw0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolutions on the flattened, zero-padded volume. Output cell
/// `(d, h, w)` lives at flat position `(d * Hp + h) * Wp + w` of the padded
/// grid and tap `(kd, kh, kw)` reads `offset(kd, kh, kw)` further on, so each
/// (output channel, input channel, tap) triple is a single long axpy. Cells
/// past the valid output are computed and discarded.
struct FlatPlan {
    np: [usize; 3],
    /// Flat span covering every valid output position.
    len: usize,
    offsets: Vec<usize>,
}

impl FlatPlan {
    fn new(plan: &ConvPlan) -> Self {
        let np = [0, 1, 2].map(|a| plan.n[a] + 2 * plan.p[a]);
        let o = plan.o;
        let len = ((o[0] - 1) * np[1] + (o[1] - 1)) * np[2] + o[2];
        let mut offsets = Vec::with_capacity(plan.k_vol());
        for kd in 0..plan.k[0] {
            for kh in 0..plan.k[1] {
                for kw in 0..plan.k[2] {
                    offsets.push((kd * np[1] + kh) * np[2] + kw);
                }
            }
        }
        Self { np, len, offsets }
    }

    fn pvol(&self) -> usize {
        self.np.iter().product()
    }

    /// Copies `[C, n]` into the interior of a zeroed `[C, np]` buffer.
    fn pad(&self, plan: &ConvPlan, x: &[f64], channels: usize) -> Vec<f64> {
        let (n, p, np) = (plan.n, plan.p, self.np);
        let mut out = vec![0.0; channels * self.pvol()];
        for c in 0..channels {
            for d in 0..n[0] {
                for h in 0..n[1] {
                    let src = ((c * n[0] + d) * n[1] + h) * n[2];
                    let dst = ((c * np[0] + d + p[0]) * np[1] + h + p[1]) * np[2] + p[2];
                    out[dst..dst + n[2]].copy_from_slice(&x[src..src + n[2]]);
                }
            }
        }
        out
    }

    /// Inverse of [`FlatPlan::pad`]: extracts the interior.
    fn unpad(&self, plan: &ConvPlan, xp: &[f64], channels: usize) -> Vec<f64> {
        let (n, p, np) = (plan.n, plan.p, self.np);
        let mut out = vec![0.0; channels * n.iter().product::<usize>()];
        for c in 0..channels {
            for d in 0..n[0] {
                for h in 0..n[1] {
                    let dst = ((c * n[0] + d) * n[1] + h) * n[2];
                    let src = ((c * np[0] + d + p[0]) * np[1] + h + p[1]) * np[2] + p[2];
                    out[dst..dst + n[2]].copy_from_slice(&xp[src..src + n[2]]);
                }
            }
        }
        out
    }

    /// Moves valid outputs between the compact `[C, o]` layout and the
    /// `[C, len]` strided layout.
    fn scatter_out(&self, plan: &ConvPlan, y: &[f64]) -> Vec<f64> {
        let o = plan.o;
        let mut out = vec![0.0; plan.c_out * self.len];
        for c in 0..plan.c_out {
            for d in 0..o[0] {
                for h in 0..o[1] {
                    let src = ((c * o[0] + d) * o[1] + h) * o[2];
                    let dst = c * self.len + (d * self.np[1] + h) * self.np[2];
                    out[dst..dst + o[2]].copy_from_slice(&y[src..src + o[2]]);
                }
            }
        }
        out
    }

    fn gather_out(&self, plan: &ConvPlan, yp: &[f64], y: &mut [f64]) {
        let o = plan.o;
        for c in 0..plan.c_out {
            for d in 0..o[0] {
                for h in 0..o[1] {
                    let dst = ((c * o[0] + d) * o[1] + h) * o[2];
                    let src = c * self.len + (d * self.np[1] + h) * self.np[2];
                    y[dst..dst + o[2]].copy_from_slice(&yp[src..src + o[2]]);
                }
            }
        }
    }

    fn padded(&self, plan: &ConvPlan) -> bool {
        plan.p.iter().any(|&p| p > 0)
    }

    /// Calls `f(weight index, input channel base, output channel base, tap offset)`.
    fn for_each_tap(&self, plan: &ConvPlan, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (kvol, pvol) = (plan.k_vol(), self.pvol());
        for oc in 0..plan.c_out {
            let g = oc / plan.out_per_group;
            for icl in 0..plan.in_per_group {
                let ic = g * plan.in_per_group + icl;
                let wbase = (oc * plan.in_per_group + icl) * kvol;
                for (t, &off) in self.offsets.iter().enumerate() {
                    f(wbase + t, ic * pvol + off, oc * self.len, t);
                }
            }
        }
    }
}

fn unit_stride(plan: &ConvPlan) -> bool {
    plan.s == [1, 1, 1]
}

fn axpy_slice(dst: &mut [f64], a: f64, src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
}

fn conv_flat(plan: &ConvPlan, x: &[f64], w: &[f64], y: &mut [f64]) {
    let fp = FlatPlan::new(plan);
    let padded;
    let xp: &[f64] = if fp.padded(plan) {
        padded = fp.pad(plan, x, plan.c_out / plan.out_per_group * plan.in_per_group);
        &padded
    } else {
        x
    };
    let mut yp = vec![0.0; plan.c_out * fp.len];
    let len = fp.len;
    fp.for_each_tap(plan, |widx, xi, yi, _| {
        axpy_slice(&mut yp[yi..yi + len], w[widx], &xp[xi..xi + len]);
    });
    fp.gather_out(plan, &yp, y);
}

fn conv_transposed_flat(plan: &ConvPlan, gy: &[f64], w: &[f64], c_in: usize) -> Vec<f64> {
    let fp = FlatPlan::new(plan);
    let yp = fp.scatter_out(plan, gy);
    let mut gxp = vec![0.0; c_in * fp.pvol()];
    let len = fp.len;
    fp.for_each_tap(plan, |widx, xi, yi, _| {
        axpy_slice(&mut gxp[xi..xi + len], w[widx], &yp[yi..yi + len]);
    });
    if fp.padded(plan) {
        fp.unpad(plan, &gxp, c_in)
    } else {
        gxp
    }
}

fn conv_kernel_grad_flat(plan: &ConvPlan, x: &[f64], gy: &[f64], gw: &mut [f64], c_in: usize) {
    let fp = FlatPlan::new(plan);
    let padded;
    let xp: &[f64] = if fp.padded(plan) {
        padded = fp.pad(plan, x, c_in);
        &padded
    } else {
        x
    };
    let yp = fp.scatter_out(plan, gy);
    let len = fp.len;
    fp.for_each_tap(plan, |widx, xi, yi, _| {
        gw[widx] += yp[yi..yi + len]
            .iter()
            .zip(&xp[xi..xi + len])
            .map(|(a, b)| a * b)
            .sum::<f64>();
    });
}

/// Transposed conv for non-overlapping windows: every input cell receives
/// exactly one product per output channel feeding it.
fn conv_transposed_tiled(plan: &ConvPlan, gy: &[f64], w: &[f64], gx: &mut [f64]) {
    let (ivol, ovol, kvol) = (plan.in_vol(), plan.out_vol(), plan.k_vol());
    for oc in 0..plan.c_out {
        let g = oc / plan.out_per_group;
        for icl in 0..plan.in_per_group {
            let ic = g * plan.in_per_group + icl;
            let wrow = &w[(oc * plan.in_per_group + icl) * kvol..][..kvol];
            for od in 0..plan.o[0] {
                for oh in 0..plan.o[1] {
                    let orow = oc * ovol + (od * plan.o[1] + oh) * plan.o[2];
                    let mut t = 0;
                    for kd in 0..plan.k[0] {
                        let id = od * plan.k[0] + kd;
                        for kh in 0..plan.k[1] {
                            let ih = oh * plan.k[1] + kh;
                            let irow = ic * ivol + (id * plan.n[1] + ih) * plan.n[2];
                            for kw in 0..plan.k[2] {
                                let wv = wrow[t];
                                t += 1;
                                for ow in 0..plan.o[2] {
                                    gx[irow + ow * plan.k[2] + kw] += wv * gy[orow + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Grouped convolution of `input` (`[C_in, spatial...]`) with `kernels`
/// (`[C_out, C_in / groups, kernel...]`). Output extent per axis is
/// `floor((N + 2 * pad - K) / S) + 1`.
pub fn conv(input: &Tensor, kernels: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let plan = ConvPlan::new(input.shape(), kernels.shape(), spec)?;
    let mut shape = vec![plan.c_out];
    shape.extend_from_slice(&plan.o[3 - spec.spatial_rank()..]);
    let mut out = Tensor::zeros(&shape);
    if unit_stride(&plan) {
        conv_flat(&plan, input.data(), kernels.data(), &mut out.data);
        record_macs(plan.macs());
        return Ok(out);
    }
    if spec.stride == spec.kernel && spec.padding.iter().all(|&p| p == 0) {
        conv_tiled(&plan, input.data(), kernels.data(), &mut out.data);
        record_macs(plan.macs());
        return Ok(out);
    }
    let (x, w, y) = (input.data(), kernels.data(), &mut out.data);
    let sw = plan.s[2];
    plan.for_each_row(|widx, orow, irow, w0, w1, iw0| {
        let wv = w[widx];
        let dst = &mut y[orow + w0..orow + w1];
        if sw == 1 {
            let src = &x[irow + iw0..irow + iw0 + dst.len()];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += wv * s);
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d += wv * x[irow + iw0 + j * sw];
            }
        }
    });
    record_macs(plan.macs());
    Ok(out)
}

/// Non-overlapping windows (stride equal to kernel, no padding). Each output
/// is a pairwise sum of its products, so windows whose products cancel in
/// pairs (Haar high bands on constant input) sum to exactly zero. Products
/// are formed a whole output row at a time and reduced row-wise, which keeps
/// the per-output summation order of [`pairwise_sum`].
fn conv_tiled(plan: &ConvPlan, x: &[f64], w: &[f64], y: &mut [f64]) {
    let (ivol, ovol, kvol) = (plan.in_vol(), plan.out_vol(), plan.k_vol());
    let taps = plan.in_per_group * kvol;
    let o2 = plan.o[2];
    let k2 = plan.k[2];
    let mut buf = vec![0.0; taps * o2];
    for oc in 0..plan.c_out {
        let g = oc / plan.out_per_group;
        let wrow = &w[oc * taps..(oc + 1) * taps];
        for od in 0..plan.o[0] {
            for oh in 0..plan.o[1] {
                let mut t = 0;
                for icl in 0..plan.in_per_group {
                    let ic = g * plan.in_per_group + icl;
                    for kd in 0..plan.k[0] {
                        let id = od * plan.k[0] + kd;
                        for kh in 0..plan.k[1] {
                            let ih = oh * plan.k[1] + kh;
                            let irow = &x[ic * ivol + (id * plan.n[1] + ih) * plan.n[2]..];
                            for kw in 0..k2 {
                                let wv = wrow[t];
                                let row = &mut buf[t * o2..(t + 1) * o2];
                                for (ow, r) in row.iter_mut().enumerate() {
                                    *r = wv * irow[ow * k2 + kw];
                                }
                                t += 1;
                            }
                        }
                    }
                }
                let mut n = taps;
                while n > 1 {
                    let half = n / 2;
                    for i in 0..half {
                        for j in 0..o2 {
                            buf[i * o2 + j] = buf[2 * i * o2 + j] + buf[(2 * i + 1) * o2 + j];
                        }
                    }
                    if n % 2 == 1 {
                        buf.copy_within((n - 1) * o2..n * o2, half * o2);
                        n = half + 1;
                    } else {
                        n = half;
                    }
                }
                let orow = oc * ovol + (od * plan.o[1] + oh) * o2;
                y[orow..orow + o2].copy_from_slice(&buf[..o2]);
            }
        }
    }
}

#[cfg(test)]
fn pairwise_sum(v: &mut [f64]) -> f64 {
    let mut n = v.len();
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            v[i] = v[2 * i] + v[2 * i + 1];
        }
        if n % 2 == 1 {
            v[half] = v[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    v.first().copied().unwrap_or(0.0)
}

/// Adjoint of [`conv`] for the same kernels and spec. The output extent is
/// the smallest input extent that maps onto `input`'s extent, i.e.
/// `(n - 1) * S - 2 * pad + K`.
pub fn conv_transposed(input: &Tensor, kernels: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let r = spec.spatial_rank();
    if input.rank() != r + 1 {
        return Err(shape_err!("input {:?} must have {r} spatial axes", input.shape()));
    }
    let mut out_sp = Vec::with_capacity(r);
    for a in 0..r {
        let full = (input.spatial()[a] - 1) * spec.stride[a] + spec.kernel[a];
        if full <= 2 * spec.padding[a] {
            return Err(shape_err!("transposed conv output along axis {a} would be empty"));
        }
        out_sp.push(full - 2 * spec.padding[a]);
    }
    conv_transposed_to(input, kernels, spec, &out_sp)
}

/// Adjoint of [`conv`] producing an explicit spatial extent, needed when the
/// forward conv discarded trailing cells that did not fill a stride.
pub fn conv_transposed_to(
    input: &Tensor,
    kernels: &Tensor,
    spec: &ConvSpec,
    out_spatial: &[usize],
) -> Result<Tensor> {
    if kernels.rank() < 2 {
        return Err(shape_err!("kernel tensor {:?} has too few axes", kernels.shape()));
    }
    let mut fwd_in = vec![kernels.dim(1) * spec.groups];
    fwd_in.extend_from_slice(out_spatial);
    let plan = ConvPlan::new(&fwd_in, kernels.shape(), spec)?;
    let expected: Vec<usize> = std::iter::once(plan.c_out)
        .chain(plan.o[3 - spec.spatial_rank()..].iter().copied())
        .collect();
    if input.shape() != expected.as_slice() {
        return Err(shape_err!(
            "transposed conv input {:?} does not match forward output {expected:?}",
            input.shape()
        ));
    }
    let mut out = Tensor::zeros(&fwd_in);
    if unit_stride(&plan) {
        out.data = conv_transposed_flat(&plan, input.data(), kernels.data(), fwd_in[0]);
        record_macs(plan.macs());
        return Ok(out);
    }
    if spec.stride == spec.kernel && spec.padding.iter().all(|&p| p == 0) {
        conv_transposed_tiled(&plan, input.data(), kernels.data(), &mut out.data);
        record_macs(plan.macs());
        return Ok(out);
    }
    let (gy, w, gx) = (input.data(), kernels.data(), &mut out.data);
    let sw = plan.s[2];
    plan.for_each_row(|widx, orow, irow, w0, w1, iw0| {
        let wv = w[widx];
        let src = &gy[orow + w0..orow + w1];
        if sw == 1 {
            let dst = &mut gx[irow + iw0..irow + iw0 + src.len()];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += wv * s);
        } else {
            for (j, s) in src.iter().enumerate() {
                gx[irow + iw0 + j * sw] += wv * s;
            }
        }
    });
    record_macs(plan.macs());
    Ok(out)
}

/// Gradient of `<conv(input, k), grad_out>` with respect to `k`.
pub fn conv_kernel_grad(
    input: &Tensor,
    grad_out: &Tensor,
    kernel_shape: &[usize],
    spec: &ConvSpec,
) -> Result<Tensor> {
    let plan = ConvPlan::new(input.shape(), kernel_shape, spec)?;
    let expected: Vec<usize> = std::iter::once(plan.c_out)
        .chain(plan.o[3 - spec.spatial_rank()..].iter().copied())
        .collect();
    if grad_out.shape() != expected.as_slice() {
        return Err(shape_err!(
            "gradient {:?} does not match conv output {expected:?}",
            grad_out.shape()
        ));
    }
    let mut gk = Tensor::zeros(kernel_shape);
    if unit_stride(&plan) {
        conv_kernel_grad_flat(&plan, input.data(), grad_out.data(), &mut gk.data, input.dim(0));
        record_macs(plan.macs());
        return Ok(gk);
    }
    let (x, gy, gw) = (input.data(), grad_out.data(), &mut gk.data);
    let sw = plan.s[2];
    plan.for_each_row(|widx, orow, irow, w0, w1, iw0| {
        let g = &gy[orow + w0..orow + w1];
        let acc: f64 = if sw == 1 {
            g.iter().zip(&x[irow + iw0..]).map(|(a, b)| a * b).sum()
        } else {
            g.iter()
                .enumerate()
                .map(|(j, a)| a * x[irow + iw0 + j * sw])
                .sum()
        };
        gw[widx] += acc;
    });
    record_macs(plan.macs());
    Ok(gk)
}

/// Mean over non-overlapping windows. The window must divide every spatial
/// extent; see [`pad_to_multiple`].
pub fn avg_pool(input: &Tensor, window: &[usize]) -> Result<Tensor> {
    let sp = input.spatial();
    if window.len() != sp.len() || window.contains(&0) {
        return Err(shape_err!("window {window:?} for spatial shape {sp:?}"));
    }
    for (a, (&w, &n)) in window.iter().zip(sp).enumerate() {
        if w > n {
            return Err(shape_err!("axis {a}: window {w} larger than input {n}"));
        }
        if n % w != 0 {
            return Err(shape_err!("axis {a}: window {w} does not divide {n}"));
        }
    }
    let c = input.channels();
    let (n3, w3) = (to3(sp), to3(window));
    let o3 = [n3[0] / w3[0], n3[1] / w3[1], n3[2] / w3[2]];
    let mut shape = vec![c];
    shape.extend(o3[3 - sp.len()..].iter());
    let mut out = Tensor::zeros(&shape);
    let inv = 1.0 / (w3.iter().product::<usize>() as f64);
    let x = input.data();
    for ch in 0..c {
        for z in 0..n3[0] {
            for y in 0..n3[1] {
                let irow = ((ch * n3[0] + z) * n3[1] + y) * n3[2];
                let orow = ((ch * o3[0] + z / w3[0]) * o3[1] + y / w3[1]) * o3[2];
                for xx in 0..n3[2] {
                    out.data[orow + xx / w3[2]] += x[irow + xx] * inv;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_pool`]: spreads each output gradient evenly over its window.
pub fn avg_pool_backward(grad_out: &Tensor, window: &[usize], input_spatial: &[usize]) -> Result<Tensor> {
    let c = grad_out.channels();
    let (n3, w3) = (to3(input_spatial), to3(window));
    let o3 = to3(grad_out.spatial());
    if (0..3).any(|a| n3[a] != o3[a] * w3[a]) {
        return Err(shape_err!(
            "pool gradient {:?} inconsistent with input {input_spatial:?} and window {window:?}",
            grad_out.shape()
        ));
    }
    let mut shape = vec![c];
    shape.extend_from_slice(input_spatial);
    let mut gx = Tensor::zeros(&shape);
    let inv = 1.0 / (w3.iter().product::<usize>() as f64);
    let g = grad_out.data();
    for ch in 0..c {
        for z in 0..n3[0] {
            for y in 0..n3[1] {
                let irow = ((ch * n3[0] + z) * n3[1] + y) * n3[2];
                let orow = ((ch * o3[0] + z / w3[0]) * o3[1] + y / w3[1]) * o3[2];
                for xx in 0..n3[2] {
                    gx.data[irow + xx] = g[orow + xx / w3[2]] * inv;
                }
            }
        }
    }
    Ok(gx)
}

/// Zero-pads the end of each spatial axis up to a multiple of `window`.
pub fn pad_to_multiple(input: &Tensor, window: &[usize]) -> Result<Tensor> {
    let pads: Vec<usize> = input
        .spatial()
        .iter()
        .zip(window)
        .map(|(&n, &w)| (w - n % w) % w)
        .collect();
    input.pad_end(&pads)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `grad` where the forward input was positive.
pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Result<Tensor> {
    input.check_same(grad, "relu_backward")?;
    Ok(Tensor {
        shape: grad.shape.clone(),
        data: input
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// Multiplies channel `c` by `factors[c]`.
pub fn scale_per_channel(input: &Tensor, factors: &[f64]) -> Result<Tensor> {
    if factors.len() != input.channels() {
        return Err(shape_err!(
            "{} scale factors for {} channels",
            factors.len(),
            input.channels()
        ));
    }
    let mut out = input.clone();
    for (c, &f) in factors.iter().enumerate() {
        out.channel_mut(c).iter_mut().for_each(|v| *v *= f);
    }
    Ok(out)
}

/// Per-channel inner products `<a_c, b_c>`, the factor gradient of
/// [`scale_per_channel`].
pub fn channel_dots(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    a.check_same(b, "channel_dots")?;
    Ok((0..a.channels())
        .map(|c| a.channel(c).iter().zip(b.channel(c)).map(|(x, y)| x * y).sum())
        .collect())
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Empty("channel concatenation".into()))?;
    let sp = first.spatial().to_vec();
    let mut c = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.spatial() != sp.as_slice() {
            return Err(shape_err!(
                "concat: spatial {:?} vs {:?}",
                p.spatial(),
                sp
            ));
        }
        c += p.channels();
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![c];
    shape.extend_from_slice(&sp);
    Tensor::new(&shape, data)
}

/// Inverse of [`concat_channels`].
pub fn split_channels(input: &Tensor, counts: &[usize]) -> Result<Vec<Tensor>> {
    if counts.iter().sum::<usize>() != input.channels() || counts.contains(&0) {
        return Err(shape_err!(
            "split {counts:?} of {} channels",
            input.channels()
        ));
    }
    let per = input.len() / input.channels();
    let mut start = 0;
    counts
        .iter()
        .map(|&n| {
            let mut shape = input.shape().to_vec();
            shape[0] = n;
            let t = Tensor::new(&shape, input.data()[start * per..(start + n) * per].to_vec());
            start += n;
            t
        })
        .collect()
}

/// Mean over every spatial cell, giving `[C]`.
pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let c = input.channels();
    let per = input.len() / c;
    Tensor::from_fn(&[c], |ch| input.channel(ch).iter().sum::<f64>() / per as f64)
}

pub fn global_avg_pool_backward(grad: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    if grad.shape() != [input_shape[0]] {
        return Err(shape_err!("pooled gradient {:?} for input {input_shape:?}", grad.shape()));
    }
    let per: usize = input_shape[1..].iter().product();
    let mut out = Tensor::zeros(input_shape);
    for c in 0..input_shape[0] {
        let g = grad.data[c] / per as f64;
        out.channel_mut(c).iter_mut().for_each(|v| *v = g);
    }
    Ok(out)
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(shape_err!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            out.data[i * n..(i + 1) * n]
                .iter_mut()
                .zip(brow)
                .for_each(|(o, bv)| *o += av * bv);
        }
    }
    record_macs((m * k * n) as u64);
    Ok(out)
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(shape_err!("transpose of {:?}", a.shape()));
    }
    let (m, n) = (a.dim(0), a.dim(1));
    Ok(Tensor::from_fn(&[n, m], |i| a.data[(i % m) * n + i / m]))
}
