//! Property suites behind `wcnet selfcheck`: perfect reconstruction, energy
//! preservation, conv adjointness and analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::net::{backward, forward_train, softmax_cross_entropy, NetworkConfig, NetworkParams};
use crate::tensor::{conv, conv_transposed_to, ConvSpec, Tensor};
use crate::wavelet::{wt_cascade, BankDims, HaarFilterBank};
use crate::wtconv::{wtconv_backward, wtconv_forward, WTConvConfig, WTConvParams, WtMode};

#[derive(Debug, Clone)]
pub struct SelfcheckOptions {
    /// Random tensors per bank in the reconstruction and energy sweeps.
    pub cases: usize,
    /// Largest transformed extent of a random 2-D input.
    pub max_extent: usize,
    pub max_channels: usize,
    pub max_levels: usize,
    /// Random shape/spec combinations in the adjoint sweep.
    pub adjoint_cases: usize,
    /// Entries of [`gradient_grid`] to run.
    pub gradient_configs: usize,
    pub seed: u64,
    /// Added to one Haar filter tap; any non-zero value must make the
    /// wavelet suites fail.
    pub filter_perturbation: f64,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            cases: 1000,
            max_extent: 64,
            max_channels: 8,
            max_levels: 4,
            adjoint_cases: 200,
            gradient_configs: usize::MAX,
            seed: 0,
            filter_perturbation: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    /// Largest observed error, in the check's own measure.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfcheckReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }
}

pub const RECONSTRUCTION_TOL: f64 = 1e-9;
pub const ENERGY_TOL: f64 = 1e-9;
pub const ADJOINT_TOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-4;

pub fn run(opts: &SelfcheckOptions) -> Result<SelfcheckReport> {
    let mut checks = Vec::new();
    for dims in [BankDims::Two, BankDims::Three] {
        let bank = perturbed(HaarFilterBank::new(dims), opts.filter_perturbation)?;
        let (rec, energy) = wavelet_sweep(&bank, opts)?;
        checks.push(rec);
        checks.push(energy);
    }
    checks.push(adjoint_sweep(opts)?);
    let grid = gradient_grid();
    let n = opts.gradient_configs.min(grid.len());
    let mut worst = 0.0f64;
    for case in &grid[..n] {
        worst = worst.max(case.max_rel_error()?);
    }
    checks.push(CheckOutcome {
        name: "gradient".into(),
        cases: n,
        worst,
        tolerance: GRADIENT_TOL,
    });
    Ok(SelfcheckReport { checks })
}

fn perturbed(bank: HaarFilterBank, eps: f64) -> Result<HaarFilterBank> {
    if eps == 0.0 {
        return Ok(bank);
    }
    let mut f = bank.filters().clone();
    f.data_mut()[0] += eps;
    bank.with_filters(f)
}

/// A random input shape `[C, spatial...]` deep enough for `levels`.
fn random_shape(rng: &mut ChaCha8Rng, dims: BankDims, levels: usize, opts: &SelfcheckOptions) -> Vec<usize> {
    let cap = match dims {
        BankDims::Two => opts.max_extent,
        BankDims::Three => (opts.max_extent / 4).max(8),
    };
    let lo = (1usize << (levels - 1)) + 1;
    let hi = cap.max(1 << levels);
    let mut shape = vec![rng.random_range(1..=opts.max_channels)];
    for _ in 0..dims.axes() {
        shape.push(rng.random_range(lo..=hi));
    }
    shape
}

fn wavelet_sweep(bank: &HaarFilterBank, opts: &SelfcheckOptions) -> Result<(CheckOutcome, CheckOutcome)> {
    let dims = bank.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ dims.axes() as u64);
    let (mut rec, mut energy) = (0.0f64, 0.0f64);
    for _ in 0..opts.cases {
        let levels = rng.random_range(1..=opts.max_levels);
        let shape = random_shape(&mut rng, dims, levels, opts);
        let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
        let pyr = wt_cascade(&x, bank, levels)?;
        rec = rec.max(pyr.reconstruct(bank)?.max_abs_diff(&x)?);
        let mut e = pyr.coarsest().norm_sq();
        for set in &pyr.levels {
            e += set.highs.iter().map(Tensor::norm_sq).sum::<f64>();
        }
        let ex = x.norm_sq();
        energy = energy.max((e.sqrt() - ex.sqrt()).abs() / ex.sqrt());
    }
    let tag = format!("{}d", dims.axes());
    Ok((
        CheckOutcome {
            name: format!("reconstruction-{tag}"),
            cases: opts.cases,
            worst: rec,
            tolerance: RECONSTRUCTION_TOL,
        },
        CheckOutcome {
            name: format!("energy-{tag}"),
            cases: opts.cases,
            worst: energy,
            tolerance: ENERGY_TOL,
        },
    ))
}

/// `<conv(a, k), b>` against `<a, conv_transposed(b, k)>` over random specs.
fn adjoint_sweep(opts: &SelfcheckOptions) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(7));
    let mut worst = 0.0f64;
    for _ in 0..opts.adjoint_cases {
        let rank = rng.random_range(1..=3);
        let groups = rng.random_range(1..=3);
        let cin = groups * rng.random_range(1..=2);
        let cout = groups * rng.random_range(1..=2);
        let kernel: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=3)).collect();
        let stride: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=2)).collect();
        let padding: Vec<usize> = kernel.iter().map(|&k| rng.random_range(0..k)).collect();
        let spatial: Vec<usize> = kernel.iter().map(|&k| k + rng.random_range(0..6)).collect();
        let spec = ConvSpec::new(&kernel)
            .with_stride(&stride)
            .with_padding(&padding)
            .with_groups(groups);
        let mut ashape = vec![cin];
        ashape.extend_from_slice(&spatial);
        let mut kshape = vec![cout, cin / groups];
        kshape.extend_from_slice(&kernel);
        let a = Tensor::uniform(&ashape, -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&kshape, -1.0, 1.0, &mut rng);
        let y = conv(&a, &k, &spec)?;
        let b = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let lhs = y.dot(&b)?;
        let rhs = a.dot(&conv_transposed_to(&b, &k, &spec, &spatial)?)?;
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
    }
    Ok(CheckOutcome {
        name: "adjoint".into(),
        cases: opts.adjoint_cases,
        worst,
        tolerance: ADJOINT_TOL,
    })
}

/// One finite-difference configuration.
#[derive(Debug, Clone)]
pub enum GradientCase {
    WtConv {
        cfg: WTConvConfig,
        spatial: Vec<usize>,
        seed: u64,
    },
    Network {
        cfg: NetworkConfig,
        batch: usize,
        seed: u64,
        /// Scalars sampled per parameter tensor.
        per_entry: usize,
    },
}

const FD_STEP: f64 = 1e-6;
/// The layer output is linear in each single scalar, so central differences
/// are exact for any step; a large one keeps rounding noise negligible.
const LINEAR_STEP: f64 = 1e-2;

fn rel(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

impl GradientCase {
    /// Worst relative error between analytic and central-difference
    /// gradients over the sampled scalars.
    pub fn max_rel_error(&self) -> Result<f64> {
        match self {
            GradientCase::WtConv { cfg, spatial, seed } => wtconv_case(cfg, spatial, *seed),
            GradientCase::Network {
                cfg,
                batch,
                seed,
                per_entry,
            } => network_case(cfg, *batch, *seed, *per_entry),
        }
    }
}

fn wtconv_case(cfg: &WTConvConfig, spatial: &[usize], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![cfg.channels];
    shape.extend_from_slice(spatial);
    let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
    let mut p = WTConvParams::init(cfg, &mut rng)?;
    for s in &mut p.level_scales {
        *s = Tensor::uniform(s.shape(), 0.5, 1.5, &mut rng);
    }
    let u = Tensor::uniform(wtconv_forward(&x, cfg, &p)?.shape(), -1.0, 1.0, &mut rng);
    let (gx, gp) = wtconv_backward(&x, cfg, &p, &u)?;
    let loss = |x: &Tensor, p: &WTConvParams| -> Result<f64> { wtconv_forward(x, cfg, p)?.dot(&u) };

    let mut worst = 0.0f64;
    let mut xv = x.clone();
    for i in sample(x.len(), 16) {
        let orig = xv.data()[i];
        xv.data_mut()[i] = orig + LINEAR_STEP;
        let up = loss(&xv, &p)?;
        xv.data_mut()[i] = orig - LINEAR_STEP;
        let down = loss(&xv, &p)?;
        xv.data_mut()[i] = orig;
        worst = worst.max(rel(gx.data()[i], (up - down) / (2.0 * LINEAR_STEP)));
    }
    let mut q = p.clone();
    let blocks = p.blocks().len();
    for b in 0..blocks {
        let n = q.blocks()[b].1.len();
        for i in sample(n, 8) {
            let orig = q.blocks()[b].1.data()[i];
            q.blocks_mut()[b].1.data_mut()[i] = orig + LINEAR_STEP;
            let up = loss(&x, &q)?;
            q.blocks_mut()[b].1.data_mut()[i] = orig - LINEAR_STEP;
            let down = loss(&x, &q)?;
            q.blocks_mut()[b].1.data_mut()[i] = orig;
            worst = worst.max(rel(gp.blocks()[b].1.data()[i], (up - down) / (2.0 * LINEAR_STEP)));
        }
    }
    Ok(worst)
}

fn network_case(cfg: &NetworkConfig, batch: usize, seed: u64, per_entry: usize) -> Result<f64> {
    let p = NetworkParams::build(cfg, seed)?;
    let [l, m, n] = cfg.input;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let x = Tensor::uniform(&[batch, 1, l, m, n], -1.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.classes).collect();
    let (_, grads) = backward(&p, cfg, &x, &labels)?;
    let loss = |q: &NetworkParams| -> Result<f64> {
        let c = forward_train(q, cfg, &x)?;
        Ok(softmax_cross_entropy(c.logits(), &labels)?.0)
    };
    let mut worst = 0.0f64;
    let mut q = p.clone();
    for ei in 0..p.len() {
        if !p.entries()[ei].trainable {
            continue;
        }
        for i in sample(p.entries()[ei].tensor.len(), per_entry) {
            let orig = p.entries()[ei].tensor.data()[i];
            q.entries_mut()[ei].tensor.data_mut()[i] = orig + FD_STEP;
            let up = loss(&q)?;
            q.entries_mut()[ei].tensor.data_mut()[i] = orig - FD_STEP;
            let down = loss(&q)?;
            q.entries_mut()[ei].tensor.data_mut()[i] = orig;
            worst = worst.max(rel(grads.entries()[ei].tensor.data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

/// Up to `k` evenly spread indices below `n`.
fn sample(n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    (0..k).map(|j| j * n / k).collect()
}

/// The seeded grid of finite-difference configurations: WTConv layers over
/// levels, kernels, modes and the residual switch, then tiny networks.
pub fn gradient_grid() -> Vec<GradientCase> {
    let mut grid = Vec::new();
    let mut seed = 100;
    for mode in [WtMode::Spatial2d, WtMode::Volumetric3d] {
        for (levels, kernel) in [(1, 3), (2, 3), (1, 5), (3, 3)] {
            for residual in [true, false] {
                let spatial = match mode {
                    WtMode::Spatial2d => vec![3, 9, 10],
                    WtMode::Volumetric3d => vec![8, 7, 8],
                };
                grid.push(GradientCase::WtConv {
                    cfg: WTConvConfig::new(levels, kernel, 2).with_mode(mode).with_residual(residual),
                    spatial,
                    seed,
                });
                seed += 1;
            }
        }
    }
    let small = |blocks: Vec<usize>, input: [usize; 3], classes: usize| NetworkConfig {
        blocks,
        base_growth: 2,
        stem_channels: 4,
        wt_levels: 1,
        bottleneck_width: 2,
        bottleneck_groups: 2,
        classes,
        input,
        ..Default::default()
    };
    for cfg in [
        small(vec![1], [4, 5, 5], 3),
        small(vec![2, 1], [4, 5, 5], 3),
        NetworkConfig {
            compression: 0.5,
            ..small(vec![1, 1], [4, 6, 6], 2)
        },
        NetworkConfig {
            wt_mode: WtMode::Volumetric3d,
            ..small(vec![1, 1], [4, 4, 4], 2)
        },
        NetworkConfig {
            wt_levels: 2,
            ..small(vec![1], [3, 7, 7], 4)
        },
    ] {
        grid.push(GradientCase::Network {
            cfg,
            batch: 3,
            seed,
            per_entry: 4,
        });
        seed += 1;
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SelfcheckOptions {
        SelfcheckOptions {
            cases: 40,
            max_extent: 24,
            max_channels: 3,
            adjoint_cases: 40,
            gradient_configs: 3,
            ..Default::default()
        }
    }

    #[test]
    fn clean_build_passes() {
        let r = run(&quick()).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn perturbed_filters_fail() {
        let r = run(&SelfcheckOptions {
            filter_perturbation: 1e-3,
            ..quick()
        })
        .unwrap();
        assert!(!r.passed());
        assert!(r.checks.iter().filter(|c| c.name.starts_with("reconstruction")).all(|c| !c.passed()));
    }
}
