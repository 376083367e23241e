mod common;

use common::{central_diff, rel_err, straight_line_wtconv};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wcnet::wtconv::{
    param_count, receptive_field, wtconv_backward, wtconv_forward, WTConvConfig, WTConvParams,
    WtMode,
};
use wcnet::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_params(cfg: &WTConvConfig, seed: u64) -> WTConvParams {
    let mut r = rng(seed);
    let mut p = WTConvParams::init(cfg, &mut r).unwrap();
    for s in &mut p.level_scales {
        *s = Tensor::uniform(s.shape(), 0.5, 1.5, &mut r);
    }
    p
}

#[test]
fn matches_unrolled_oracle() {
    for (levels, c, size, seed) in [(1, 1, 4, 1), (1, 2, 6, 2), (2, 1, 8, 3), (2, 3, 12, 4), (3, 2, 16, 5)] {
        let cfg = WTConvConfig::new(levels, 3, c);
        let p = random_params(&cfg, seed);
        let x = Tensor::uniform(&[c, size, size], -1.0, 1.0, &mut rng(seed + 100));
        let got = wtconv_forward(&x, &cfg, &p).unwrap();
        let kernels: Vec<Vec<f64>> = p.level_kernels.iter().map(|t| t.data().to_vec()).collect();
        let scales: Vec<Vec<f64>> = p.level_scales.iter().map(|t| t.data().to_vec()).collect();
        let want = straight_line_wtconv(
            &x,
            3,
            &kernels,
            &scales,
            p.base_kernel.as_ref().map(|b| b.data()),
        );
        let err = got.max_abs_diff(&want).unwrap();
        assert!(err <= 1e-10, "levels={levels} c={c}: {err}");
    }
}

fn loss(x: &Tensor, cfg: &WTConvConfig, p: &WTConvParams) -> f64 {
    0.5 * wtconv_forward(x, cfg, p).unwrap().norm_sq()
}

/// Largest block-wise relative error between analytic and central-difference
/// gradients of `0.5 * ||y||^2`.
pub fn gradient_check(cfg: &WTConvConfig, shape: &[usize], seed: u64) -> f64 {
    let p = random_params(cfg, seed);
    let x = Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed ^ 0xabc));
    let y = wtconv_forward(&x, cfg, &p).unwrap();
    let (gx, gp) = wtconv_backward(&x, cfg, &p, &y).unwrap();

    let mut worst = 0.0f64;
    let mut xd = x.data().to_vec();
    let fd = central_diff(&mut xd, 1e-5, |d| {
        loss(&Tensor::new(x.shape(), d.to_vec()).unwrap(), cfg, &p)
    });
    worst = worst.max(rel_err(gx.data(), &fd));

    let analytic = gp.blocks();
    for (bi, (name, g)) in analytic.iter().enumerate() {
        let mut pp = p.clone();
        let mut data = p.blocks()[bi].1.data().to_vec();
        let fd = central_diff(&mut data, 1e-5, |d| {
            let shape = pp.blocks()[bi].1.shape().to_vec();
            *pp.blocks_mut()[bi].1 = Tensor::new(&shape, d.to_vec()).unwrap();
            loss(&x, cfg, &pp)
        });
        let e = rel_err(g.data(), &fd);
        assert!(e <= 1e-4, "block {name}: {e}");
        worst = worst.max(e);
    }
    worst
}

#[test]
fn finite_difference_level2() {
    let cfg = WTConvConfig::new(2, 3, 2);
    let e = gradient_check(&cfg, &[2, 8, 8], 21);
    assert!(e <= 1e-4, "{e}");
}

#[test]
fn finite_difference_odd_and_volumetric() {
    let cases = [
        (WTConvConfig::new(2, 3, 1), vec![1, 7, 9]),
        (WTConvConfig::new(1, 5, 2).with_residual(false), vec![2, 3, 6, 6]),
        (WTConvConfig::new(1, 3, 1).with_mode(WtMode::Volumetric3d), vec![1, 4, 5, 4]),
    ];
    for (i, (cfg, shape)) in cases.iter().enumerate() {
        let e = gradient_check(cfg, shape, 30 + i as u64);
        assert!(e <= 1e-4, "{cfg:?}: {e}");
    }
}

/// Output cells along the row through `(row, col)` that respond to a unit
/// impulse at each input column.
fn influence_columns(cfg: &WTConvConfig, size: usize, row: usize, col: usize, seed: u64) -> Vec<usize> {
    let p = random_params(cfg, seed);
    (0..size)
        .filter(|&j| {
            let mut x = Tensor::zeros(&[1, size, size]);
            x.set(&[0, row, j], 1.0);
            let y = wtconv_forward(&x, cfg, &p).unwrap();
            y.get(&[0, row, col]).abs() > 1e-12
        })
        .collect()
}

#[test]
fn support_is_aligned_window_of_receptive_field() {
    for (levels, k) in [(1, 3), (2, 3), (2, 5)] {
        let cfg = WTConvConfig::new(levels, k, 1);
        let rf = receptive_field(&cfg);
        let size = 4 * rf;
        let block = 1 << levels;
        // A cell in the middle of its coarsest block sees half the field on
        // each side.
        let col = 2 * rf + block / 2;
        let cols = influence_columns(&cfg, size, size / 2, col, 77);
        assert_eq!(cols.len(), rf, "levels={levels} k={k}: {cols:?}");
        assert!(cols.windows(2).all(|w| w[1] == w[0] + 1));
        let half = rf / 2;
        assert_eq!(*cols.first().unwrap(), col - half);
        assert_eq!(*cols.last().unwrap(), col + half - 1);
    }
}

#[test]
fn param_walk_matches_law() {
    let mut r = rng(3);
    for levels in 0..=4 {
        for c in [1, 3, 16] {
            for k in [3, 5] {
                let cfg = WTConvConfig::new(levels, k, c);
                let p = WTConvParams::init(&cfg, &mut r).unwrap();
                assert_eq!(p.wavelet_kernel_count(), param_count(&cfg));
                assert_eq!(param_count(&cfg), levels * 4 * c * k * k);
                assert_eq!(p.scale_count(), levels * 4 * c);
                assert_eq!(p.residual_count(), c * k * k);
            }
        }
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
    #[test]
    fn output_shape_equals_input_shape(
        levels in 0usize..3,
        c in 1usize..3,
        h in 4usize..14,
        w in 4usize..14,
        depth in proptest::option::of(1usize..4),
        seed in 0u64..1000,
    ) {
        let cfg = WTConvConfig::new(levels, 3, c);
        let p = WTConvParams::init(&cfg, &mut rng(seed)).unwrap();
        let shape: Vec<usize> = match depth {
            Some(d) => vec![c, d, h, w],
            None => vec![c, h, w],
        };
        let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng(seed + 1));
        let y = wtconv_forward(&x, &cfg, &p).unwrap();
        proptest::prop_assert_eq!(y.shape(), x.shape());
        proptest::prop_assert!(y.all_finite());
    }
}
