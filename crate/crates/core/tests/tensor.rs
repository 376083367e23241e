mod common;

use common::{brute_conv3d_same, haar_plane, inv_haar_plane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wcnet::tensor::{conv, conv_transposed_to};
use wcnet::wavelet::{iwt, wt, HaarFilterBank, SubbandSet};
use wcnet::{ConvSpec, Tensor};

fn integers(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-4i32..=4) as f64).collect()).unwrap()
}

#[test]
fn same_padded_conv_matches_brute_force_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (ci, co, d, h, w, k) in [(1, 1, 3, 5, 4, 3), (2, 3, 4, 6, 6, 3), (4, 2, 8, 8, 8, 3), (3, 2, 5, 7, 6, 5), (4, 4, 8, 8, 8, 1)] {
        let x = integers(&[ci, d, h, w], &mut rng);
        let kern = integers(&[co, ci, k, k, k], &mut rng);
        let y = conv(&x, &kern, &ConvSpec::same(&[k, k, k])).unwrap();
        assert_eq!(y, brute_conv3d_same(&x, &kern), "{ci}x{d}x{h}x{w} k={k}");
    }
}

#[test]
fn conv_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let spec = ConvSpec::same(&[3, 3]).with_stride(&[rng.random_range(1..=2), 1]).with_groups(2);
        let k = Tensor::uniform(&[4, 1, 3, 3], -1.0, 1.0, &mut rng);
        let x = Tensor::uniform(&[2, 7, 6], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[2, 7, 6], -1.0, 1.0, &mut rng);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let lhs = conv(&x.scale(a).add(&y.scale(b)).unwrap(), &k, &spec).unwrap();
        let rhs = conv(&x, &k, &spec).unwrap().scale(a).add(&conv(&y, &k, &spec).unwrap().scale(b)).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }
}

#[test]
fn transposed_conv_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..150 {
        let rank = rng.random_range(1..=3);
        let groups = rng.random_range(1..=2);
        let cin = groups * rng.random_range(1..=3);
        let cout = groups * rng.random_range(1..=2);
        let kernel: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=4)).collect();
        let stride: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=3)).collect();
        let padding: Vec<usize> = kernel.iter().map(|&k| rng.random_range(0..k)).collect();
        let spatial: Vec<usize> = kernel.iter().map(|&k| k + rng.random_range(0..7)).collect();
        let spec = ConvSpec::new(&kernel).with_stride(&stride).with_padding(&padding).with_groups(groups);
        let a = Tensor::uniform(&[&[cin][..], &spatial].concat(), -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[&[cout, cin / groups][..], &kernel].concat(), -1.0, 1.0, &mut rng);
        let y = conv(&a, &k, &spec).unwrap();
        let b = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let lhs = y.dot(&b).unwrap();
        let rhs = a.dot(&conv_transposed_to(&b, &k, &spec, &spatial).unwrap()).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "case {case}: {lhs} vs {rhs}");
    }
}

fn planes(set: &SubbandSet, c: usize) -> [Vec<f64>; 4] {
    let mut bands = vec![set.low.channel(c).to_vec()];
    bands.extend(set.highs.iter().map(|t| t.channel(c).to_vec()));
    bands.try_into().unwrap()
}

#[test]
fn two_d_transform_matches_block_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bank = HaarFilterBank::two_d();
    for (c, h, w) in [(1, 2, 2), (3, 6, 8), (2, 16, 10)] {
        let x = integers(&[c, h, w], &mut rng);
        let set = wt(&x, &bank).unwrap();
        for ch in 0..c {
            let want = haar_plane(x.channel(ch), h, w);
            assert_eq!(planes(&set, ch), want);
            assert_eq!(inv_haar_plane(&want, h / 2, w / 2), x.channel(ch));
        }
        assert_eq!(iwt(&set, &bank).unwrap(), x);
    }
}

#[test]
fn transforms_preserve_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (bank, shape) in [
        (HaarFilterBank::two_d(), vec![3, 12, 20]),
        (HaarFilterBank::two_d(), vec![2, 3, 8, 8]),
        (HaarFilterBank::three_d(), vec![2, 6, 8, 10]),
    ] {
        for _ in 0..10 {
            let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
            let e = wt(&x, &bank).unwrap().energy();
            assert!((e - x.norm_sq()).abs() <= 1e-12 * x.norm_sq());
        }
    }
}
