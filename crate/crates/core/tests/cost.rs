use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wcnet::cost::{depthwise_flops, iwt_flops, wt_flops, wtconv_flops, wtconv_total_flops, CostQuery};
use wcnet::tensor::{conv, mac_count, reset_mac_count};
use wcnet::wavelet::{iwt, wt_cascade, HaarFilterBank};
use wcnet::wtconv::{wtconv_forward, WTConvConfig, WTConvParams, WtMode};
use wcnet::{ConvSpec, Tensor};

#[test]
fn depthwise_counter_agrees() {
    for (c, n, k, s) in [(1, 16, 3, 1), (3, 32, 5, 1), (2, 64, 7, 1), (2, 32, 3, 2), (1, 20, 5, 4)] {
        let x = Tensor::zeros(&[c, n, n]);
        let kern = Tensor::zeros(&[c, 1, k, k]);
        let spec = ConvSpec::same(&[k, k]).with_stride(&[s, s]).with_groups(c);
        reset_mac_count();
        conv(&x, &kern, &spec).unwrap();
        let q = CostQuery::square(c as u64, n as u64, k as u64, 0).with_stride(s as u64);
        assert_eq!(mac_count(), depthwise_flops(&q), "c={c} n={n} k={k} s={s}");
    }
}

#[test]
fn wtconv_counter_agrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cases = [
        (1usize, 16usize, 16usize, 3usize, 1usize, 1usize),
        (2, 32, 32, 5, 3, 1),
        (1, 64, 64, 5, 3, 1),
        (3, 17, 23, 3, 2, 1),
        (2, 12, 12, 3, 2, 5),
    ];
    for (c, h, w, k, levels, depth) in cases {
        let cfg = WTConvConfig::new(levels, k, c);
        let p = WTConvParams::init(&cfg, &mut rng).unwrap();
        let shape = if depth == 1 { vec![c, h, w] } else { vec![c, depth, h, w] };
        let x = Tensor::zeros(&shape);
        reset_mac_count();
        wtconv_forward(&x, &cfg, &p).unwrap();
        let q = CostQuery {
            channels: c as u64,
            width: w as u64,
            height: h as u64,
            kernel_w: k as u64,
            kernel_h: k as u64,
            stride_w: 1,
            stride_h: 1,
            levels: levels as u32,
            depth: depth as u64,
            mode: WtMode::Spatial2d,
        };
        assert_eq!(mac_count(), wtconv_total_flops(&q), "{shape:?} l={levels}");
    }

    let cfg = WTConvConfig::new(2, 3, 2).with_mode(WtMode::Volumetric3d);
    let p = WTConvParams::init(&cfg, &mut rng).unwrap();
    reset_mac_count();
    wtconv_forward(&Tensor::zeros(&[2, 8, 12, 10]), &cfg, &p).unwrap();
    let q = CostQuery::square(2, 10, 3, 2)
        .with_depth(8)
        .with_mode(WtMode::Volumetric3d);
    let q = CostQuery { height: 12, ..q };
    assert_eq!(mac_count(), wtconv_total_flops(&q));
}

#[test]
fn transform_counters_agree() {
    let bank = HaarFilterBank::two_d();
    for (n, levels) in [(16usize, 3u32), (64, 4), (24, 2)] {
        let x = Tensor::zeros(&[2, n, n]);
        reset_mac_count();
        let p = wt_cascade(&x, &bank, levels as usize).unwrap();
        let q = CostQuery::square(2, n as u64, 1, levels);
        assert_eq!(mac_count(), wt_flops(&q));
        reset_mac_count();
        for set in &p.levels {
            iwt(set, &bank).unwrap();
        }
        assert_eq!(mac_count(), iwt_flops(&q));
    }
}

#[test]
fn level_zero_equals_depthwise() {
    let q = CostQuery::square(4, 48, 5, 0);
    assert_eq!(wtconv_flops(&q), depthwise_flops(&q));
}
