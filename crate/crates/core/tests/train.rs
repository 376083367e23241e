use wcnet::data::{gen_synthetic, prepare, LabeledPatchSet, PadMode, Split};
use wcnet::net::{NetworkConfig, NetworkParams};
use wcnet::train::{adam_update, evaluate, train, ConfusionMatrix, TrainConfig};
use wcnet::{Error, Tensor};

fn tiny_net(classes: usize, input: [usize; 3]) -> NetworkConfig {
    NetworkConfig {
        blocks: vec![1],
        base_growth: 2,
        stem_channels: 4,
        wt_levels: 1,
        bottleneck_width: 2,
        bottleneck_groups: 2,
        classes,
        input,
        ..Default::default()
    }
}

fn scene(classes: usize, seed: u64) -> LabeledPatchSet {
    let (cube, labels) = gen_synthetic(classes, 16, 16, 8, 0.05, seed).unwrap();
    prepare(&cube, &labels, 5, PadMode::Zero, [6.0, 1.0, 3.0], seed).unwrap().0
}

/// Textbook Adam on `f(p) = (p - 3)^2`, written out step by step.
#[test]
fn adam_trace_on_a_quadratic() {
    let tc = TrainConfig { lr: 0.1, ..Default::default() };
    let (mut p, mut m, mut v) = ([0.0f64], [0.0f64], [0.0f64]);
    let (mut q, mut mq, mut vq) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=10 {
        let g = [2.0 * (p[0] - 3.0)];
        adam_update(&mut p, &g, &mut m, &mut v, t, &tc);

        let gq = 2.0 * (q - 3.0);
        mq = 0.9 * mq + 0.1 * gq;
        vq = 0.999 * vq + 0.001 * gq * gq;
        let mhat = mq / (1.0 - 0.9f64.powi(t));
        let vhat = vq / (1.0 - 0.999f64.powi(t));
        q -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p[0] - q).abs() < 1e-14, "step {t}: {} vs {q}", p[0]);
    }
    // Every early step moves by almost exactly the step size towards 3.
    assert!(p[0] > 0.9 && p[0] < 1.01, "{}", p[0]);
}

#[test]
fn zero_patience_stops_after_first_non_improving_epoch() {
    let set = scene(3, 1);
    let cfg = tiny_net(3, set.patch_extent());
    let tc = TrainConfig { epochs: 30, patience: 0, lr: 0.05, ..Default::default() };
    let (_, h) = train(&cfg, NetworkParams::build(&cfg, 2).unwrap(), &set, &tc).unwrap();
    let losses: Vec<f64> = h.epochs.iter().map(|e| e.val_loss).collect();
    let n = losses.len();
    assert!(n < 30 && h.stopped_early, "ran {n} epochs");
    // Every epoch but the last set a new best; the last one did not.
    assert!(losses[..n - 1].windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    if n > 1 {
        assert!(losses[n - 1] >= losses[n - 2], "{losses:?}");
        assert_eq!(h.best_epoch, n - 1);
    } else {
        assert_eq!(h.best_epoch, 0);
    }
}

#[test]
fn same_seed_same_history() {
    let set = scene(3, 4);
    let cfg = tiny_net(3, set.patch_extent());
    let tc = TrainConfig { epochs: 2, ..Default::default() };
    let run = || train(&cfg, NetworkParams::build(&cfg, 5).unwrap(), &set, &tc).unwrap();
    let (pa, ha) = run();
    let (pb, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(pa, pb);
}

#[test]
fn logged_accuracy_equals_fresh_evaluation() {
    let set = scene(3, 6);
    let cfg = tiny_net(3, set.patch_extent());
    let tc = TrainConfig { epochs: 3, lr: 0.01, ..Default::default() };
    let (params, h) = train(&cfg, NetworkParams::build(&cfg, 7).unwrap(), &set, &tc).unwrap();
    assert!(h.best_epoch >= 1);
    let rec = &h.epochs[h.best_epoch - 1];
    let m = evaluate(&params, &cfg, &set, Split::Train).unwrap();
    assert_eq!(m.overall_accuracy, rec.train_acc);
    assert_eq!(m.loss, rec.train_loss);
    assert_eq!(evaluate(&params, &cfg, &set, Split::Val).unwrap().loss, rec.val_loss);
}

/// Two classes whose centre spectra differ by a wide margin along a fixed
/// direction; a logistic regression on the centre pixel separates them.
fn separable_set() -> LabeledPatchSet {
    let (b, m, n) = (6, 3, 3);
    let per = b * m * n;
    let count = 60;
    let mut data = Vec::with_capacity(count * per);
    let mut labels = Vec::new();
    let mut state = 12345u64;
    let mut noise = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) * 0.4
    };
    for i in 0..count {
        let y = i % 2;
        let sign = if y == 0 { -1.0 } else { 1.0 };
        for band in 0..b {
            let dir = if band % 2 == 0 { 1.0 } else { -1.0 };
            for _ in 0..m * n {
                data.push(sign * dir + noise());
            }
        }
        labels.push(y);
    }
    let splits = (0..count).map(|i| if i % 10 == 9 { Split::Val } else { Split::Train }).collect();
    LabeledPatchSet {
        patches: Tensor::new(&[count, 1, b, m, n], data).unwrap(),
        labels,
        positions: (0..count).map(|i| (i, 0)).collect(),
        splits,
        classes: 2,
        block: m,
        pad: 1,
    }
}

fn logistic_regression_accuracy(set: &LabeledPatchSet) -> f64 {
    let [b, m, n] = set.patch_extent();
    let per = b * m * n;
    let feats: Vec<Vec<f64>> = (0..set.len())
        .map(|i| (0..b).map(|band| set.patches.data()[i * per + (band * m + m / 2) * n + n / 2]).collect())
        .collect();
    let mut w = vec![0.0; b + 1];
    for _ in 0..200 {
        let mut g = vec![0.0; b + 1];
        for (x, &y) in feats.iter().zip(&set.labels) {
            let z: f64 = w[b] + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y as f64;
            for j in 0..b {
                g[j] += err * x[j];
            }
            g[b] += err;
        }
        for j in 0..=b {
            w[j] -= 0.1 * g[j] / set.len() as f64;
        }
    }
    let correct = feats
        .iter()
        .zip(&set.labels)
        .filter(|(x, &y)| {
            let z: f64 = w[b] + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) as usize == y
        })
        .count();
    correct as f64 / set.len() as f64
}

#[test]
fn separable_two_class_set_is_learned() {
    let set = separable_set();
    assert_eq!(logistic_regression_accuracy(&set), 1.0);
    let cfg = tiny_net(2, set.patch_extent());
    let tc = TrainConfig { epochs: 20, batch_size: 8, lr: 0.01, patience: 20, ..Default::default() };
    let (params, _) = train(&cfg, NetworkParams::build(&cfg, 3).unwrap(), &set, &tc).unwrap();
    let acc = evaluate(&params, &cfg, &set, Split::Train).unwrap().overall_accuracy;
    assert!(acc >= 0.99, "training accuracy {acc}");
}

#[test]
fn empty_splits_are_errors() {
    let mut set = scene(3, 8);
    let cfg = tiny_net(3, set.patch_extent());
    set.splits.iter_mut().for_each(|s| *s = Split::Train);
    let tc = TrainConfig { epochs: 1, ..Default::default() };
    assert!(matches!(
        train(&cfg, NetworkParams::build(&cfg, 1).unwrap(), &set, &tc),
        Err(Error::Empty(_))
    ));
    assert!(evaluate(&NetworkParams::build(&cfg, 1).unwrap(), &cfg, &set, Split::Test).is_err());
}

#[test]
fn metrics_are_bounded_and_label_permutation_invariant() {
    let rows = vec![vec![7, 2, 1], vec![0, 5, 4], vec![3, 3, 9]];
    let cm = ConfusionMatrix::from_rows(&rows).unwrap();
    let perm = [2, 0, 1];
    let mut permuted = vec![vec![0; 3]; 3];
    for t in 0..3 {
        for p in 0..3 {
            permuted[perm[t]][perm[p]] = rows[t][p];
        }
    }
    let pm = ConfusionMatrix::from_rows(&permuted).unwrap();
    assert_eq!(cm.overall_accuracy(), pm.overall_accuracy());
    assert!((cm.average_accuracy() - pm.average_accuracy()).abs() < 1e-15);
    assert!((cm.kappa() - pm.kappa()).abs() < 1e-15);
    for v in [cm.overall_accuracy(), cm.average_accuracy()] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!((-1.0..=1.0).contains(&cm.kappa()));
}
