use wcnet::data::{
    gen_synthetic, nearest_centroid_accuracy, pad_and_extract, prepare, read_cube, stratified_split, write_cube,
    write_labels, BandStats, PadMode, Split,
};
use wcnet::Error;

#[test]
fn default_scene_is_separable_by_nearest_centroid() {
    let (cube, labels) = gen_synthetic(5, 64, 64, 32, 0.05, 42).unwrap();
    assert_eq!(labels.classes(), 5);
    let (set, _) = prepare(&cube, &labels, 9, PadMode::Zero, [6.0, 1.0, 3.0], 42).unwrap();
    assert_eq!(set.len(), 64 * 64);
    let acc = nearest_centroid_accuracy(&set).unwrap();
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn generation_is_byte_deterministic() {
    let bytes = |seed| {
        let (c, l) = gen_synthetic(4, 20, 24, 12, 0.05, seed).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_cube(&c, &mut a).unwrap();
        write_labels(&l, &mut b).unwrap();
        (a, b)
    };
    assert_eq!(bytes(7), bytes(7));
    assert_ne!(bytes(7).0, bytes(8).0);
}

#[test]
fn centre_pixel_reads_back_the_spectrum() {
    let (cube, labels) = gen_synthetic(3, 10, 12, 6, 0.1, 1).unwrap();
    for (block, mode) in [(1, PadMode::Zero), (5, PadMode::Zero), (7, PadMode::Mirror)] {
        let set = pad_and_extract(&cube, &labels, block, mode).unwrap();
        assert_eq!(set.patch_extent(), [6, block, block]);
        assert_eq!(set.pad, (block - 1) / 2);
        let per = 6 * block * block;
        for (i, &(r, c)) in set.positions.iter().enumerate() {
            let centre: Vec<f32> = (0..6)
                .map(|b| set.patches.data()[i * per + (b * block + block / 2) * block + block / 2] as f32)
                .collect();
            assert_eq!(centre, cube.spectrum(r, c));
        }
    }
}

#[test]
fn block_larger_than_padded_image_is_rejected() {
    let (cube, labels) = gen_synthetic(2, 3, 3, 4, 0.0, 1).unwrap();
    assert!(pad_and_extract(&cube, &labels, 9, PadMode::Zero).is_ok());
    assert!(pad_and_extract(&cube, &labels, 9, PadMode::Mirror).is_err());
}

#[test]
fn splits_are_stratified_and_seed_invariant_in_size() {
    let labels: Vec<usize> = (0..230).map(|i| if i < 100 { 0 } else if i < 200 { 1 } else { 2 }).collect();
    let a = stratified_split(&labels, 3, [6.0, 1.0, 3.0], 1).unwrap();
    let b = stratified_split(&labels, 3, [6.0, 1.0, 3.0], 2).unwrap();
    assert_ne!(a, b);
    for k in 0..3 {
        for s in [Split::Train, Split::Val, Split::Test] {
            let count = |v: &[Split]| labels.iter().zip(v).filter(|(&l, &x)| l == k && x == s).count();
            assert_eq!(count(&a), count(&b));
        }
    }
    let c0 = |s| labels.iter().zip(&a).filter(|(&l, &x)| l == 0 && x == s).count();
    assert_eq!((c0(Split::Train), c0(Split::Val), c0(Split::Test)), (60, 10, 30));
    assert_eq!(stratified_split(&labels, 3, [6.0, 1.0, 3.0], 1).unwrap(), a);
    let all = stratified_split(&labels, 3, [1.0, 0.0, 0.0], 1).unwrap();
    assert!(all.iter().all(|&s| s == Split::Train));
}

#[test]
fn tiny_class_falls_back_to_training() {
    let labels = vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1];
    let s = stratified_split(&labels, 2, [6.0, 1.0, 3.0], 3).unwrap();
    assert_eq!(&s[10..], &[Split::Train, Split::Train]);
}

#[test]
fn normalization_uses_training_pixels_only() {
    let (cube, labels) = gen_synthetic(3, 16, 16, 5, 0.05, 9).unwrap();
    let (set, stats) = prepare(&cube, &labels, 1, PadMode::Zero, [6.0, 1.0, 3.0], 9).unwrap();
    let train: Vec<(usize, usize)> = set
        .indices(Split::Train)
        .into_iter()
        .map(|i| set.positions[i])
        .collect();
    let norm = stats.apply(&cube).unwrap();
    assert_eq!(BandStats::from_pixels(&cube, &train).unwrap(), stats);
    for b in 0..5 {
        let v: Vec<f64> = train.iter().map(|&(r, c)| norm.get(b, r, c) as f64).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4, "band {b}: {mean} {var}");
    }
}

#[test]
fn truncated_cube_is_an_error() {
    let (cube, _) = gen_synthetic(2, 4, 4, 3, 0.0, 1).unwrap();
    let mut buf = Vec::new();
    write_cube(&cube, &mut buf).unwrap();
    buf.truncate(buf.len() - 1);
    let path = std::path::Path::new("cube.hsic");
    assert!(matches!(read_cube(buf.as_slice(), path), Err(Error::Truncated(_))));
}
