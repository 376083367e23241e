//! Parameter count and measured receptive field of wavelet conv layers: the
//! kernel count grows linearly with the number of levels while the field
//! doubles with each one.
//!
//! cargo run --example receptive_field

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wcnet::wtconv::{param_count, receptive_field, wtconv_forward, WTConvConfig, WTConvParams};
use wcnet::Tensor;

/// Input columns on the centre row whose impulse reaches the centre output.
fn measured_extent(cfg: &WTConvConfig, p: &WTConvParams, size: usize, centre: usize) -> usize {
    (0..size)
        .filter(|&j| {
            let mut x = Tensor::zeros(&[1, size, size]);
            x.set(&[0, centre, j], 1.0);
            wtconv_forward(&x, cfg, p).unwrap().get(&[0, centre, centre]).abs() > 1e-12
        })
        .count()
}

fn main() -> wcnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    println!("{:>6} {:>6} {:>8} {:>8} {:>9}", "levels", "kernel", "weights", "field", "measured");
    for k in [3, 5] {
        for levels in 1..=3 {
            let cfg = WTConvConfig::new(levels, k, 1).with_residual(false);
            let p = WTConvParams::init(&cfg, &mut rng)?;
            let rf = receptive_field(&cfg);
            let got = measured_extent(&cfg, &p, 2 * rf, rf + (1 << levels) / 2);
            println!("{levels:>6} {k:>6} {:>8} {rf:>8} {got:>9}", param_count(&cfg));
        }
    }
    Ok(())
}
