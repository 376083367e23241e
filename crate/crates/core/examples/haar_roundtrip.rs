//! Multi-level Haar decomposition of a random volume, its energy budget per
//! level, and perfect reconstruction, with the 2-D and 3-D banks.
//!
//! cargo run --example haar_roundtrip

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wcnet::wavelet::{wt_cascade, HaarFilterBank};
use wcnet::Tensor;

fn main() -> wcnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, bank, shape) in [
        ("2-D bank on [3, 37, 64]", HaarFilterBank::two_d(), vec![3, 37, 64]),
        ("3-D bank on [2, 16, 24, 24]", HaarFilterBank::three_d(), vec![2, 16, 24, 24]),
    ] {
        let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
        let pyr = wt_cascade(&x, &bank, 3)?;
        println!("{name}: input energy {:.6}", x.norm_sq());
        for set in &pyr.levels {
            let highs: f64 = set.highs.iter().map(Tensor::norm_sq).sum();
            println!("  level {}: low {:?}, high-band energy {highs:.6}, padding {:?}", set.level, set.low.shape(), set.pad);
        }
        let total: f64 = pyr.coarsest().norm_sq() + pyr.levels.iter().flat_map(|s| &s.highs).map(Tensor::norm_sq).sum::<f64>();
        let back = pyr.reconstruct(&bank)?;
        println!("  coefficient energy {total:.6}, reconstruction error {:.2e}\n", back.max_abs_diff(&x)?);
    }
    Ok(())
}
