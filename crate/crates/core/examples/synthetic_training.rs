//! Trains the desk-scale network on a generated scene and reports test
//! metrics, checking separability with a nearest-centroid classifier first.
//!
//! cargo run --example synthetic_training -- [epochs] [run-dir]

use std::path::PathBuf;

use wcnet::data::{gen_synthetic, nearest_centroid_accuracy, Split};
use wcnet::run::{train_run, RunConfig};

fn main() -> wcnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::desk();
    if let Some(e) = args.next() {
        cfg.train.epochs = e.parse().map_err(|_| wcnet::Error::InvalidArgument(format!("epochs {e:?}")))?;
    }
    let out = args.next().map(PathBuf::from);

    let (cube, labels) = gen_synthetic(5, 64, 64, 32, 0.05, cfg.seed)?;
    let set = cfg.patch_set(&cube, &labels)?;
    println!("{} samples, nearest-centroid accuracy {:.4}", set.len(), nearest_centroid_accuracy(&set)?);

    let run = train_run(&cfg, &cube, &labels, out.as_deref())?;
    let m = run.metrics.get(Split::Test).expect("test split");
    println!(
        "{} epochs in {:.1} s; test OA {:.4}  AA {:.4}  kappa {:.4}",
        run.history.epochs.len(),
        run.info.seconds,
        m.overall_accuracy,
        m.average_accuracy,
        m.kappa
    );
    Ok(())
}
